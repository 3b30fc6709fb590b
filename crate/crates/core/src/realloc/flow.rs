//! Minimum-cost flow on the cluster-to-level bipartite network.
//!
//! Successive shortest augmenting paths with node potentials. The network
//! is source -> cluster (capacity 1) -> level (capacity 1 per pair) ->
//! sink (capacity = level supply); every augmentation pushes one unit, so
//! the final flow is an integral assignment. Initial potentials come from
//! one relaxation pass over the layered DAG; afterwards reduced costs stay
//! nonnegative and Dijkstra applies.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

#[derive(Debug, Clone)]
struct Edge {
    to: usize,
    cap: i64,
    cost: f64,
    /// Index of the reverse edge in `graph[to]`.
    rev: usize,
}

struct Network {
    graph: Vec<Vec<Edge>>,
}

impl Network {
    fn new(n: usize) -> Self {
        Self {
            graph: vec![Vec::new(); n],
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: i64, cost: f64) {
        let rev_from = self.graph[to].len();
        let rev_to = self.graph[from].len();
        self.graph[from].push(Edge {
            to,
            cap,
            cost,
            rev: rev_from,
        });
        self.graph[to].push(Edge {
            to: from,
            cap: 0,
            cost: -cost,
            rev: rev_to,
        });
    }
}

/// Assign each cluster exactly one level, using at most `supply[w]` clusters
/// per level, minimizing total `cost[c][w]`. Requires
/// `sum(supply) == n_clusters`. Returns the chosen level per cluster.
///
/// Deterministic: ties are resolved by fixed iteration order (clusters and
/// levels ascending, lower node index preferred on equal path length).
pub fn solve_transportation(cost: &[Vec<f64>], supply: &[usize]) -> Vec<usize> {
    let n_clusters = cost.len();
    let n_levels = supply.len();
    debug_assert_eq!(supply.iter().sum::<usize>(), n_clusters);

    let source = 0;
    let cluster0 = 1;
    let level0 = cluster0 + n_clusters;
    let sink = level0 + n_levels;
    let n_nodes = sink + 1;

    let mut net = Network::new(n_nodes);
    for (c, row) in cost.iter().enumerate() {
        net.add_edge(source, cluster0 + c, 1, 0.0);
        for (w, row_cost) in row.iter().enumerate() {
            net.add_edge(cluster0 + c, level0 + w, 1, *row_cost);
        }
    }
    for (w, &s) in supply.iter().enumerate() {
        net.add_edge(level0 + w, sink, s as i64, 0.0);
    }

    // Initial potentials by relaxation in layer order (the residual graph
    // is a DAG before any flow is pushed).
    let mut potential = vec![0.0f64; n_nodes];
    for row in cost {
        for (w, row_cost) in row.iter().enumerate() {
            let node = level0 + w;
            if potential[node] > *row_cost {
                potential[node] = *row_cost;
            }
        }
    }
    potential[sink] = (0..n_levels)
        .map(|w| potential[level0 + w])
        .fold(f64::INFINITY, f64::min);

    let mut prev: Vec<Option<(usize, usize)>> = vec![None; n_nodes];
    let mut dist = vec![f64::INFINITY; n_nodes];

    for _ in 0..n_clusters {
        // Dijkstra on reduced costs.
        dist.fill(f64::INFINITY);
        prev.fill(None);
        dist[source] = 0.0;
        let mut heap: BinaryHeap<Reverse<(ordered::F64, usize)>> = BinaryHeap::new();
        heap.push(Reverse((ordered::F64(0.0), source)));
        while let Some(Reverse((ordered::F64(d), u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (ei, e) in net.graph[u].iter().enumerate() {
                if e.cap <= 0 {
                    continue;
                }
                // Reduced cost; clamp the rounding dust at zero.
                let rc = (e.cost + potential[u] - potential[e.to]).max(0.0);
                let nd = d + rc;
                if nd < dist[e.to] {
                    dist[e.to] = nd;
                    prev[e.to] = Some((u, ei));
                    heap.push(Reverse((ordered::F64(nd), e.to)));
                }
            }
        }
        debug_assert!(dist[sink].is_finite(), "network must remain feasible");

        for (node, d) in dist.iter().enumerate() {
            if d.is_finite() {
                potential[node] += d;
            }
        }

        // Augment one unit along the shortest path.
        let mut v = sink;
        while v != source {
            let (u, ei) = prev[v].expect("path exists");
            let rev = net.graph[u][ei].rev;
            net.graph[u][ei].cap -= 1;
            net.graph[v][rev].cap += 1;
            v = u;
        }
    }

    let mut assignment = vec![usize::MAX; n_clusters];
    for (c, slot) in assignment.iter_mut().enumerate() {
        for e in &net.graph[cluster0 + c] {
            if e.to >= level0 && e.to < level0 + n_levels && e.cap == 0 {
                *slot = e.to - level0;
            }
        }
    }
    debug_assert!(assignment.iter().all(|&w| w != usize::MAX));
    assignment
}

mod ordered {
    /// Total order wrapper for path lengths; never NaN by construction.
    #[derive(PartialEq, Clone, Copy, Debug)]
    pub struct F64(pub f64);

    impl Eq for F64 {}

    impl PartialOrd for F64 {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    impl Ord for F64 {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0)
        }
    }
}
