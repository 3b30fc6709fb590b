//! Counterfactual teacher assignments and their achievement effects.
//!
//! Predicted outcomes under each teacher level are aggregated to
//! teacher-classroom clusters, an exact transportation solve produces the
//! best or worst assignment subject to per-cell teacher supply, and the
//! module reports average reallocation effects, assortativeness summaries,
//! and closed-form value-added replacement benchmarks.

mod flow;

use std::collections::BTreeMap;

use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::design::{self, CategorySpec, DesignError};
use crate::estimator::IVEstimate;
use crate::synth::{BlockId, SchoolType, SectionId, StudentId, TeacherId, VisibleDataset};

#[derive(Debug, Error)]
pub enum ReallocError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("estimate was fitted for {est_types} types x {est_levels} levels, dataset implies {types} x {levels}")]
    MismatchedSpec {
        est_types: usize,
        est_levels: usize,
        types: usize,
        levels: usize,
    },
    #[error("cluster of teacher {0} spans multiple cells; cannot reassign as a unit")]
    MixedCellCluster(TeacherId),
    #[error("cell {cell}: supply {supply} does not match {clusters} clusters")]
    SupplyMismatch {
        cell: String,
        supply: usize,
        clusters: usize,
    },
    #[error("cell {cell} has {n} clusters; brute force is limited to {max}")]
    BruteForceTooLarge { cell: String, n: usize, max: usize },
    #[error("plan has {found} entries, table has {expected} clusters")]
    PlanLength { found: usize, expected: usize },
    #[error("value table has no clusters")]
    EmptyTable,
    #[error("invalid policy: {0}")]
    BadPolicy(String),
    #[error("weights length {found} does not match cluster count {expected}")]
    WeightLength { found: usize, expected: usize },
}

/// Which boundaries teachers may not cross when reassigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellScheme {
    /// District by school type (the main specification).
    DistrictSchoolType,
    /// School type only: reassignment across districts allowed.
    SchoolType,
    /// Randomization block only: the most restrictive scheme.
    Block,
}

impl std::fmt::Display for CellScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CellScheme::DistrictSchoolType => write!(f, "district-school-type"),
            CellScheme::SchoolType => write!(f, "school-type"),
            CellScheme::Block => write!(f, "block"),
        }
    }
}

impl std::str::FromStr for CellScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "district-school-type" => Ok(CellScheme::DistrictSchoolType),
            "school-type" => Ok(CellScheme::SchoolType),
            "block" => Ok(CellScheme::Block),
            other => Err(format!(
                "unknown cell scheme `{other}` (expected district-school-type, school-type, or block)"
            )),
        }
    }
}

/// Whether per-cell teacher supply is counted from realized or assigned
/// teacher levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SupplySource {
    #[default]
    Realized,
    Assigned,
}

/// Opaque cell label; ordering gives deterministic per-cell iteration.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey(pub String);

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn cell_of(scheme: CellScheme, district: u32, school_type: SchoolType, block: BlockId) -> CellKey {
    match scheme {
        CellScheme::DistrictSchoolType => CellKey(format!("d{district}/{school_type}")),
        CellScheme::SchoolType => CellKey(format!("{school_type}")),
        CellScheme::Block => CellKey(format!("b{}", block.0)),
    }
}

/// One teacher-classroom cluster: the sections taught by one realized
/// teacher, reassigned as a unit.
#[derive(Debug, Clone)]
pub struct ClusterEntry {
    pub teacher: TeacherId,
    pub sections: Vec<SectionId>,
    pub cell: CellKey,
    /// Level of the cluster's realized teacher: the status quo.
    pub status_quo_level: usize,
    pub n_students: usize,
    /// Predicted aggregate outcome per candidate teacher level.
    pub values: Vec<f64>,
}

/// One student's predicted outcome per candidate teacher level.
#[derive(Debug, Clone)]
pub struct StudentEntry {
    pub student: StudentId,
    pub cluster: usize,
    pub own_type: usize,
    pub values: Vec<f64>,
}

/// Counterfactual predictions aggregated to teacher-classroom clusters,
/// plus everything needed to define assignment problems over them.
#[derive(Debug, Clone)]
pub struct ClassroomValueTable {
    pub n_levels: usize,
    pub n_types: usize,
    pub scheme: CellScheme,
    pub clusters: Vec<ClusterEntry>,
    pub students: Vec<StudentEntry>,
    /// Levels of distinct assigned teachers per cell, for the
    /// assigned-supply variant.
    pub assigned_supply: BTreeMap<CellKey, Vec<usize>>,
}

impl ClassroomValueTable {
    pub fn realized_supply(&self) -> BTreeMap<CellKey, Vec<usize>> {
        let mut supply: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
        for c in &self.clusters {
            let entry = supply
                .entry(c.cell.clone())
                .or_insert_with(|| vec![0; self.n_levels]);
            entry[c.status_quo_level] += 1;
        }
        supply
    }

    /// The status quo assignment: every cluster keeps its realized level.
    pub fn status_quo_plan(&self) -> AssignmentPlan {
        let levels: Vec<usize> = self.clusters.iter().map(|c| c.status_quo_level).collect();
        let objective = self.plan_objective(&levels);
        AssignmentPlan { levels, objective }
    }

    /// Objective of an assignment, summed in cluster order so that any two
    /// plans are compared with identical arithmetic.
    pub fn plan_objective(&self, levels: &[usize]) -> f64 {
        self.clusters
            .iter()
            .zip(levels)
            .map(|(c, &w)| c.values[w])
            .sum()
    }
}

/// Student-level inputs cached independently of the fitted coefficients, so
/// bootstrap replications can re-predict cheaply.
#[derive(Debug, Clone)]
pub struct CounterfactualModel {
    pub n_levels: usize,
    pub n_types: usize,
    pub scheme: CellScheme,
    students: Vec<StudentBasis>,
    clusters: Vec<ClusterBasis>,
    assigned_supply: BTreeMap<CellKey, Vec<usize>>,
}

#[derive(Debug, Clone)]
struct StudentBasis {
    student: StudentId,
    cluster: usize,
    own_type: usize,
    peer_fractions: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ClusterBasis {
    teacher: TeacherId,
    sections: Vec<SectionId>,
    cell: CellKey,
    status_quo_level: usize,
}

impl CounterfactualModel {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Student ids with their cluster index, in derivation order.
    pub fn student_clusters(&self) -> impl Iterator<Item = (StudentId, usize)> + '_ {
        self.students.iter().map(|s| (s.student, s.cluster))
    }

    /// Resolve clusters, cells, and per-student prediction inputs from a
    /// dataset. Sections sharing a realized teacher merge into one cluster.
    pub fn from_dataset(
        data: &VisibleDataset,
        spec: &CategorySpec,
        scheme: CellScheme,
    ) -> Result<Self, ReallocError> {
        let derived = design::derive(data, spec)?;
        let block_info: BTreeMap<BlockId, (u32, SchoolType)> = data
            .blocks()
            .iter()
            .map(|b| (b.id, (b.district.0, b.school_type)))
            .collect();
        let section_block: BTreeMap<SectionId, BlockId> =
            data.sections().iter().map(|s| (s.id, s.block)).collect();

        let cell_of_section = |sec: SectionId| -> Option<CellKey> {
            let block = *section_block.get(&sec)?;
            let (district, school_type) = *block_info.get(&block)?;
            Some(cell_of(scheme, district, school_type, block))
        };

        // Group rows by realized teacher.
        let mut cluster_index: BTreeMap<TeacherId, usize> = BTreeMap::new();
        let mut clusters: Vec<ClusterBasis> = Vec::new();
        let mut students: Vec<StudentBasis> = Vec::new();
        for row in &derived.rows {
            let idx = *cluster_index
                .entry(row.realized_teacher)
                .or_insert_with(|| {
                    clusters.push(ClusterBasis {
                        teacher: row.realized_teacher,
                        sections: Vec::new(),
                        cell: CellKey(String::new()),
                        status_quo_level: derived.teacher_levels[&row.realized_teacher],
                    });
                    clusters.len() - 1
                });
            if !clusters[idx].sections.contains(&row.realized_section) {
                clusters[idx].sections.push(row.realized_section);
            }
            students.push(StudentBasis {
                student: row.student,
                cluster: idx,
                own_type: row.own_type,
                peer_fractions: row.realized_peers.clone(),
            });
        }
        if clusters.is_empty() {
            return Err(ReallocError::EmptyTable);
        }

        // Resolve each cluster's cell; reject clusters spanning cells.
        for cluster in &mut clusters {
            let mut cells = cluster.sections.iter().filter_map(|&s| cell_of_section(s));
            let first = cells.next().ok_or(ReallocError::EmptyTable)?;
            if cells.any(|c| c != first) {
                return Err(ReallocError::MixedCellCluster(cluster.teacher));
            }
            cluster.cell = first;
        }

        // Assigned teacher supply per cell, over the same sections.
        let mut assigned_teachers: BTreeMap<CellKey, Vec<TeacherId>> = BTreeMap::new();
        for cluster in &clusters {
            for &sec in &cluster.sections {
                let assigned = data
                    .sections()
                    .iter()
                    .find(|s| s.id == sec)
                    .map(|s| s.assigned_teacher)
                    .expect("section exists");
                let list = assigned_teachers.entry(cluster.cell.clone()).or_default();
                if !list.contains(&assigned) {
                    list.push(assigned);
                }
            }
        }
        let assigned_supply: BTreeMap<CellKey, Vec<usize>> = assigned_teachers
            .into_iter()
            .map(|(cell, teachers)| {
                let mut counts = vec![0usize; derived.n_levels];
                for t in teachers {
                    counts[derived.teacher_levels[&t]] += 1;
                }
                (cell, counts)
            })
            .collect();

        Ok(Self {
            n_levels: derived.n_levels,
            n_types: derived.n_types,
            scheme,
            students,
            clusters,
            assigned_supply,
        })
    }

    /// Predicted outcome of one student under each teacher level: the
    /// level main effect plus the own-type and (optionally) peer-mix
    /// interactions. The nonparametric component, block effects, and own
    /// main effects are omitted; they cancel in any plan comparison.
    fn student_values(&self, est: &IVEstimate, s: &StudentBasis) -> Vec<f64> {
        let layout = &est.layout;
        (0..self.n_levels)
            .map(|w| {
                if w == 0 {
                    return 0.0;
                }
                let mut v = est.endog_coefficient(layout.w_cols[w - 1]);
                if s.own_type > 0 {
                    v += est.endog_coefficient(layout.xw_cols[s.own_type - 1][w - 1]);
                }
                if layout.include_lambda {
                    for (c, frac) in s.peer_fractions.iter().enumerate() {
                        v += est.endog_coefficient(layout.wx_cols[w - 1][c]) * frac;
                    }
                }
                v
            })
            .collect()
    }

    /// Evaluate the table for a fitted equation.
    pub fn predict(&self, est: &IVEstimate) -> Result<ClassroomValueTable, ReallocError> {
        if est.layout.n_types != self.n_types || est.layout.n_levels != self.n_levels {
            return Err(ReallocError::MismatchedSpec {
                est_types: est.layout.n_types,
                est_levels: est.layout.n_levels,
                types: self.n_types,
                levels: self.n_levels,
            });
        }
        let mut clusters: Vec<ClusterEntry> = self
            .clusters
            .iter()
            .map(|c| ClusterEntry {
                teacher: c.teacher,
                sections: c.sections.clone(),
                cell: c.cell.clone(),
                status_quo_level: c.status_quo_level,
                n_students: 0,
                values: vec![0.0; self.n_levels],
            })
            .collect();
        let mut students = Vec::with_capacity(self.students.len());
        for s in &self.students {
            let values = self.student_values(est, s);
            let cluster = &mut clusters[s.cluster];
            cluster.n_students += 1;
            for (acc, v) in cluster.values.iter_mut().zip(&values) {
                *acc += v;
            }
            students.push(StudentEntry {
                student: s.student,
                cluster: s.cluster,
                own_type: s.own_type,
                values,
            });
        }
        Ok(ClassroomValueTable {
            n_levels: self.n_levels,
            n_types: self.n_types,
            scheme: self.scheme,
            clusters,
            students,
            assigned_supply: self.assigned_supply.clone(),
        })
    }
}

/// Build the table in one step from a dataset and a fitted equation.
pub fn predict_counterfactuals(
    data: &VisibleDataset,
    spec: &CategorySpec,
    scheme: CellScheme,
    est: &IVEstimate,
) -> Result<ClassroomValueTable, ReallocError> {
    CounterfactualModel::from_dataset(data, spec, scheme)?.predict(est)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Maximize,
    Minimize,
}

/// A per-cell transportation problem over cluster values.
#[derive(Debug, Clone)]
pub struct AssignmentProblem {
    /// Value of assigning each cluster each level (already weighted when a
    /// weight vector was supplied).
    pub values: Vec<Vec<f64>>,
    pub cells: Vec<CellKey>,
    pub supply: BTreeMap<CellKey, Vec<usize>>,
    pub sense: Sense,
}

impl AssignmentProblem {
    /// Assemble the problem from a value table. `weights`, when given, is a
    /// per-cluster multiplier (the Bayesian-bootstrap cluster weight);
    /// supply-consistency is validated per cell.
    pub fn from_table(
        table: &ClassroomValueTable,
        sense: Sense,
        supply_source: SupplySource,
        weights: Option<&[f64]>,
    ) -> Result<Self, ReallocError> {
        if let Some(w) = weights {
            if w.len() != table.clusters.len() {
                return Err(ReallocError::WeightLength {
                    found: w.len(),
                    expected: table.clusters.len(),
                });
            }
        }
        let supply = match supply_source {
            SupplySource::Realized => table.realized_supply(),
            SupplySource::Assigned => table.assigned_supply.clone(),
        };
        let mut per_cell: BTreeMap<CellKey, usize> = BTreeMap::new();
        for c in &table.clusters {
            *per_cell.entry(c.cell.clone()).or_insert(0) += 1;
        }
        for (cell, n_clusters) in &per_cell {
            let total: usize = supply.get(cell).map(|s| s.iter().sum()).unwrap_or(0);
            if total != *n_clusters {
                return Err(ReallocError::SupplyMismatch {
                    cell: cell.0.clone(),
                    supply: total,
                    clusters: *n_clusters,
                });
            }
        }
        let values: Vec<Vec<f64>> = table
            .clusters
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let w = weights.map_or(1.0, |w| w[i]);
                c.values.iter().map(|&v| v * w).collect()
            })
            .collect();
        Ok(Self {
            values,
            cells: table.clusters.iter().map(|c| c.cell.clone()).collect(),
            supply,
            sense,
        })
    }

    pub fn objective(&self, levels: &[usize]) -> f64 {
        self.values.iter().zip(levels).map(|(row, &w)| row[w]).sum()
    }

    fn cell_groups(&self) -> BTreeMap<CellKey, Vec<usize>> {
        let mut groups: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
        for (i, cell) in self.cells.iter().enumerate() {
            groups.entry(cell.clone()).or_default().push(i);
        }
        groups
    }
}

/// An integral assignment of one teacher level per cluster.
#[derive(Debug, Clone)]
pub struct AssignmentPlan {
    pub levels: Vec<usize>,
    pub objective: f64,
}

/// Exact optimal assignment via minimum-cost flow, cell by cell.
pub fn solve_assignment(problem: &AssignmentProblem) -> Result<AssignmentPlan, ReallocError> {
    let mut levels = vec![0usize; problem.values.len()];
    for (cell, idxs) in problem.cell_groups() {
        let supply = &problem.supply[&cell];
        let costs: Vec<Vec<f64>> = idxs
            .iter()
            .map(|&i| {
                problem.values[i]
                    .iter()
                    .map(|&v| match problem.sense {
                        Sense::Maximize => -v,
                        Sense::Minimize => v,
                    })
                    .collect()
            })
            .collect();
        let assignment = flow::solve_transportation(&costs, supply);
        for (slot, &i) in idxs.iter().enumerate() {
            levels[i] = assignment[slot];
        }
    }
    let objective = problem.objective(&levels);
    Ok(AssignmentPlan { levels, objective })
}

pub const BRUTE_FORCE_MAX_CLUSTERS: usize = 10;

/// Exhaustive-enumeration oracle for [`solve_assignment`]; every feasible
/// placement of the level multiset is tried in lexicographic order, so the
/// returned optimum is the lexicographically smallest one.
pub fn brute_force_assignment(problem: &AssignmentProblem) -> Result<AssignmentPlan, ReallocError> {
    let mut levels = vec![0usize; problem.values.len()];
    for (cell, idxs) in problem.cell_groups() {
        if idxs.len() > BRUTE_FORCE_MAX_CLUSTERS {
            return Err(ReallocError::BruteForceTooLarge {
                cell: cell.0.clone(),
                n: idxs.len(),
                max: BRUTE_FORCE_MAX_CLUSTERS,
            });
        }
        let mut remaining = problem.supply[&cell].clone();
        let mut current = vec![0usize; idxs.len()];
        let mut best: Option<(f64, Vec<usize>)> = None;
        enumerate(
            problem,
            &idxs,
            0,
            0.0,
            &mut remaining,
            &mut current,
            &mut best,
        );
        let (_, assignment) = best.expect("at least one feasible placement");
        for (slot, &i) in idxs.iter().enumerate() {
            levels[i] = assignment[slot];
        }
    }
    let objective = problem.objective(&levels);
    Ok(AssignmentPlan { levels, objective })
}

fn enumerate(
    problem: &AssignmentProblem,
    idxs: &[usize],
    pos: usize,
    acc: f64,
    remaining: &mut Vec<usize>,
    current: &mut Vec<usize>,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    if pos == idxs.len() {
        let better = match (problem.sense, best.as_ref()) {
            (_, None) => true,
            (Sense::Maximize, Some((b, _))) => acc > *b,
            (Sense::Minimize, Some((b, _))) => acc < *b,
        };
        if better {
            *best = Some((acc, current.clone()));
        }
        return;
    }
    for w in 0..remaining.len() {
        if remaining[w] == 0 {
            continue;
        }
        remaining[w] -= 1;
        current[pos] = w;
        enumerate(
            problem,
            idxs,
            pos + 1,
            acc + problem.values[idxs[pos]][w],
            remaining,
            current,
            best,
        );
        remaining[w] += 1;
    }
}

/// Check that a plan exhausts the per-cell supply exactly.
pub fn check_plan_feasible(
    problem: &AssignmentProblem,
    plan: &AssignmentPlan,
) -> Result<(), ReallocError> {
    if plan.levels.len() != problem.values.len() {
        return Err(ReallocError::PlanLength {
            found: plan.levels.len(),
            expected: problem.values.len(),
        });
    }
    for (cell, idxs) in problem.cell_groups() {
        let mut counts = vec![0usize; problem.supply[&cell].len()];
        for &i in &idxs {
            counts[plan.levels[i]] += 1;
        }
        if counts != problem.supply[&cell] {
            return Err(ReallocError::SupplyMismatch {
                cell: cell.0.clone(),
                supply: problem.supply[&cell].iter().sum(),
                clusters: idxs.len(),
            });
        }
    }
    Ok(())
}

/// An average reallocation effect between two plans.
#[derive(Debug, Clone)]
pub struct AreReport {
    /// Mean gain over the averaged set; `None` when that set is empty.
    pub gain: Option<f64>,
    /// Raw student count of the averaged set.
    pub n_students: usize,
    /// Weight mass of the averaged set (equals the count when unweighted).
    pub weight: f64,
    /// Weighted fraction of the (subgroup-filtered) students whose
    /// cluster's teacher level differs between the two plans.
    pub reassigned_fraction: f64,
}

/// Mean predicted-outcome difference between `plan_a` and `plan_b`.
///
/// `subgroup` filters on own student type; with `conditional_on_reassigned`
/// the mean runs only over students whose cluster level changes between the
/// plans. `weights` is a per-cluster weight vector (students inherit their
/// cluster's weight).
pub fn compute_are(
    table: &ClassroomValueTable,
    plan_a: &AssignmentPlan,
    plan_b: &AssignmentPlan,
    subgroup: Option<usize>,
    conditional_on_reassigned: bool,
    weights: Option<&[f64]>,
) -> Result<AreReport, ReallocError> {
    for plan in [plan_a, plan_b] {
        if plan.levels.len() != table.clusters.len() {
            return Err(ReallocError::PlanLength {
                found: plan.levels.len(),
                expected: table.clusters.len(),
            });
        }
    }
    if let Some(w) = weights {
        if w.len() != table.clusters.len() {
            return Err(ReallocError::WeightLength {
                found: w.len(),
                expected: table.clusters.len(),
            });
        }
    }
    let mut filtered_weight = 0.0;
    let mut reassigned_weight = 0.0;
    let mut gain_sum = 0.0;
    let mut averaged_weight = 0.0;
    let mut averaged_count = 0usize;
    for s in &table.students {
        if subgroup.is_some_and(|g| s.own_type != g) {
            continue;
        }
        let w = weights.map_or(1.0, |w| w[s.cluster]);
        let (wa, wb) = (plan_a.levels[s.cluster], plan_b.levels[s.cluster]);
        let reassigned = wa != wb;
        filtered_weight += w;
        if reassigned {
            reassigned_weight += w;
        }
        if conditional_on_reassigned && !reassigned {
            continue;
        }
        gain_sum += w * (s.values[wa] - s.values[wb]);
        averaged_weight += w;
        averaged_count += 1;
    }
    let reassigned_fraction = if filtered_weight > 0.0 {
        reassigned_weight / filtered_weight
    } else {
        0.0
    };
    Ok(AreReport {
        gain: (averaged_weight > 0.0).then(|| gain_sum / averaged_weight),
        n_students: averaged_count,
        weight: averaged_weight,
        reassigned_fraction,
    })
}

/// Average within-class student-type shares per teacher level under a plan.
#[derive(Debug, Clone)]
pub struct AssortRow {
    pub level: usize,
    pub n_clusters: usize,
    /// Mean type shares over this level's classrooms; sums to one.
    pub shares: Vec<f64>,
}

/// For each teacher level, the average over its classrooms of the
/// within-class student-type composition. Levels with no classrooms under
/// the plan are omitted.
pub fn assortativeness_summary(
    table: &ClassroomValueTable,
    plan: &AssignmentPlan,
) -> Result<Vec<AssortRow>, ReallocError> {
    if plan.levels.len() != table.clusters.len() {
        return Err(ReallocError::PlanLength {
            found: plan.levels.len(),
            expected: table.clusters.len(),
        });
    }
    let mut type_counts: Vec<Vec<usize>> = vec![vec![0usize; table.n_types]; table.clusters.len()];
    for s in &table.students {
        type_counts[s.cluster][s.own_type] += 1;
    }
    let mut rows = Vec::new();
    for level in 0..table.n_levels {
        let mut shares = vec![0.0; table.n_types];
        let mut n_clusters = 0usize;
        for (c, counts) in type_counts.iter().enumerate() {
            if plan.levels[c] != level {
                continue;
            }
            let total: usize = counts.iter().sum();
            if total == 0 {
                continue;
            }
            for (acc, &cnt) in shares.iter_mut().zip(counts) {
                *acc += cnt as f64 / total as f64;
            }
            n_clusters += 1;
        }
        if n_clusters == 0 {
            continue;
        }
        for s in &mut shares {
            *s /= n_clusters as f64;
        }
        rows.push(AssortRow {
            level,
            n_clusters,
            shares,
        });
    }
    Ok(rows)
}

/// A hypothetical teacher-replacement policy on a Gaussian value-added
/// scale: remove the bottom `tau` fraction of teachers and replace them
/// with average teachers, or with teachers at the `tau_tilde` quantile.
#[derive(Debug, Clone, Copy)]
pub struct VamPolicy {
    /// Standard deviation of teacher value-added, in test-score SDs.
    pub sigma: f64,
    /// Replaced fraction.
    pub tau: f64,
    /// Replacement quantile; `None` replaces with mean-zero teachers.
    pub tau_tilde: Option<f64>,
}

/// Expected test-score gain of the replacement policy, in test-score SDs.
///
/// Replace-with-average: `sigma * phi(Phi^-1(tau))`. The quantile variant
/// adds `tau * sigma * Phi^-1(tau_tilde)`: the replacement premium accrues
/// on the replaced fraction.
pub fn vam_benchmark(policy: &VamPolicy) -> Result<f64, ReallocError> {
    if policy.sigma <= 0.0 || policy.sigma.is_nan() {
        return Err(ReallocError::BadPolicy(format!(
            "sigma must be positive, got {}",
            policy.sigma
        )));
    }
    for (name, v) in [("tau", Some(policy.tau)), ("tau_tilde", policy.tau_tilde)] {
        if let Some(v) = v {
            if !(0.0 < v && v < 1.0) {
                return Err(ReallocError::BadPolicy(format!(
                    "{name} must lie strictly inside (0, 1), got {v}"
                )));
            }
        }
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z_tau = normal.inverse_cdf(policy.tau);
    let mut effect = policy.sigma * normal.pdf(z_tau);
    if let Some(tau_tilde) = policy.tau_tilde {
        effect += policy.tau * policy.sigma * normal.inverse_cdf(tau_tilde);
    }
    Ok(effect)
}

#[cfg(test)]
mod tests;
