use super::*;
use crate::design::EndogLayout;
use crate::estimator::IVEstimate;
use approx::assert_abs_diff_eq;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn cell(name: &str) -> CellKey {
    CellKey(name.to_string())
}

/// A bare table: one cell, given per-cluster values, one student per
/// cluster of alternating types.
fn table_from_values(
    values: Vec<Vec<f64>>,
    sq_levels: Vec<usize>,
    n_types: usize,
) -> ClassroomValueTable {
    let n_levels = values[0].len();
    let clusters: Vec<ClusterEntry> = values
        .iter()
        .enumerate()
        .map(|(i, v)| ClusterEntry {
            teacher: TeacherId(i as u32),
            sections: vec![SectionId(i as u32)],
            cell: cell("c0"),
            status_quo_level: sq_levels[i],
            n_students: 1,
            values: v.clone(),
        })
        .collect();
    let students: Vec<StudentEntry> = values
        .iter()
        .enumerate()
        .map(|(i, v)| StudentEntry {
            student: StudentId(i as u32),
            cluster: i,
            own_type: i % n_types,
            values: v.clone(),
        })
        .collect();
    ClassroomValueTable {
        n_levels,
        n_types,
        scheme: CellScheme::DistrictSchoolType,
        clusters,
        students,
        assigned_supply: BTreeMap::new(),
    }
}

fn problem(table: &ClassroomValueTable, sense: Sense) -> AssignmentProblem {
    AssignmentProblem::from_table(table, sense, SupplySource::Realized, None).unwrap()
}

#[test]
fn forced_assignment_single_cluster_single_level() {
    let table = table_from_values(vec![vec![2.5]], vec![0], 1);
    let p = problem(&table, Sense::Maximize);
    let plan = solve_assignment(&p).unwrap();
    assert_eq!(plan.levels, vec![0]);
    assert_eq!(plan.objective, 2.5);
    let oracle = brute_force_assignment(&p).unwrap();
    assert_eq!(oracle.levels, plan.levels);
}

#[test]
fn four_clusters_favoring_high_matches_enumeration() {
    // Levels {L, H} with supply (2, 2); clusters 0 and 1 gain from H.
    let values = vec![
        vec![0.0, 5.0],
        vec![0.0, 4.0],
        vec![0.0, 1.0],
        vec![0.0, 0.5],
    ];
    let table = table_from_values(values, vec![0, 0, 1, 1], 2);
    let p = problem(&table, Sense::Maximize);
    let plan = solve_assignment(&p).unwrap();
    assert_eq!(plan.levels, vec![1, 1, 0, 0]);
    let oracle = brute_force_assignment(&p).unwrap();
    assert_eq!(plan.objective, oracle.objective);
    assert_eq!(oracle.levels, vec![1, 1, 0, 0]);
}

#[test]
fn equal_values_any_feasible_plan_is_optimal() {
    let values = vec![vec![3.0, 3.0]; 4];
    let table = table_from_values(values, vec![0, 1, 0, 1], 2);
    let p = problem(&table, Sense::Maximize);
    let plan = solve_assignment(&p).unwrap();
    check_plan_feasible(&p, &plan).unwrap();
    assert_eq!(plan.objective, 12.0);
}

#[test]
fn worst_sense_minimizes() {
    let values = vec![vec![0.0, 5.0], vec![0.0, -2.0]];
    let table = table_from_values(values, vec![0, 1], 2);
    let p = problem(&table, Sense::Minimize);
    let plan = solve_assignment(&p).unwrap();
    // Supply is one L and one H; the minimum puts H on the losing cluster.
    assert_eq!(plan.levels, vec![0, 1]);
    assert_eq!(plan.objective, -2.0);
}

#[test]
fn supply_mismatch_names_cell() {
    let mut table = table_from_values(vec![vec![0.0, 1.0], vec![0.0, 2.0]], vec![0, 1], 2);
    // Corrupt: claim both realized teachers are level 0 in a 1-cluster cell
    // by pointing one cluster at a different cell with no supply entry.
    table.clusters[1].cell = cell("elsewhere");
    let err = AssignmentProblem::from_table(&table, Sense::Maximize, SupplySource::Realized, None);
    assert!(err.is_ok(), "realized supply follows the clusters");
    // Assigned supply is empty -> mismatch for every cell.
    let err = AssignmentProblem::from_table(&table, Sense::Maximize, SupplySource::Assigned, None)
        .unwrap_err();
    match err {
        ReallocError::SupplyMismatch { cell, .. } => assert!(!cell.is_empty()),
        other => panic!("expected supply mismatch, got {other}"),
    }
}

#[test]
fn brute_force_size_guard() {
    let values: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64, 0.0]).collect();
    let mut sq = vec![0usize; 11];
    sq[0] = 1;
    let table = table_from_values(values, sq, 2);
    let p = problem(&table, Sense::Maximize);
    assert!(matches!(
        brute_force_assignment(&p),
        Err(ReallocError::BruteForceTooLarge { .. })
    ));
}

#[test]
fn antisymmetric_two_cluster_instance_unique_optimum() {
    let values = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
    let table = table_from_values(values, vec![0, 1], 2);
    let p = problem(&table, Sense::Maximize);
    let plan = solve_assignment(&p).unwrap();
    let oracle = brute_force_assignment(&p).unwrap();
    assert_eq!(plan.levels, vec![0, 1]);
    assert_eq!(oracle.levels, vec![0, 1]);
    assert_eq!(plan.objective, 2.0);
}

/// Random instance with dyadic values so sums are exact in floating point.
fn random_instance(rng: &mut ChaCha8Rng, max_clusters: usize) -> (ClassroomValueTable, Vec<usize>) {
    let n_levels = rng.random_range(2..=4usize);
    let n_clusters = rng.random_range(1..=max_clusters);
    let values: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| {
            (0..n_levels)
                .map(|_| rng.random_range(-512i32..=512) as f64 / 16.0)
                .collect()
        })
        .collect();
    // Random feasible status quo: supply follows from these levels.
    let sq: Vec<usize> = (0..n_clusters)
        .map(|_| rng.random_range(0..n_levels))
        .collect();
    (table_from_values(values, sq.clone(), 2), sq)
}

#[test]
fn solver_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let (table, _) = random_instance(&mut rng, 8);
        for sense in [Sense::Maximize, Sense::Minimize] {
            let p = problem(&table, sense);
            let plan = solve_assignment(&p).unwrap();
            let oracle = brute_force_assignment(&p).unwrap();
            check_plan_feasible(&p, &plan).unwrap();
            check_plan_feasible(&p, &oracle).unwrap();
            assert_eq!(
                plan.objective, oracle.objective,
                "sense {sense:?} values {:?}",
                p.values
            );
        }
    }
}

#[test]
fn objective_order_optimal_statusquo_worst() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let (table, _) = random_instance(&mut rng, 8);
        let pmax = problem(&table, Sense::Maximize);
        let pmin = problem(&table, Sense::Minimize);
        let best = solve_assignment(&pmax).unwrap();
        let worst = solve_assignment(&pmin).unwrap();
        let sq = table.status_quo_plan();
        assert!(best.objective >= sq.objective - 1e-12);
        assert!(sq.objective >= worst.objective - 1e-12);
    }
}

#[test]
fn plan_objective_invariant_to_per_cluster_constant_shift() {
    // Adding a constant to all levels of one cluster shifts every plan's
    // objective by that constant and leaves the argmax unchanged; this is
    // what justifies omitting level-invariant terms from predictions.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (table, _) = random_instance(&mut rng, 6);
    let p = problem(&table, Sense::Maximize);
    let plan = solve_assignment(&p).unwrap();

    let mut shifted = table.clone();
    let shift = 128.0;
    for v in &mut shifted.clusters[0].values {
        *v += shift;
    }
    let p2 = problem(&shifted, Sense::Maximize);
    let plan2 = solve_assignment(&p2).unwrap();
    assert_eq!(plan.levels, plan2.levels);
    assert_eq!(plan2.objective, plan.objective + shift);
}

#[test]
fn are_identical_plans_zero_gain_zero_fraction() {
    let table = table_from_values(
        vec![
            vec![0.0, 1.0],
            vec![0.0, 2.0],
            vec![0.0, 3.0],
            vec![0.0, 4.0],
        ],
        vec![0, 0, 1, 1],
        2,
    );
    let sq = table.status_quo_plan();
    let rep = compute_are(&table, &sq, &sq, None, false, None).unwrap();
    assert_eq!(rep.gain, Some(0.0));
    assert_eq!(rep.reassigned_fraction, 0.0);
}

#[test]
fn are_equals_conditional_times_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let (table, _) = random_instance(&mut rng, 8);
        let p = problem(&table, Sense::Maximize);
        let best = solve_assignment(&p).unwrap();
        let sq = table.status_quo_plan();
        let overall = compute_are(&table, &best, &sq, None, false, None).unwrap();
        let cond = compute_are(&table, &best, &sq, None, true, None).unwrap();
        let lhs = overall.gain.unwrap();
        let rhs = cond.gain.unwrap_or(0.0) * cond.reassigned_fraction;
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
    }
}

#[test]
fn subgroup_ares_aggregate_to_overall() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..40 {
        let (table, _) = random_instance(&mut rng, 8);
        let p = problem(&table, Sense::Maximize);
        let best = solve_assignment(&p).unwrap();
        let sq = table.status_quo_plan();
        let overall = compute_are(&table, &best, &sq, None, false, None).unwrap();
        let mut weighted = 0.0;
        let mut total = 0.0;
        for g in 0..table.n_types {
            let rep = compute_are(&table, &best, &sq, Some(g), false, None).unwrap();
            if let Some(gain) = rep.gain {
                weighted += gain * rep.weight;
                total += rep.weight;
            }
        }
        assert_abs_diff_eq!(overall.gain.unwrap(), weighted / total, epsilon = 1e-10);
    }
}

#[test]
fn empty_subgroup_is_explicit() {
    let table = table_from_values(vec![vec![0.0, 1.0]], vec![1], 1);
    let sq = table.status_quo_plan();
    let rep = compute_are(&table, &sq, &sq, Some(5), false, None).unwrap();
    assert_eq!(rep.gain, None);
    assert_eq!(rep.n_students, 0);
}

#[test]
fn optimal_vs_status_quo_nonnegative_and_dominated_by_max_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let (table, _) = random_instance(&mut rng, 8);
        let pmax = problem(&table, Sense::Maximize);
        let pmin = problem(&table, Sense::Minimize);
        let best = solve_assignment(&pmax).unwrap();
        let worst = solve_assignment(&pmin).unwrap();
        let sq = table.status_quo_plan();
        let vs_sq = compute_are(&table, &best, &sq, None, false, None)
            .unwrap()
            .gain
            .unwrap();
        let vs_worst = compute_are(&table, &best, &worst, None, false, None)
            .unwrap()
            .gain
            .unwrap();
        assert!(vs_sq >= -1e-12);
        assert!(vs_worst >= vs_sq - 1e-12);
    }
}

#[test]
fn assortativeness_single_class_one_hot() {
    // One cluster of all-type-2 students taught at the top level.
    let mut table = table_from_values(vec![vec![0.0, 0.0, 1.0]], vec![2], 3);
    table.students = (0..4)
        .map(|i| StudentEntry {
            student: StudentId(i),
            cluster: 0,
            own_type: 2,
            values: vec![0.0, 0.0, 1.0],
        })
        .collect();
    table.clusters[0].n_students = 4;
    let sq = table.status_quo_plan();
    let rows = assortativeness_summary(&table, &sq).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].level, 2);
    assert_eq!(rows[0].shares, vec![0.0, 0.0, 1.0]);
}

#[test]
fn assortativeness_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (table, _) = random_instance(&mut rng, 8);
    let sq = table.status_quo_plan();
    for row in assortativeness_summary(&table, &sq).unwrap() {
        let total: f64 = row.shares.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }
}

fn layout_3x3(include_lambda: bool) -> EndogLayout {
    let mut next = 0usize;
    let mut take = || {
        let v = Some(next);
        next += 1;
        v
    };
    EndogLayout {
        n_types: 3,
        n_levels: 3,
        include_lambda,
        w_cols: vec![take(), take()],
        xw_cols: vec![vec![take(), take()], vec![take(), take()]],
        wx_cols: if include_lambda {
            vec![vec![take(), take()], vec![take(), take()]]
        } else {
            vec![]
        },
    }
}

#[test]
fn student_values_match_hand_dot_products() {
    // delta = (0.1, 0.3); eta rows: type1 (0.2, 0.4), type2 (0.5, 0.7);
    // lambda rows: level1 (0.01, 0.02), level2 (0.03, 0.04).
    let coefs = vec![0.1, 0.3, 0.2, 0.4, 0.5, 0.7, 0.01, 0.02, 0.03, 0.04];
    let est = IVEstimate::from_coefficients(
        (0..coefs.len()).map(|i| format!("b{i}")).collect(),
        coefs,
        layout_3x3(true),
        10,
    );
    let model = CounterfactualModel {
        n_levels: 3,
        n_types: 3,
        scheme: CellScheme::DistrictSchoolType,
        students: vec![
            StudentBasis {
                student: StudentId(0),
                cluster: 0,
                own_type: 2,
                peer_fractions: vec![0.0, 1.0],
            },
            StudentBasis {
                student: StudentId(1),
                cluster: 0,
                own_type: 1,
                peer_fractions: vec![0.0, 0.0],
            },
        ],
        clusters: vec![ClusterBasis {
            teacher: TeacherId(0),
            sections: vec![SectionId(0)],
            cell: cell("c"),
            status_quo_level: 1,
        }],
        assigned_supply: BTreeMap::new(),
    };
    let table = model.predict(&est).unwrap();
    // Student 0 (type 2, all peers type 2): level 0 -> 0;
    // level 1 -> 0.1 + 0.5 + 0.02; level 2 -> 0.3 + 0.7 + 0.04.
    assert_eq!(table.students[0].values[0], 0.0);
    assert_abs_diff_eq!(table.students[0].values[1], 0.62, epsilon = 1e-15);
    assert_abs_diff_eq!(table.students[0].values[2], 1.04, epsilon = 1e-15);
    // Student 1 (type 1, all peers type 0): level 1 -> 0.1 + 0.2.
    assert_abs_diff_eq!(table.students[1].values[1], 0.3, epsilon = 1e-15);
    // Cluster aggregates are sums over its students.
    assert_abs_diff_eq!(table.clusters[0].values[1], 0.62 + 0.3, epsilon = 1e-15);
}

#[test]
fn zero_coefficients_make_every_plan_equal() {
    let est = IVEstimate::from_coefficients(
        (0..6).map(|i| format!("b{i}")).collect(),
        vec![0.0; 6],
        layout_3x3(false),
        6,
    );
    let model = CounterfactualModel {
        n_levels: 3,
        n_types: 3,
        scheme: CellScheme::DistrictSchoolType,
        students: vec![StudentBasis {
            student: StudentId(0),
            cluster: 0,
            own_type: 1,
            peer_fractions: vec![0.5, 0.5],
        }],
        clusters: vec![ClusterBasis {
            teacher: TeacherId(0),
            sections: vec![SectionId(0)],
            cell: cell("c"),
            status_quo_level: 0,
        }],
        assigned_supply: BTreeMap::new(),
    };
    let table = model.predict(&est).unwrap();
    assert!(table.clusters[0].values.iter().all(|&v| v == 0.0));
    let p = problem(&table, Sense::Maximize);
    let plan = solve_assignment(&p).unwrap();
    assert_eq!(plan.objective, 0.0);
}

#[test]
fn vam_replace_with_average_matches_reference_values() {
    let e1 = vam_benchmark(&VamPolicy {
        sigma: 0.15,
        tau: 0.05,
        tau_tilde: None,
    })
    .unwrap();
    assert!((e1 - 0.015).abs() < 0.001, "tau=0.05 -> {e1}");
    let e2 = vam_benchmark(&VamPolicy {
        sigma: 0.15,
        tau: 0.10,
        tau_tilde: None,
    })
    .unwrap();
    assert!((e2 - 0.026).abs() < 0.001, "tau=0.10 -> {e2}");
}

#[test]
fn vam_quantile_variant_matches_reference_value() {
    let e = vam_benchmark(&VamPolicy {
        sigma: 0.15,
        tau: 0.05,
        tau_tilde: Some(0.75),
    })
    .unwrap();
    assert!((e - 0.021).abs() < 0.001, "quantile variant -> {e}");
}

#[test]
fn vam_vanishes_with_sigma() {
    let e = vam_benchmark(&VamPolicy {
        sigma: 1e-9,
        tau: 0.05,
        tau_tilde: None,
    })
    .unwrap();
    assert!(e < 1e-9);
    assert!(vam_benchmark(&VamPolicy {
        sigma: 0.0,
        tau: 0.05,
        tau_tilde: None
    })
    .is_err());
}

#[test]
fn vam_monotone_in_tau_and_tau_tilde() {
    // Monotone in tau on the policy range (below one half, and below the
    // replacement quantile in the two-term variant), and in tau_tilde
    // everywhere.
    let mut prev = 0.0;
    for i in 1..50 {
        let tau = i as f64 / 100.0;
        let e = vam_benchmark(&VamPolicy {
            sigma: 0.15,
            tau,
            tau_tilde: None,
        })
        .unwrap();
        assert!(e > prev, "tau={tau}");
        prev = e;
    }
    let mut prev = f64::NEG_INFINITY;
    for i in 1..20 {
        let tau_tilde = 0.5 + i as f64 / 50.0;
        let e = vam_benchmark(&VamPolicy {
            sigma: 0.15,
            tau: 0.05,
            tau_tilde: Some(tau_tilde),
        })
        .unwrap();
        assert!(e > prev);
        prev = e;
    }
}
