//! From dataset to estimator input.
//!
//! Discretizes teacher practice scores by fixed cutoffs and student baseline
//! scores by within-district empirical K-tiles, computes leave-own-out peer
//! fractions on both assigned and realized rosters, assembles the
//! endogenous / control / instrument blocks of the partially linear IV
//! equation, and absorbs randomization-block fixed effects by (optionally
//! weighted) within-block demeaning.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::synth::{BlockId, SectionId, StudentId, TeacherId, VisibleDataset};

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("teacher cutoffs must be strictly ascending and nonempty")]
    BadCutoffs,
    #[error("student rule must produce at least 2 categories")]
    BadStudentRule,
    #[error("non-finite score encountered at index {0}")]
    NonFiniteScore(usize),
    #[error("district {district} has {found} students, fewer than K = {k}")]
    DistrictTooSmall {
        district: u32,
        found: usize,
        k: usize,
    },
    #[error("roster has a single student; peer fractions are undefined")]
    SingletonRoster,
    #[error("dataset refers to unknown {what} {id}")]
    DanglingReference { what: &'static str, id: u32 },
    #[error("design matrix has no rows after filtering")]
    Empty,
    #[error("matrix is already absorbed")]
    AlreadyAbsorbed,
    #[error("weights length {found} does not match row count {expected}")]
    WeightLength { found: usize, expected: usize },
}

/// How students are split into baseline-score categories.
#[derive(Debug, Clone, PartialEq)]
pub enum StudentRule {
    /// Empirical K-tiles of the within-district score distribution
    /// (nearest-rank cut points, ties to the lower cell).
    WithinDistrictKtiles { k: usize },
    /// Fixed cutoffs applied uniformly; produces `len + 1` categories.
    ExplicitCutoffs(Vec<f64>),
}

/// Discretization rules for teachers and students.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySpec {
    pub teacher_cutoffs: Vec<f64>,
    pub student_rule: StudentRule,
}

impl CategorySpec {
    pub fn new(teacher_cutoffs: Vec<f64>, student_rule: StudentRule) -> Result<Self, DesignError> {
        if teacher_cutoffs.is_empty() || !teacher_cutoffs.windows(2).all(|w| w[0] < w[1]) {
            return Err(DesignError::BadCutoffs);
        }
        match &student_rule {
            StudentRule::WithinDistrictKtiles { k } if *k < 2 => {
                return Err(DesignError::BadStudentRule)
            }
            StudentRule::ExplicitCutoffs(cuts)
                if cuts.is_empty() || !cuts.windows(2).all(|w| w[0] < w[1]) =>
            {
                return Err(DesignError::BadStudentRule)
            }
            _ => {}
        }
        Ok(Self {
            teacher_cutoffs,
            student_rule,
        })
    }

    /// The preferred 3x3 specification: practice cutoffs at 2.25 and 2.75,
    /// within-district terciles for students.
    pub fn three_by_three() -> Self {
        Self {
            teacher_cutoffs: vec![2.25, 2.75],
            student_rule: StudentRule::WithinDistrictKtiles { k: 3 },
        }
    }

    pub fn n_teacher_levels(&self) -> usize {
        self.teacher_cutoffs.len() + 1
    }

    pub fn n_student_types(&self) -> usize {
        match &self.student_rule {
            StudentRule::WithinDistrictKtiles { k } => *k,
            StudentRule::ExplicitCutoffs(cuts) => cuts.len() + 1,
        }
    }
}

/// Teacher level = number of cutoffs at or below the score: a score equal
/// to a cutoff lands in the upper cell.
pub fn discretize_teachers(scores: &[f64], spec: &CategorySpec) -> Result<Vec<usize>, DesignError> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if !s.is_finite() {
                return Err(DesignError::NonFiniteScore(i));
            }
            Ok(spec.teacher_cutoffs.iter().filter(|&&c| c <= s).count())
        })
        .collect()
}

/// K-tile labels of a single score vector using nearest-rank cut points;
/// ties at a cut point go to the lower cell.
pub fn ktile_labels(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len();
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Nearest-rank quantile: the ceil(n*j/k)-th order statistic.
    let cuts: Vec<f64> = (1..k)
        .map(|j| {
            let rank = (n * j).div_ceil(k).max(1);
            sorted[rank - 1]
        })
        .collect();
    scores
        .iter()
        .map(|&s| cuts.iter().filter(|&&c| c < s).count())
        .collect()
}

/// Per-district student type labels plus the cut points actually used.
#[derive(Debug, Clone)]
pub struct StudentTypes {
    pub labels: Vec<usize>,
    /// District id -> cut points (empty for the explicit-cutoff rule).
    pub district_cuts: BTreeMap<u32, Vec<f64>>,
    /// Quantile and tie conventions, recorded for output metadata.
    pub rule_note: &'static str,
}

/// Discretize student baseline scores into types, per district when the
/// K-tile rule is used.
pub fn discretize_students(
    scores: &[f64],
    districts: &[u32],
    spec: &CategorySpec,
) -> Result<StudentTypes, DesignError> {
    assert_eq!(scores.len(), districts.len());
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(DesignError::NonFiniteScore(i));
        }
    }
    match &spec.student_rule {
        StudentRule::ExplicitCutoffs(cuts) => {
            let labels = scores
                .iter()
                .map(|&s| cuts.iter().filter(|&&c| c < s).count())
                .collect();
            Ok(StudentTypes {
                labels,
                district_cuts: BTreeMap::new(),
                rule_note: "explicit cutoffs; ties at a cutoff go to the lower cell",
            })
        }
        StudentRule::WithinDistrictKtiles { k } => {
            let mut by_district: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (i, &d) in districts.iter().enumerate() {
                by_district.entry(d).or_default().push(i);
            }
            let mut labels = vec![0usize; scores.len()];
            let mut district_cuts = BTreeMap::new();
            for (d, idxs) in by_district {
                if idxs.len() < *k {
                    return Err(DesignError::DistrictTooSmall {
                        district: d,
                        found: idxs.len(),
                        k: *k,
                    });
                }
                let district_scores: Vec<f64> = idxs.iter().map(|&i| scores[i]).collect();
                let district_labels = ktile_labels(&district_scores, *k);
                let mut sorted = district_scores.clone();
                sorted.sort_by(f64::total_cmp);
                let n = sorted.len();
                let cuts: Vec<f64> = (1..*k)
                    .map(|j| sorted[(n * j).div_ceil(*k).max(1) - 1])
                    .collect();
                district_cuts.insert(d, cuts);
                for (&i, label) in idxs.iter().zip(district_labels) {
                    labels[i] = label;
                }
            }
            Ok(StudentTypes {
                labels,
                district_cuts,
                rule_note:
                    "within-district nearest-rank K-tiles; ties at a cut point go to the lower cell",
            })
        }
    }
}

/// Leave-own-out peer type fractions for every member of one roster.
///
/// Returns, per member, the fractions of peers in categories `1..k`
/// (category 0 is the omitted reference).
pub fn peer_fractions(roster_types: &[usize], k: usize) -> Result<Vec<Vec<f64>>, DesignError> {
    let n = roster_types.len();
    if n < 2 {
        return Err(DesignError::SingletonRoster);
    }
    let mut counts = vec![0usize; k];
    for &t in roster_types {
        counts[t] += 1;
    }
    let denom = (n - 1) as f64;
    Ok(roster_types
        .iter()
        .map(|&own| {
            (1..k)
                .map(|c| {
                    let peers = counts[c] - usize::from(own == c);
                    peers as f64 / denom
                })
                .collect()
        })
        .collect())
}

/// Structural map from endogenous columns to production-function slots.
/// `None` marks a column dropped because its category cell was empty.
#[derive(Debug, Clone)]
pub struct EndogLayout {
    pub n_types: usize,
    pub n_levels: usize,
    pub include_lambda: bool,
    /// Column of the dummy for teacher level `l` (index `l - 1`).
    pub w_cols: Vec<Option<usize>>,
    /// Column of the interaction own-type `k` x level `l` at `[k-1][l-1]`.
    pub xw_cols: Vec<Vec<Option<usize>>>,
    /// Column of the interaction level `l` x peer-fraction `c` at `[l-1][c-1]`.
    pub wx_cols: Vec<Vec<Option<usize>>>,
}

/// Warnings and conventions accumulated while building a design.
#[derive(Debug, Clone, Default)]
pub struct DesignMeta {
    pub warnings: Vec<String>,
    pub dropped_students: Vec<(StudentId, String)>,
    pub dropped_columns: Vec<String>,
    pub notes: Vec<String>,
}

/// The estimator's input: outcome, endogenous block, included controls,
/// excluded instruments, and the cluster label of every row.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub y: DVector<f64>,
    pub endog: DMatrix<f64>,
    pub controls: DMatrix<f64>,
    pub instruments: DMatrix<f64>,
    pub cluster: Vec<BlockId>,
    pub students: Vec<StudentId>,
    pub endog_names: Vec<String>,
    pub control_names: Vec<String>,
    pub instrument_names: Vec<String>,
    pub layout: EndogLayout,
    /// Number of fixed-effect levels removed by absorption (0 before).
    pub absorbed_groups: usize,
    pub meta: DesignMeta,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    /// A plain regression (no endogenous block, no instruments): used by the
    /// diagnostic tests so they share the estimator code path.
    pub fn regression(
        y: DVector<f64>,
        x: DMatrix<f64>,
        names: Vec<String>,
        cluster: Vec<BlockId>,
        students: Vec<StudentId>,
    ) -> Self {
        let n = y.len();
        DesignMatrix {
            y,
            endog: DMatrix::zeros(n, 0),
            controls: x,
            instruments: DMatrix::zeros(n, 0),
            cluster,
            students,
            endog_names: vec![],
            control_names: names,
            instrument_names: vec![],
            layout: EndogLayout {
                n_types: 0,
                n_levels: 0,
                include_lambda: false,
                w_cols: vec![],
                xw_cols: vec![],
                wx_cols: vec![],
            },
            absorbed_groups: 0,
            meta: DesignMeta::default(),
        }
    }
}

/// Per-student derived quantities shared by the design matrix and the
/// counterfactual predictor.
#[derive(Debug, Clone)]
pub struct StudentDerived {
    pub student: StudentId,
    pub row: usize,
    pub block: BlockId,
    pub own_type: usize,
    pub realized_level: usize,
    pub assigned_level: usize,
    pub realized_peers: Vec<f64>,
    pub assigned_peers: Vec<f64>,
    pub realized_section: SectionId,
    pub realized_teacher: TeacherId,
    pub outcome: f64,
}

/// Discretizations and rosters resolved against a dataset; the common
/// precursor of [`build_design`] and counterfactual prediction.
pub struct DerivedData {
    pub rows: Vec<StudentDerived>,
    pub types: StudentTypes,
    pub teacher_levels: HashMap<TeacherId, usize>,
    pub n_types: usize,
    pub n_levels: usize,
    pub meta: DesignMeta,
}

/// Resolve rosters, types, levels, and peer fractions for every usable
/// student row. Students in singleton assigned or realized rosters are
/// dropped with a warning.
pub fn derive(data: &VisibleDataset, spec: &CategorySpec) -> Result<DerivedData, DesignError> {
    let mut meta = DesignMeta::default();
    let k = spec.n_student_types();
    let l = spec.n_teacher_levels();

    let students: Vec<_> = data.students().collect();
    let scores: Vec<f64> = students.iter().map(|s| s.baseline).collect();
    let districts: Vec<u32> = students.iter().map(|s| s.district.0).collect();
    let types = discretize_students(&scores, &districts, spec)?;
    meta.notes
        .push(format!("student rule: {}", types.rule_note));
    meta.notes
        .push("teacher rule: score equal to a cutoff goes to the upper cell".into());

    let teachers: Vec<_> = data.teachers().collect();
    let teacher_scores: Vec<f64> = teachers.iter().map(|t| t.practice).collect();
    let levels = discretize_teachers(&teacher_scores, spec)?;
    let teacher_levels: HashMap<TeacherId, usize> = teachers
        .iter()
        .zip(&levels)
        .map(|(t, &lv)| (t.id, lv))
        .collect();

    let section_by_id: HashMap<SectionId, &crate::synth::Section> =
        data.sections().iter().map(|s| (s.id, s)).collect();

    let mut assigned_rosters: HashMap<SectionId, Vec<usize>> = HashMap::new();
    let mut realized_rosters: HashMap<SectionId, Vec<usize>> = HashMap::new();
    for (i, s) in students.iter().enumerate() {
        assigned_rosters
            .entry(s.assigned_section)
            .or_default()
            .push(i);
        realized_rosters
            .entry(s.realized_section)
            .or_default()
            .push(i);
    }

    let peer_vector = |roster: &[usize], me: usize| -> Option<Vec<f64>> {
        if roster.len() < 2 {
            return None;
        }
        let mut counts = vec![0usize; k];
        for &j in roster {
            counts[types.labels[j]] += 1;
        }
        counts[types.labels[me]] -= 1;
        let denom = (roster.len() - 1) as f64;
        Some((1..k).map(|c| counts[c] as f64 / denom).collect())
    };

    let mut rows = Vec::with_capacity(students.len());
    for (i, s) in students.iter().enumerate() {
        let assigned_sec =
            section_by_id
                .get(&s.assigned_section)
                .ok_or(DesignError::DanglingReference {
                    what: "section",
                    id: s.assigned_section.0,
                })?;
        let realized_sec =
            section_by_id
                .get(&s.realized_section)
                .ok_or(DesignError::DanglingReference {
                    what: "section",
                    id: s.realized_section.0,
                })?;
        let assigned_level = *teacher_levels.get(&assigned_sec.assigned_teacher).ok_or(
            DesignError::DanglingReference {
                what: "teacher",
                id: assigned_sec.assigned_teacher.0,
            },
        )?;
        let realized_level = *teacher_levels.get(&realized_sec.realized_teacher).ok_or(
            DesignError::DanglingReference {
                what: "teacher",
                id: realized_sec.realized_teacher.0,
            },
        )?;
        let assigned_peers = peer_vector(&assigned_rosters[&s.assigned_section], i);
        let realized_peers = peer_vector(&realized_rosters[&s.realized_section], i);
        match (assigned_peers, realized_peers) {
            (Some(assigned_peers), Some(realized_peers)) => rows.push(StudentDerived {
                student: s.id,
                row: i,
                block: s.block,
                own_type: types.labels[i],
                realized_level,
                assigned_level,
                realized_peers,
                assigned_peers,
                realized_section: s.realized_section,
                realized_teacher: realized_sec.realized_teacher,
                outcome: s.outcome,
            }),
            _ => meta
                .dropped_students
                .push((s.id, "singleton assigned or realized roster".into())),
        }
    }
    if !meta.dropped_students.is_empty() {
        meta.warnings.push(format!(
            "dropped {} student(s) in singleton rosters",
            meta.dropped_students.len()
        ));
    }
    if rows.is_empty() {
        return Err(DesignError::Empty);
    }
    Ok(DerivedData {
        rows,
        types,
        teacher_levels,
        n_types: k,
        n_levels: l,
        meta,
    })
}

/// Assemble the partially linear IV design.
///
/// The endogenous block uses realized teacher levels and realized peer
/// fractions; the controls approximate the nonparametric component with
/// assigned peer fractions; the excluded instruments are the assigned
/// counterparts of the endogenous columns. With `include_lambda = false`
/// the teacher-by-peer interaction columns and their instruments are
/// omitted.
pub fn build_design(
    data: &VisibleDataset,
    spec: &CategorySpec,
    include_lambda: bool,
) -> Result<DesignMatrix, DesignError> {
    let derived = derive(data, spec)?;
    Ok(build_design_from_derived(&derived, include_lambda))
}

pub fn build_design_from_derived(derived: &DerivedData, include_lambda: bool) -> DesignMatrix {
    let k = derived.n_types;
    let l = derived.n_levels;
    let n = derived.rows.len();
    let mut meta = derived.meta.clone();

    // Endogenous block and matching instruments, column by column.
    let mut endog_cols: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for lv in 1..l {
        let name = format!("W{lv}");
        let realized: Vec<f64> = derived
            .rows
            .iter()
            .map(|r| f64::from(u8::from(r.realized_level == lv)))
            .collect();
        let assigned: Vec<f64> = derived
            .rows
            .iter()
            .map(|r| f64::from(u8::from(r.assigned_level == lv)))
            .collect();
        endog_cols.push((name, realized, assigned));
    }
    for ty in 1..k {
        for lv in 1..l {
            let name = format!("X{ty}xW{lv}");
            let realized: Vec<f64> = derived
                .rows
                .iter()
                .map(|r| f64::from(u8::from(r.own_type == ty && r.realized_level == lv)))
                .collect();
            let assigned: Vec<f64> = derived
                .rows
                .iter()
                .map(|r| f64::from(u8::from(r.own_type == ty && r.assigned_level == lv)))
                .collect();
            endog_cols.push((name, realized, assigned));
        }
    }
    if include_lambda {
        for lv in 1..l {
            for c in 1..k {
                let name = format!("W{lv}xXbar{c}");
                let realized: Vec<f64> = derived
                    .rows
                    .iter()
                    .map(|r| {
                        if r.realized_level == lv {
                            r.realized_peers[c - 1]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let assigned: Vec<f64> = derived
                    .rows
                    .iter()
                    .map(|r| {
                        if r.assigned_level == lv {
                            r.assigned_peers[c - 1]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                endog_cols.push((name, realized, assigned));
            }
        }
    }

    // Drop structurally empty cells: a column whose realized or assigned
    // version is identically zero cannot be identified; both sides go, so
    // instrument and endogenous counts stay equal.
    let mut kept: Vec<usize> = Vec::new();
    for (idx, (name, realized, assigned)) in endog_cols.iter().enumerate() {
        let empty = realized.iter().all(|&v| v == 0.0) || assigned.iter().all(|&v| v == 0.0);
        if empty {
            meta.dropped_columns.push(name.clone());
            meta.warnings
                .push(format!("column {name} dropped: empty category cell"));
        } else {
            kept.push(idx);
        }
    }

    let mut layout = EndogLayout {
        n_types: k,
        n_levels: l,
        include_lambda,
        w_cols: vec![None; l - 1],
        xw_cols: vec![vec![None; l - 1]; k - 1],
        wx_cols: if include_lambda {
            vec![vec![None; k - 1]; l - 1]
        } else {
            vec![]
        },
    };
    for (pos, &idx) in kept.iter().enumerate() {
        // Reconstruct the structural slot from the build order above.
        if idx < l - 1 {
            layout.w_cols[idx] = Some(pos);
        } else if idx < (l - 1) + (k - 1) * (l - 1) {
            let r = idx - (l - 1);
            layout.xw_cols[r / (l - 1)][r % (l - 1)] = Some(pos);
        } else {
            let r = idx - (l - 1) - (k - 1) * (l - 1);
            layout.wx_cols[r / (k - 1)][r % (k - 1)] = Some(pos);
        }
    }

    let endog = DMatrix::from_fn(n, kept.len(), |i, j| endog_cols[kept[j]].1[i]);
    let instruments = DMatrix::from_fn(n, kept.len(), |i, j| endog_cols[kept[j]].2[i]);
    let endog_names: Vec<String> = kept.iter().map(|&i| endog_cols[i].0.clone()).collect();
    let instrument_names: Vec<String> = kept
        .iter()
        .map(|&i| format!("{}*", endog_cols[i].0))
        .collect();

    // Controls: intercept, own-type dummies, assigned peer fractions, and
    // their interactions.
    let mut control_cols: Vec<(String, Vec<f64>)> = Vec::new();
    control_cols.push(("const".into(), vec![1.0; n]));
    for ty in 1..k {
        control_cols.push((
            format!("X{ty}"),
            derived
                .rows
                .iter()
                .map(|r| f64::from(u8::from(r.own_type == ty)))
                .collect(),
        ));
    }
    for c in 1..k {
        control_cols.push((
            format!("Xbar{c}*"),
            derived
                .rows
                .iter()
                .map(|r| r.assigned_peers[c - 1])
                .collect(),
        ));
    }
    for ty in 1..k {
        for c in 1..k {
            control_cols.push((
                format!("X{ty}xXbar{c}*"),
                derived
                    .rows
                    .iter()
                    .map(|r| {
                        if r.own_type == ty {
                            r.assigned_peers[c - 1]
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ));
        }
    }
    control_cols.retain(|(name, col)| {
        if name != "const" && col.iter().all(|&v| v == 0.0) {
            meta.dropped_columns.push(name.clone());
            meta.warnings
                .push(format!("control {name} dropped: empty category cell"));
            false
        } else {
            true
        }
    });

    let controls = DMatrix::from_fn(n, control_cols.len(), |i, j| control_cols[j].1[i]);
    let control_names: Vec<String> = control_cols.iter().map(|(nm, _)| nm.clone()).collect();

    DesignMatrix {
        y: DVector::from_iterator(n, derived.rows.iter().map(|r| r.outcome)),
        endog,
        controls,
        instruments,
        cluster: derived.rows.iter().map(|r| r.block).collect(),
        students: derived.rows.iter().map(|r| r.student).collect(),
        endog_names,
        control_names,
        instrument_names,
        layout,
        absorbed_groups: 0,
        meta,
    }
}

/// Absorb block fixed effects by within-block demeaning of every column
/// (outcome, endogenous, controls, instruments). Blocks with a single row
/// are dropped with a warning; the intercept column vanishes and is
/// removed.
pub fn absorb_blocks(matrix: &DesignMatrix) -> Result<DesignMatrix, DesignError> {
    let weights = vec![1.0; matrix.n_rows()];
    absorb_blocks_weighted(matrix, &weights)
}

/// Weighted absorption: demeans with weighted block means and scales each
/// row by the square root of its weight, so a plain least-squares fit of
/// the result is the weighted fixed-effects fit. Unit weights reduce to
/// [`absorb_blocks`] exactly.
pub fn absorb_blocks_weighted(
    matrix: &DesignMatrix,
    weights: &[f64],
) -> Result<DesignMatrix, DesignError> {
    if matrix.absorbed_groups > 0 {
        return Err(DesignError::AlreadyAbsorbed);
    }
    if weights.len() != matrix.n_rows() {
        return Err(DesignError::WeightLength {
            found: weights.len(),
            expected: matrix.n_rows(),
        });
    }
    let mut meta = matrix.meta.clone();

    let mut block_rows: BTreeMap<BlockId, Vec<usize>> = BTreeMap::new();
    for (i, &b) in matrix.cluster.iter().enumerate() {
        block_rows.entry(b).or_default().push(i);
    }
    let mut keep: Vec<usize> = Vec::with_capacity(matrix.n_rows());
    let mut dropped_blocks = 0usize;
    for rows in block_rows.values() {
        if rows.len() < 2 {
            dropped_blocks += 1;
        } else {
            keep.extend_from_slice(rows);
        }
    }
    keep.sort_unstable();
    if dropped_blocks > 0 {
        meta.warnings.push(format!(
            "dropped {dropped_blocks} block(s) with a single row during absorption"
        ));
    }
    if keep.is_empty() {
        return Err(DesignError::Empty);
    }

    let absorbed_groups = block_rows.len() - dropped_blocks;

    // Gather kept rows.
    let select = |m: &DMatrix<f64>| -> DMatrix<f64> {
        DMatrix::from_fn(keep.len(), m.ncols(), |i, j| m[(keep[i], j)])
    };
    let mut endog = select(&matrix.endog);
    let mut controls = select(&matrix.controls);
    let mut instruments = select(&matrix.instruments);
    let cluster: Vec<BlockId> = keep.iter().map(|&i| matrix.cluster[i]).collect();
    let students: Vec<StudentId> = keep.iter().map(|&i| matrix.students[i]).collect();
    let w: Vec<f64> = keep.iter().map(|&i| weights[i]).collect();

    let mut groups: BTreeMap<BlockId, Vec<usize>> = BTreeMap::new();
    for (i, &b) in cluster.iter().enumerate() {
        groups.entry(b).or_default().push(i);
    }

    let demean = |col: &mut [f64]| {
        for rows in groups.values() {
            let wsum: f64 = rows.iter().map(|&i| w[i]).sum();
            if wsum <= 0.0 {
                continue;
            }
            let mean: f64 = rows.iter().map(|&i| w[i] * col[i]).sum::<f64>() / wsum;
            for &i in rows {
                col[i] -= mean;
            }
        }
    };

    let mut y_col: Vec<f64> = keep.iter().map(|&i| matrix.y[i]).collect();
    demean(&mut y_col);
    for m in [&mut endog, &mut controls, &mut instruments] {
        for j in 0..m.ncols() {
            let mut col: Vec<f64> = m.column(j).iter().copied().collect();
            demean(&mut col);
            for (i, v) in col.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
    }

    // Scale rows by sqrt(weight).
    let sw: Vec<f64> = w.iter().map(|&x| x.sqrt()).collect();
    for (i, &s) in sw.iter().enumerate() {
        y_col[i] *= s;
        for j in 0..endog.ncols() {
            endog[(i, j)] *= s;
        }
        for j in 0..controls.ncols() {
            controls[(i, j)] *= s;
        }
        for j in 0..instruments.ncols() {
            instruments[(i, j)] *= s;
        }
    }
    let y = DVector::from_vec(y_col);

    // The intercept is absorbed; drop it (it is now identically zero).
    let mut control_names = matrix.control_names.clone();
    if let Some(pos) = control_names.iter().position(|nm| nm == "const") {
        control_names.remove(pos);
        controls = controls.remove_column(pos);
        meta.notes
            .push("intercept absorbed into block effects".into());
    }

    Ok(DesignMatrix {
        y,
        endog,
        controls,
        instruments,
        cluster,
        students,
        endog_names: matrix.endog_names.clone(),
        control_names,
        instrument_names: matrix.instrument_names.clone(),
        layout: matrix.layout.clone(),
        absorbed_groups,
        meta,
    })
}

/// Alternative to absorption: append explicit block dummy columns (first
/// block omitted) to the controls. Used as an oracle to validate the
/// absorbed path.
pub fn with_block_dummies(matrix: &DesignMatrix) -> Result<DesignMatrix, DesignError> {
    if matrix.absorbed_groups > 0 {
        return Err(DesignError::AlreadyAbsorbed);
    }
    let mut blocks: Vec<BlockId> = matrix.cluster.clone();
    blocks.sort_unstable();
    blocks.dedup();
    let n = matrix.n_rows();
    let extra = blocks.len().saturating_sub(1);
    let mut controls = matrix
        .controls
        .clone()
        .resize_horizontally(matrix.controls.ncols() + extra, 0.0);
    let mut control_names = matrix.control_names.clone();
    for (j, &b) in blocks.iter().skip(1).enumerate() {
        let col = matrix.controls.ncols() + j;
        for i in 0..n {
            if matrix.cluster[i] == b {
                controls[(i, col)] = 1.0;
            }
        }
        control_names.push(format!("block{}", b.0));
    }
    let mut out = matrix.clone();
    out.controls = controls;
    out.control_names = control_names;
    Ok(out)
}

/// Write a design matrix as one wide comma-separated table, for
/// cross-checking against external statistical software.
pub fn dump_design(matrix: &DesignMatrix, path: &std::path::Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = vec![
        "student_id".to_string(),
        "block".to_string(),
        "y".to_string(),
    ];
    header.extend(matrix.endog_names.iter().cloned());
    header.extend(matrix.control_names.iter().cloned());
    header.extend(matrix.instrument_names.iter().cloned());
    writeln!(f, "{}", header.join(","))?;
    for i in 0..matrix.n_rows() {
        let mut row = vec![
            matrix.students[i].0.to_string(),
            matrix.cluster[i].0.to_string(),
            matrix.y[i].to_string(),
        ];
        for j in 0..matrix.endog.ncols() {
            row.push(matrix.endog[(i, j)].to_string());
        }
        for j in 0..matrix.controls.ncols() {
            row.push(matrix.controls[(i, j)].to_string());
        }
        for j in 0..matrix.instruments.ncols() {
            row.push(matrix.instruments[(i, j)].to_string());
        }
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}
