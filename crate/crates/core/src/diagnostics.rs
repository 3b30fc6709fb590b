//! Testable checks on the experiment as implemented.
//!
//! Four regression-based diagnostics, each a fixed-effects OLS fit plus a
//! cluster-robust joint Wald test: randomization balance of the assigned
//! teacher's practice score, indirect tests of idiosyncratic teacher and
//! peer deviations (realized-minus-assigned auxiliary attributes), and the
//! direct test that assigned teacher quality does not predict realized
//! peer baseline scores. All four go through [`crate::estimator::ols_fit`]
//! and [`crate::estimator::wald_joint`]; none can read latent columns.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::design::{self, DesignMatrix};
use crate::estimator::{self, EstimatorError};
use crate::synth::{BlockId, StudentId, TeacherRecord, VisibleDataset};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error(transparent)]
    Design(#[from] design::DesignError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("no usable rows for test {0}")]
    NoRows(String),
}

/// Student covariates available to the diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentAttr {
    Baseline,
    Aux1,
    Aux2,
}

impl StudentAttr {
    pub const ALL: [StudentAttr; 3] = [StudentAttr::Baseline, StudentAttr::Aux1, StudentAttr::Aux2];

    fn name(&self) -> &'static str {
        match self {
            StudentAttr::Baseline => "baseline",
            StudentAttr::Aux1 => "student_aux1",
            StudentAttr::Aux2 => "student_aux2",
        }
    }

    fn value(&self, s: &crate::synth::StudentRecord) -> f64 {
        match self {
            StudentAttr::Baseline => s.baseline,
            StudentAttr::Aux1 => s.aux1,
            StudentAttr::Aux2 => s.aux2,
        }
    }
}

/// Teacher auxiliary attributes; `Aux2` may be missing per teacher, in
/// which case affected rows are dropped for that attribute's test only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherAttr {
    Aux1,
    Aux2,
    Aux3,
}

impl TeacherAttr {
    pub const ALL: [TeacherAttr; 3] = [TeacherAttr::Aux1, TeacherAttr::Aux2, TeacherAttr::Aux3];

    fn name(&self) -> &'static str {
        match self {
            TeacherAttr::Aux1 => "teacher_aux1",
            TeacherAttr::Aux2 => "teacher_aux2",
            TeacherAttr::Aux3 => "teacher_aux3",
        }
    }

    fn value(&self, t: &TeacherRecord) -> Option<f64> {
        match self {
            TeacherAttr::Aux1 => Some(t.aux1),
            TeacherAttr::Aux2 => t.aux2,
            TeacherAttr::Aux3 => Some(t.aux3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    /// Joint test does not reject at the configured level.
    Pass,
    Reject,
    /// Dependent variable (or residual) is identically zero; the test is
    /// uninformative.
    Degenerate,
    Skipped(String),
}

#[derive(Debug, Clone)]
pub struct CoefLine {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone)]
pub struct DiagnosticReport {
    pub test: String,
    pub dependent: String,
    /// Names of the jointly tested regressors.
    pub tested: Vec<String>,
    pub coefficients: Vec<CoefLine>,
    pub f: f64,
    pub p: f64,
    pub df: (usize, usize),
    pub n: usize,
    pub level: f64,
    pub verdict: Verdict,
}

impl DiagnosticReport {
    fn skipped(test: &str, dependent: &str, level: f64, reason: String) -> Self {
        DiagnosticReport {
            test: test.into(),
            dependent: dependent.into(),
            tested: vec![],
            coefficients: vec![],
            f: f64::NAN,
            p: f64::NAN,
            df: (0, 0),
            n: 0,
            level,
            verdict: Verdict::Skipped(reason),
        }
    }
}

/// One usable student row: indices refer to the full student list, so any
/// per-attribute value vector built over all students can serve the peer
/// means regardless of which rows were kept.
struct Row<'a> {
    /// Index into the full student list.
    idx: usize,
    block: BlockId,
    assigned_teacher: &'a TeacherRecord,
    realized_teacher: &'a TeacherRecord,
    assigned_peers: Vec<usize>,
    realized_peers: Vec<usize>,
}

/// Per-student context shared by the four tests.
struct Context<'a> {
    all_students: Vec<&'a crate::synth::StudentRecord>,
    rows: Vec<Row<'a>>,
}

impl<'a> Context<'a> {
    fn student(&self, row: &Row<'a>) -> &'a crate::synth::StudentRecord {
        self.all_students[row.idx]
    }

    fn values(&self, attr: StudentAttr) -> Vec<f64> {
        self.all_students.iter().map(|s| attr.value(s)).collect()
    }
}

fn build_context<'a>(data: &VisibleDataset<'a>) -> Result<Context<'a>, DiagError> {
    use std::collections::HashMap;
    let all_students: Vec<_> = data.students().collect();
    let teacher_by_id: HashMap<_, &TeacherRecord> = data.teachers().map(|t| (t.id, t)).collect();
    let section_by_id: HashMap<_, _> = data.sections().iter().map(|s| (s.id, s)).collect();

    let mut assigned_roster: HashMap<_, Vec<usize>> = HashMap::new();
    let mut realized_roster: HashMap<_, Vec<usize>> = HashMap::new();
    for (i, s) in all_students.iter().enumerate() {
        assigned_roster
            .entry(s.assigned_section)
            .or_default()
            .push(i);
        realized_roster
            .entry(s.realized_section)
            .or_default()
            .push(i);
    }

    let mut rows = Vec::new();
    for (i, s) in all_students.iter().enumerate() {
        let (Some(asec), Some(rsec)) = (
            section_by_id.get(&s.assigned_section),
            section_by_id.get(&s.realized_section),
        ) else {
            continue;
        };
        let (Some(at), Some(rt)) = (
            teacher_by_id.get(&asec.assigned_teacher),
            teacher_by_id.get(&rsec.realized_teacher),
        ) else {
            continue;
        };
        let apeers: Vec<usize> = assigned_roster[&s.assigned_section]
            .iter()
            .copied()
            .filter(|&j| j != i)
            .collect();
        let rpeers: Vec<usize> = realized_roster[&s.realized_section]
            .iter()
            .copied()
            .filter(|&j| j != i)
            .collect();
        if apeers.is_empty() || rpeers.is_empty() {
            continue;
        }
        rows.push(Row {
            idx: i,
            block: s.block,
            assigned_teacher: at,
            realized_teacher: rt,
            assigned_peers: apeers,
            realized_peers: rpeers,
        });
    }
    if rows.is_empty() {
        return Err(DiagError::NoRows("context".into()));
    }
    Ok(Context { all_students, rows })
}

fn peer_mean(values: &[f64], peers: &[usize]) -> f64 {
    peers.iter().map(|&j| values[j]).sum::<f64>() / peers.len() as f64
}

struct RegressionSpec {
    test: String,
    dependent: String,
    y: Vec<f64>,
    /// (name, column, part of the joint test).
    columns: Vec<(String, Vec<f64>, bool)>,
    cluster: Vec<BlockId>,
}

/// Shared path: absorb block effects, drop within-block-constant columns
/// with a warning, fit by OLS, and run the joint Wald test on the tested
/// columns.
fn run_regression(spec: RegressionSpec, level: f64) -> Result<DiagnosticReport, DiagError> {
    let n = spec.y.len();
    if n == 0 {
        return Err(DiagError::NoRows(spec.test));
    }
    // Degenerate dependent variable: nothing to test.
    let yscale = spec.y.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if yscale < 1e-12 {
        return Ok(DiagnosticReport {
            test: spec.test,
            dependent: spec.dependent,
            tested: spec
                .columns
                .iter()
                .filter(|c| c.2)
                .map(|c| c.0.clone())
                .collect(),
            coefficients: vec![],
            f: 0.0,
            p: 1.0,
            df: (0, 0),
            n,
            level,
            verdict: Verdict::Degenerate,
        });
    }

    let mut x = DMatrix::zeros(n, spec.columns.len() + 1);
    let mut names = vec!["const".to_string()];
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    for (j, (name, col, _)) in spec.columns.iter().enumerate() {
        for i in 0..n {
            x[(i, j + 1)] = col[i];
        }
        names.push(name.clone());
    }
    let matrix = DesignMatrix::regression(
        DVector::from_vec(spec.y),
        x,
        names,
        spec.cluster,
        (0..n as u32).map(StudentId).collect(),
    );
    let mut absorbed = design::absorb_blocks(&matrix)?;

    // Columns constant within every block are absorbed to zero; drop them.
    let mut dropped: Vec<String> = Vec::new();
    let mut keep: Vec<usize> = Vec::new();
    for j in 0..absorbed.controls.ncols() {
        let max = absorbed
            .controls
            .column(j)
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        if max < 1e-10 {
            dropped.push(absorbed.control_names[j].clone());
        } else {
            keep.push(j);
        }
    }
    if !dropped.is_empty() {
        absorbed.meta.warnings.push(format!(
            "dropped within-block-constant regressors: {}",
            dropped.join(", ")
        ));
        let kept = DMatrix::from_fn(absorbed.n_rows(), keep.len(), |i, j| {
            absorbed.controls[(i, keep[j])]
        });
        absorbed.control_names = keep
            .iter()
            .map(|&j| absorbed.control_names[j].clone())
            .collect();
        absorbed.controls = kept;
    }

    let tested: Vec<String> = spec
        .columns
        .iter()
        .filter(|(name, _, t)| *t && !dropped.contains(name))
        .map(|(name, _, _)| name.clone())
        .collect();
    if tested.is_empty() {
        return Ok(DiagnosticReport {
            test: spec.test,
            dependent: spec.dependent,
            tested: vec![],
            coefficients: vec![],
            f: f64::NAN,
            p: f64::NAN,
            df: (0, 0),
            n,
            level,
            verdict: Verdict::Skipped("all tested regressors constant within blocks".into()),
        });
    }

    let fit = estimator::ols_fit(&absorbed)?;
    let coefficients: Vec<CoefLine> = absorbed
        .control_names
        .iter()
        .enumerate()
        .map(|(i, name)| CoefLine {
            name: name.clone(),
            estimate: fit.coefficients[i],
            se: fit.se(i),
        })
        .collect();

    let tested_refs: Vec<&str> = tested.iter().map(String::as_str).collect();
    let (f, p, df, verdict) = match estimator::wald_joint(&fit, &tested_refs) {
        Ok(w) => {
            let verdict = if w.p < level {
                Verdict::Reject
            } else {
                Verdict::Pass
            };
            (w.f, w.p, w.df, verdict)
        }
        // A singular Wald submatrix comes from an (all but) exact fit:
        // flag it instead of failing the whole run.
        Err(EstimatorError::SingularSubmatrix) => (f64::NAN, f64::NAN, (0, 0), Verdict::Degenerate),
        Err(e) => return Err(e.into()),
    };

    Ok(DiagnosticReport {
        test: spec.test,
        dependent: spec.dependent,
        tested,
        coefficients,
        f,
        p,
        df,
        n: absorbed.n_rows(),
        level,
        verdict,
    })
}

/// Randomization balance: regress the assigned teacher's practice score on
/// student covariates (plus block effects) and test them jointly.
pub fn balance_test(
    data: &VisibleDataset,
    covariates: &[StudentAttr],
    level: f64,
) -> Result<DiagnosticReport, DiagError> {
    let ctx = build_context(data)?;
    let y: Vec<f64> = ctx
        .rows
        .iter()
        .map(|r| r.assigned_teacher.practice)
        .collect();
    let columns: Vec<(String, Vec<f64>, bool)> = covariates
        .iter()
        .map(|attr| {
            (
                attr.name().to_string(),
                ctx.rows
                    .iter()
                    .map(|r| attr.value(ctx.student(r)))
                    .collect(),
                true,
            )
        })
        .collect();
    run_regression(
        RegressionSpec {
            test: "balance".into(),
            dependent: "assigned_teacher_practice".into(),
            y,
            columns,
            cluster: ctx.rows.iter().map(|r| r.block).collect(),
        },
        level,
    )
}

/// Indirect test of idiosyncratic teacher deviations: for each auxiliary
/// teacher attribute, regress its realized-minus-assigned difference on
/// own baseline, assigned teacher practice, and assigned peer mean
/// baseline; all three are tested jointly. Rows with a missing attribute
/// are dropped per attribute, and an attribute with no usable rows is
/// reported as skipped.
pub fn assumption1_test(
    data: &VisibleDataset,
    attrs: &[TeacherAttr],
    level: f64,
) -> Result<Vec<DiagnosticReport>, DiagError> {
    let ctx = build_context(data)?;
    let baseline_all = ctx.values(StudentAttr::Baseline);
    let mut reports = Vec::new();
    for attr in attrs {
        let mut y = Vec::new();
        let mut own = Vec::new();
        let mut practice = Vec::new();
        let mut peers = Vec::new();
        let mut cluster = Vec::new();
        for row in &ctx.rows {
            let (Some(real), Some(assn)) = (
                attr.value(row.realized_teacher),
                attr.value(row.assigned_teacher),
            ) else {
                continue;
            };
            y.push(real - assn);
            own.push(ctx.student(row).baseline);
            practice.push(row.assigned_teacher.practice);
            peers.push(peer_mean(&baseline_all, &row.assigned_peers));
            cluster.push(row.block);
        }
        let dependent = format!("d_{}", attr.name());
        if y.is_empty() {
            reports.push(DiagnosticReport::skipped(
                "assumption1",
                &dependent,
                level,
                format!("attribute {} missing everywhere", attr.name()),
            ));
            continue;
        }
        reports.push(run_regression(
            RegressionSpec {
                test: "assumption1".into(),
                dependent,
                y,
                columns: vec![
                    ("baseline".into(), own, true),
                    ("assigned_practice".into(), practice, true),
                    ("assigned_peer_baseline".into(), peers, true),
                ],
                cluster,
            },
            level,
        )?);
    }
    Ok(reports)
}

/// Indirect test of conditionally idiosyncratic peer deviations: for each
/// student attribute, regress the realized-minus-assigned leave-own-out
/// peer mean on the assigned teacher's practice score (tested), controlling
/// for own baseline and the assigned peer mean of baseline.
pub fn assumption2_test(
    data: &VisibleDataset,
    attrs: &[StudentAttr],
    level: f64,
) -> Result<Vec<DiagnosticReport>, DiagError> {
    let ctx = build_context(data)?;
    let baseline_all = ctx.values(StudentAttr::Baseline);
    let mut reports = Vec::new();
    for attr in attrs {
        let values_all = ctx.values(*attr);
        let mut y = Vec::new();
        let mut own = Vec::new();
        let mut practice = Vec::new();
        let mut peers = Vec::new();
        let mut cluster = Vec::new();
        for row in &ctx.rows {
            let realized = peer_mean(&values_all, &row.realized_peers);
            let assigned = peer_mean(&values_all, &row.assigned_peers);
            y.push(realized - assigned);
            own.push(ctx.student(row).baseline);
            practice.push(row.assigned_teacher.practice);
            peers.push(peer_mean(&baseline_all, &row.assigned_peers));
            cluster.push(row.block);
        }
        reports.push(run_regression(
            RegressionSpec {
                test: "assumption2".into(),
                dependent: format!("d_peer_{}", attr.name()),
                y,
                columns: vec![
                    ("assigned_practice".into(), practice, true),
                    ("baseline".into(), own, false),
                    ("assigned_peer_baseline".into(), peers, false),
                ],
                cluster,
            },
            level,
        )?);
    }
    Ok(reports)
}

/// Direct test of the observable peer restriction: the assigned teacher's
/// practice score must not predict realized peer baseline scores once own
/// baseline and assigned peer baseline are controlled for.
pub fn restriction_test(data: &VisibleDataset, level: f64) -> Result<DiagnosticReport, DiagError> {
    let ctx = build_context(data)?;
    let baseline_all = ctx.values(StudentAttr::Baseline);
    let mut y = Vec::new();
    let mut own = Vec::new();
    let mut practice = Vec::new();
    let mut peers = Vec::new();
    let mut cluster = Vec::new();
    for row in &ctx.rows {
        y.push(peer_mean(&baseline_all, &row.realized_peers));
        own.push(ctx.student(row).baseline);
        practice.push(row.assigned_teacher.practice);
        peers.push(peer_mean(&baseline_all, &row.assigned_peers));
        cluster.push(row.block);
    }
    run_regression(
        RegressionSpec {
            test: "restriction".into(),
            dependent: "realized_peer_baseline".into(),
            y,
            columns: vec![
                ("assigned_practice".into(), practice, true),
                ("baseline".into(), own, false),
                ("assigned_peer_baseline".into(), peers, false),
            ],
            cluster,
        },
        level,
    )
}

/// Run all four diagnostics with the default attribute sets.
pub fn run_all(data: &VisibleDataset, level: f64) -> Result<Vec<DiagnosticReport>, DiagError> {
    let mut reports = vec![balance_test(
        data,
        &[StudentAttr::Baseline, StudentAttr::Aux1, StudentAttr::Aux2],
        level,
    )?];
    reports.extend(assumption1_test(data, &TeacherAttr::ALL, level)?);
    reports.extend(assumption2_test(
        data,
        &[StudentAttr::Baseline, StudentAttr::Aux1, StudentAttr::Aux2],
        level,
    )?);
    reports.push(restriction_test(data, level)?);
    Ok(reports)
}
