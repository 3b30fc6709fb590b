//! Linear OLS and two-stage least squares with cluster-robust inference.
//!
//! Fits operate on a [`DesignMatrix`]: the regressor matrix is
//! `[endogenous | controls]`, the instrument matrix `[excluded | controls]`.
//! Solves go through the singular value decomposition rather than normal
//! equations; block-dummy designs are too ill-conditioned for the latter.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use thiserror::Error;

use crate::design::{DesignMatrix, EndogLayout};
use crate::synth::BlockId;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("design is rank deficient; near-collinear columns: {0:?}")]
    RankDeficient(Vec<String>),
    #[error("first stage is rank deficient for endogenous column {0}")]
    WeakFirstStage(String),
    #[error("fewer rows ({rows}) than regressors ({cols})")]
    TooFewRows { rows: usize, cols: usize },
    #[error("instrument count {instruments} is below the endogenous count {endogenous}")]
    UnderIdentified {
        instruments: usize,
        endogenous: usize,
    },
    #[error("cluster covariance requires at least 2 clusters, found {0}")]
    SingleCluster(usize),
    #[error("coefficient subset is empty")]
    EmptySubset,
    #[error("unknown coefficient `{0}`")]
    UnknownCoefficient(String),
    #[error("Wald submatrix is singular")]
    SingularSubmatrix,
    #[error("distribution parameters invalid: {0}")]
    Distribution(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ols,
    Tsls,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Ols => write!(f, "OLS"),
            Method::Tsls => write!(f, "2SLS"),
        }
    }
}

/// A fitted equation with cluster-robust covariance.
///
/// Coefficients are ordered endogenous block first, then controls. The
/// covariance uses the sandwich estimator with cluster-summed scores and
/// the small-sample factor `G/(G-1) * (N-1)/(N-k)`, where `k` counts both
/// the fitted columns and any absorbed fixed-effect levels. Wald tests use
/// `G - 1` denominator degrees of freedom. R-squared is computed on the
/// (possibly within-transformed) outcome actually fitted.
#[derive(Debug, Clone)]
pub struct IVEstimate {
    pub names: Vec<String>,
    pub coefficients: DVector<f64>,
    pub vcov: DMatrix<f64>,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub r_squared: f64,
    pub method: Method,
    pub n_endog: usize,
    pub layout: EndogLayout,
    residuals: DVector<f64>,
    scores: DMatrix<f64>,
    dof_k: usize,
}

impl IVEstimate {
    /// Wrap externally supplied coefficients (reported estimates, test
    /// values) so they can drive counterfactual predictions. Carries no
    /// covariance or fit diagnostics.
    pub fn from_coefficients(
        names: Vec<String>,
        coefficients: Vec<f64>,
        layout: EndogLayout,
        n_endog: usize,
    ) -> Self {
        let k = coefficients.len();
        IVEstimate {
            names,
            coefficients: DVector::from_vec(coefficients),
            vcov: DMatrix::zeros(k, k),
            n_obs: 0,
            n_clusters: 0,
            r_squared: f64::NAN,
            method: Method::Ols,
            n_endog,
            layout,
            residuals: DVector::zeros(0),
            scores: DMatrix::zeros(0, k),
            dof_k: k,
        }
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.coefficients[i])
    }

    pub fn se(&self, i: usize) -> f64 {
        self.vcov[(i, i)].max(0.0).sqrt()
    }

    pub fn se_by_name(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.se(i))
    }

    /// Coefficient of an endogenous structural slot, with dropped (empty
    /// cell) columns reported as zero.
    pub fn endog_coefficient(&self, col: Option<usize>) -> f64 {
        col.map_or(0.0, |c| self.coefficients[c])
    }
}

const RANK_REL_TOL: f64 = 1e-10;

/// Least-squares solve via SVD with rank detection.
fn lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, Vec<usize>> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * RANK_REL_TOL;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < x.ncols() {
        return Err(collinear_columns(x));
    }
    Ok(svd.solve(y, tol).expect("svd computed with u and v_t"))
}

fn lstsq_matrix(x: &DMatrix<f64>, ys: &DMatrix<f64>) -> Result<DMatrix<f64>, Vec<usize>> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * RANK_REL_TOL;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < x.ncols() {
        return Err(collinear_columns(x));
    }
    Ok(svd.solve(ys, tol).expect("svd computed with u and v_t"))
}

/// Identify columns that are (nearly) linear combinations of earlier ones,
/// by modified Gram-Schmidt. Only called on the error path.
fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let n = x.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..x.ncols() {
        let mut v = DVector::from_fn(n, |i, _| x[(i, j)]);
        let norm0 = v.norm();
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        if v.norm() <= norm0.max(1e-300) * 1e-8 {
            bad.push(j);
        } else {
            let norm = v.norm();
            basis.push(v / norm);
        }
    }
    bad
}

fn assemble(matrix: &DesignMatrix) -> (DMatrix<f64>, Vec<String>) {
    let n = matrix.n_rows();
    let k = matrix.endog.ncols() + matrix.controls.ncols();
    let mut x = DMatrix::zeros(n, k);
    x.view_mut((0, 0), (n, matrix.endog.ncols()))
        .copy_from(&matrix.endog);
    x.view_mut((0, matrix.endog.ncols()), (n, matrix.controls.ncols()))
        .copy_from(&matrix.controls);
    let mut names = matrix.endog_names.clone();
    names.extend(matrix.control_names.iter().cloned());
    (x, names)
}

fn assemble_instruments(matrix: &DesignMatrix) -> DMatrix<f64> {
    let n = matrix.n_rows();
    let k = matrix.instruments.ncols() + matrix.controls.ncols();
    let mut z = DMatrix::zeros(n, k);
    z.view_mut((0, 0), (n, matrix.instruments.ncols()))
        .copy_from(&matrix.instruments);
    z.view_mut(
        (0, matrix.instruments.ncols()),
        (n, matrix.controls.ncols()),
    )
    .copy_from(&matrix.controls);
    z
}

fn n_clusters(cluster: &[BlockId]) -> usize {
    let mut ids: Vec<BlockId> = cluster.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.len()
}

fn finish_fit(
    matrix: &DesignMatrix,
    names: Vec<String>,
    coefficients: DVector<f64>,
    scores: DMatrix<f64>,
    x: &DMatrix<f64>,
    method: Method,
) -> Result<IVEstimate, EstimatorError> {
    let residuals = &matrix.y - x * &coefficients;
    let ssr = residuals.dot(&residuals);
    let ybar = matrix.y.mean();
    let sst: f64 = matrix.y.iter().map(|&v| (v - ybar).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { f64::NAN };
    let dof_k = x.ncols() + matrix.absorbed_groups;
    let mut est = IVEstimate {
        names,
        coefficients,
        vcov: DMatrix::zeros(0, 0),
        n_obs: matrix.n_rows(),
        n_clusters: n_clusters(&matrix.cluster),
        r_squared,
        method,
        n_endog: matrix.endog.ncols(),
        layout: matrix.layout.clone(),
        residuals,
        scores,
        dof_k,
    };
    est.vcov = cluster_cov(&est, &matrix.cluster)?;
    Ok(est)
}

/// Ordinary least squares of the outcome on `[endogenous | controls]`.
pub fn ols_fit(matrix: &DesignMatrix) -> Result<IVEstimate, EstimatorError> {
    let (x, names) = assemble(matrix);
    if matrix.n_rows() < x.ncols() {
        return Err(EstimatorError::TooFewRows {
            rows: matrix.n_rows(),
            cols: x.ncols(),
        });
    }
    let coefficients = lstsq(&x, &matrix.y)
        .map_err(|bad| EstimatorError::RankDeficient(pick_names(&names, &bad)))?;
    finish_fit(matrix, names, coefficients, x.clone(), &x, Method::Ols)
}

/// Two-stage least squares using the design's excluded instruments.
///
/// When the instrument block equals the endogenous block column-for-column
/// (perfect compliance) the projection is skipped, so the fit coincides
/// with OLS exactly rather than up to floating-point error.
pub fn tsls_fit(matrix: &DesignMatrix) -> Result<IVEstimate, EstimatorError> {
    if matrix.instruments.ncols() < matrix.endog.ncols() {
        return Err(EstimatorError::UnderIdentified {
            instruments: matrix.instruments.ncols(),
            endogenous: matrix.endog.ncols(),
        });
    }
    let (x, names) = assemble(matrix);
    if matrix.n_rows() < x.ncols() {
        return Err(EstimatorError::TooFewRows {
            rows: matrix.n_rows(),
            cols: x.ncols(),
        });
    }
    if matrix.endog == matrix.instruments {
        let coefficients = lstsq(&x, &matrix.y)
            .map_err(|bad| EstimatorError::RankDeficient(pick_names(&names, &bad)))?;
        return finish_fit(matrix, names, coefficients, x.clone(), &x, Method::Tsls);
    }

    let z = assemble_instruments(matrix);
    let first_stage = lstsq_matrix(&z, &matrix.endog).map_err(|bad| {
        let znames: Vec<String> = matrix
            .instrument_names
            .iter()
            .chain(matrix.control_names.iter())
            .cloned()
            .collect();
        EstimatorError::RankDeficient(pick_names(&znames, &bad))
    })?;
    let fitted = &z * &first_stage;

    let n = matrix.n_rows();
    let mut xhat = DMatrix::zeros(n, x.ncols());
    xhat.view_mut((0, 0), (n, matrix.endog.ncols()))
        .copy_from(&fitted);
    xhat.view_mut((0, matrix.endog.ncols()), (n, matrix.controls.ncols()))
        .copy_from(&matrix.controls);

    let coefficients = lstsq(&xhat, &matrix.y).map_err(|bad| {
        // A collinear projected column means its instruments carry no
        // variation beyond the controls.
        match bad.iter().find(|&&j| j < matrix.endog.ncols()) {
            Some(&j) => EstimatorError::WeakFirstStage(matrix.endog_names[j].clone()),
            None => EstimatorError::RankDeficient(pick_names(&names, &bad)),
        }
    })?;
    finish_fit(matrix, names, coefficients, xhat, &x, Method::Tsls)
}

fn pick_names(names: &[String], idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| names[i].clone()).collect()
}

/// Cluster-robust sandwich covariance with cluster-summed scores.
///
/// Every row its own cluster reduces to the heteroskedasticity-robust
/// estimator with an `N/(N-k)` correction.
pub fn cluster_cov(
    estimate: &IVEstimate,
    cluster: &[BlockId],
) -> Result<DMatrix<f64>, EstimatorError> {
    let g = n_clusters(cluster);
    if g < 2 {
        return Err(EstimatorError::SingleCluster(g));
    }
    let k = estimate.scores.ncols();
    let n = estimate.scores.nrows();

    let gram = estimate.scores.transpose() * &estimate.scores;
    let bread = gram
        .try_inverse()
        .ok_or(EstimatorError::SingularSubmatrix)?;

    let mut sums: std::collections::BTreeMap<BlockId, DVector<f64>> = Default::default();
    for (i, &block) in cluster.iter().enumerate().take(n) {
        let entry = sums.entry(block).or_insert_with(|| DVector::zeros(k));
        for j in 0..k {
            entry[j] += estimate.scores[(i, j)] * estimate.residuals[i];
        }
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in sums.values() {
        meat += s * s.transpose();
    }

    let gf = g as f64;
    let nf = n as f64;
    let kf = estimate.dof_k as f64;
    let factor = (gf / (gf - 1.0)) * ((nf - 1.0) / (nf - kf).max(1.0));
    let v = &bread * meat * &bread * factor;
    // Symmetrize against accumulated rounding.
    Ok((&v + v.transpose()) * 0.5)
}

/// A joint Wald test of a coefficient subset being zero.
#[derive(Debug, Clone)]
pub struct WaldResult {
    pub f: f64,
    pub p: f64,
    /// Numerator and denominator degrees of freedom (`q`, `G - 1`).
    pub df: (usize, usize),
}

pub fn wald_joint(estimate: &IVEstimate, subset: &[&str]) -> Result<WaldResult, EstimatorError> {
    if subset.is_empty() {
        return Err(EstimatorError::EmptySubset);
    }
    let idx: Vec<usize> = subset
        .iter()
        .map(|name| {
            estimate
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| EstimatorError::UnknownCoefficient(name.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let q = idx.len();
    let b = DVector::from_fn(q, |i, _| estimate.coefficients[idx[i]]);
    let v = DMatrix::from_fn(q, q, |i, j| estimate.vcov[(idx[i], idx[j])]);
    let vinv = v.try_inverse().ok_or(EstimatorError::SingularSubmatrix)?;
    let wald = (b.transpose() * vinv * &b)[(0, 0)];
    let f = (wald / q as f64).max(0.0);
    let df2 = estimate.n_clusters.saturating_sub(1).max(1);
    let p = f_pvalue(f, q as f64, df2 as f64)?;
    Ok(WaldResult { f, p, df: (q, df2) })
}

fn f_pvalue(f: f64, d1: f64, d2: f64) -> Result<f64, EstimatorError> {
    if !f.is_finite() {
        return Ok(0.0);
    }
    let dist =
        FisherSnedecor::new(d1, d2).map_err(|e| EstimatorError::Distribution(e.to_string()))?;
    Ok((1.0 - dist.cdf(f)).clamp(0.0, 1.0))
}

/// First-stage strength for one endogenous column.
#[derive(Debug, Clone)]
pub struct FirstStageEntry {
    pub name: String,
    /// Joint F of the excluded instruments in the unconditional first stage.
    pub f_unconditional: f64,
    pub p_unconditional: f64,
    pub df_unconditional: (usize, usize),
    /// Conditional F statistic: the column is first purged of the other
    /// endogenous regressors (fitted by 2SLS on the full instrument set),
    /// and the instruments' joint Wald statistic is rescaled by
    /// `kz - kx + 1`.
    pub f_conditional: f64,
    pub df_conditional: (usize, usize),
    /// Set when a stage fits perfectly and the statistic is off the scale;
    /// the reported value is capped.
    pub capped: bool,
}

#[derive(Debug, Clone)]
pub struct FTestReport {
    pub entries: Vec<FirstStageEntry>,
}

const F_CAP: f64 = 1e12;

/// Unconditional and conditional weak-instrument F statistics per
/// endogenous column.
pub fn first_stage_f(matrix: &DesignMatrix) -> Result<FTestReport, EstimatorError> {
    let kx = matrix.endog.ncols();
    let kz = matrix.instruments.ncols();
    if kz < kx {
        return Err(EstimatorError::UnderIdentified {
            instruments: kz,
            endogenous: kx,
        });
    }
    let inames: Vec<&str> = matrix.instrument_names.iter().map(String::as_str).collect();
    let mut entries = Vec::with_capacity(kx);
    for j in 0..kx {
        let xj = DVector::from_fn(matrix.n_rows(), |i, _| matrix.endog[(i, j)]);

        // Unconditional: regress x_j on all excluded instruments + controls.
        let stage = DesignMatrix {
            y: xj.clone(),
            endog: DMatrix::zeros(matrix.n_rows(), 0),
            controls: {
                let mut m = DMatrix::zeros(matrix.n_rows(), kz + matrix.controls.ncols());
                m.view_mut((0, 0), (matrix.n_rows(), kz))
                    .copy_from(&matrix.instruments);
                m.view_mut((0, kz), (matrix.n_rows(), matrix.controls.ncols()))
                    .copy_from(&matrix.controls);
                m
            },
            instruments: DMatrix::zeros(matrix.n_rows(), 0),
            cluster: matrix.cluster.clone(),
            students: matrix.students.clone(),
            endog_names: vec![],
            control_names: matrix
                .instrument_names
                .iter()
                .chain(matrix.control_names.iter())
                .cloned()
                .collect(),
            instrument_names: vec![],
            layout: matrix.layout.clone(),
            absorbed_groups: matrix.absorbed_groups,
            meta: Default::default(),
        };
        let fit = ols_fit(&stage)?;
        let perfect = residual_share(&stage.y, &fit) < 1e-12;
        let (f_unc, p_unc, df_unc, capped_unc) = if perfect {
            (F_CAP, 0.0, (kz, fit.n_clusters - 1), true)
        } else {
            let w = wald_joint(&fit, &inames)?;
            (w.f, w.p, w.df, false)
        };

        // Conditional: 2SLS of x_j on the other endogenous columns, then
        // the instruments' explanatory power for the residual.
        let (f_cond, df_cond, capped_cond) = if kx == 1 {
            (f_unc, (kz, df_unc.1), capped_unc)
        } else {
            let others = DMatrix::from_fn(matrix.n_rows(), kx - 1, |i, c| {
                let col = if c < j { c } else { c + 1 };
                matrix.endog[(i, col)]
            });
            let other_names: Vec<String> = (0..kx)
                .filter(|&c| c != j)
                .map(|c| matrix.endog_names[c].clone())
                .collect();
            let partial = DesignMatrix {
                y: xj.clone(),
                endog: others,
                controls: matrix.controls.clone(),
                instruments: matrix.instruments.clone(),
                cluster: matrix.cluster.clone(),
                students: matrix.students.clone(),
                endog_names: other_names,
                control_names: matrix.control_names.clone(),
                instrument_names: matrix.instrument_names.clone(),
                layout: matrix.layout.clone(),
                absorbed_groups: matrix.absorbed_groups,
                meta: Default::default(),
            };
            let partial_fit = tsls_fit(&partial)?;
            let (xp, _) = assemble(&partial);
            let resid = &xj - xp * &partial_fit.coefficients;
            let resid_stage = DesignMatrix {
                y: resid,
                ..stage.clone()
            };
            let rfit = ols_fit(&resid_stage)?;
            if residual_share(&resid_stage.y, &rfit) < 1e-12 {
                (F_CAP, (kz - kx + 1, rfit.n_clusters - 1), true)
            } else {
                let w = wald_joint(&rfit, &inames)?;
                // Sanderson-Windmeijer rescaling of the joint statistic.
                let f = w.f * kz as f64 / (kz - kx + 1) as f64;
                (f, (kz - kx + 1, w.df.1), false)
            }
        };

        entries.push(FirstStageEntry {
            name: matrix.endog_names[j].clone(),
            f_unconditional: f_unc,
            p_unconditional: p_unc,
            df_unconditional: df_unc,
            f_conditional: f_cond,
            df_conditional: df_cond,
            capped: capped_unc || capped_cond,
        });
    }
    Ok(FTestReport { entries })
}

fn residual_share(y: &DVector<f64>, fit: &IVEstimate) -> f64 {
    let ssr = fit.residuals.dot(&fit.residuals);
    let scale: f64 = y.dot(y);
    if scale <= 0.0 {
        0.0
    } else {
        ssr / scale
    }
}

/// The identified part of the outcome gradient with respect to peer
/// composition for a student of type `x` taught at level `w`: the
/// teacher-by-peer interaction contribution. The own-type and baseline
/// parts of the gradient are confounded with the nonparametric component
/// and are reported only as an explicit unidentified offset marker.
#[derive(Debug, Clone)]
pub struct PeerGradient {
    pub identified: Vec<f64>,
    /// Always true: the gamma + zeta contribution is not identified.
    pub has_unidentified_offset: bool,
}

pub fn peer_gradient(estimate: &IVEstimate, _x: usize, w: usize) -> PeerGradient {
    let k1 = estimate.layout.n_types.saturating_sub(1);
    let mut identified = vec![0.0; k1];
    if w > 0 && estimate.layout.include_lambda {
        for (c, slot) in estimate.layout.wx_cols[w - 1].iter().enumerate() {
            identified[c] = estimate.endog_coefficient(*slot);
        }
    }
    PeerGradient {
        identified,
        has_unidentified_offset: true,
    }
}

/// Coefficient stars at the 10/5/1 percent levels, normal approximation.
pub fn significance_stars(coef: f64, se: f64) -> &'static str {
    if se <= 0.0 {
        return "";
    }
    let z = (coef / se).abs();
    if z > 2.5758 {
        "***"
    } else if z > 1.9600 {
        "**"
    } else if z > 1.6449 {
        "*"
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::DesignMatrix;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn blocks(labels: &[u32]) -> Vec<BlockId> {
        labels.iter().map(|&b| BlockId(b)).collect()
    }

    fn students(n: usize) -> Vec<crate::synth::StudentId> {
        (0..n as u32).map(crate::synth::StudentId).collect()
    }

    fn plain_regression(
        y: Vec<f64>,
        cols: Vec<(&str, Vec<f64>)>,
        cluster: Vec<u32>,
    ) -> DesignMatrix {
        let n = y.len();
        let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j].1[i]);
        DesignMatrix::regression(
            DVector::from_vec(y),
            x,
            cols.iter().map(|(nm, _)| nm.to_string()).collect(),
            blocks(&cluster),
            students(n),
        )
    }

    #[test]
    fn exact_linear_fit_has_zero_residuals() {
        let x1 = vec![1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x1.iter().map(|&v| 2.0 + 3.0 * v).collect();
        let m = plain_regression(
            y,
            vec![("const", vec![1.0; 4]), ("x", x1)],
            vec![0, 0, 1, 1],
        );
        let fit = ols_fit(&m).unwrap();
        assert_abs_diff_eq!(fit.coefficient("x").unwrap(), 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn hand_solvable_slope() {
        // Four points, one regressor with intercept: slope = Sxy/Sxx.
        let x = vec![0.0, 1.0, 2.0, 3.0];
        let y = vec![1.0, 3.0, 2.0, 5.0];
        let sx = 1.5;
        let sy = 2.75;
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - sx) * (b - sy)).sum();
        let sxx: f64 = x.iter().map(|a| (a - sx) * (a - sx)).sum();
        let m = plain_regression(
            y.clone(),
            vec![("const", vec![1.0; 4]), ("x", x)],
            vec![0, 1, 2, 3],
        );
        let fit = ols_fit(&m).unwrap();
        assert_abs_diff_eq!(fit.coefficient("x").unwrap(), sxy / sxx, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficiency_names_columns() {
        let x1 = vec![1.0, 2.0, 3.0, 4.0];
        let x2: Vec<f64> = x1.iter().map(|v| 2.0 * v).collect();
        let m = plain_regression(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![("const", vec![1.0; 4]), ("x1", x1), ("dup", x2)],
            vec![0, 1, 2, 3],
        );
        match ols_fit(&m) {
            Err(EstimatorError::RankDeficient(cols)) => assert!(cols.contains(&"dup".into())),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    fn toy_iv(n: usize, seed: u64) -> DesignMatrix {
        // One endogenous regressor instrumented by z; the error correlates
        // with x but not z.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let zi: f64 = rng.random::<f64>() - 0.5;
            let u: f64 = rng.random::<f64>() - 0.5;
            let e: f64 = rng.random::<f64>() - 0.5;
            let xi = 1.5 * zi + u;
            let yi = 2.0 * xi + u + 0.3 * e;
            z.push(zi);
            x.push(xi);
            y.push(yi);
        }
        let nn = y.len();
        DesignMatrix {
            y: DVector::from_vec(y),
            endog: DMatrix::from_fn(nn, 1, |i, _| x[i]),
            controls: DMatrix::from_element(nn, 1, 1.0),
            instruments: DMatrix::from_fn(nn, 1, |i, _| z[i]),
            cluster: (0..nn as u32).map(|i| BlockId(i / 4)).collect(),
            students: students(nn),
            endog_names: vec!["x".into()],
            control_names: vec!["const".into()],
            instrument_names: vec!["z".into()],
            layout: crate::design::EndogLayout {
                n_types: 0,
                n_levels: 0,
                include_lambda: false,
                w_cols: vec![],
                xw_cols: vec![],
                wx_cols: vec![],
            },
            absorbed_groups: 0,
            meta: Default::default(),
        }
    }

    #[test]
    fn tsls_matches_covariance_ratio_when_just_identified() {
        let m = toy_iv(400, 1);
        let fit = tsls_fit(&m).unwrap();
        // beta = cov(z, y) / cov(z, x)
        let zbar = m.instruments.column(0).mean();
        let xbar = m.endog.column(0).mean();
        let ybar = m.y.mean();
        let mut czy = 0.0;
        let mut czx = 0.0;
        for i in 0..m.n_rows() {
            czy += (m.instruments[(i, 0)] - zbar) * (m.y[i] - ybar);
            czx += (m.instruments[(i, 0)] - zbar) * (m.endog[(i, 0)] - xbar);
        }
        assert_abs_diff_eq!(fit.coefficient("x").unwrap(), czy / czx, epsilon = 1e-10);
    }

    #[test]
    fn tsls_equals_ols_when_instruments_equal_endog() {
        let mut m = toy_iv(200, 2);
        m.instruments = m.endog.clone();
        let ols = ols_fit(&m).unwrap();
        let tsls = tsls_fit(&m).unwrap();
        for i in 0..ols.coefficients.len() {
            assert_eq!(
                ols.coefficients[i].to_bits(),
                tsls.coefficients[i].to_bits()
            );
        }
    }

    #[test]
    fn tsls_invariant_to_instrument_reparameterization() {
        let m = toy_iv(300, 3);
        let fit1 = tsls_fit(&m).unwrap();
        // Affine transform of the instrument: z' = 3z - 7 spans the same
        // space together with the constant control.
        let mut m2 = m.clone();
        for i in 0..m2.n_rows() {
            m2.instruments[(i, 0)] = 3.0 * m2.instruments[(i, 0)] - 7.0;
        }
        let fit2 = tsls_fit(&m2).unwrap();
        assert_abs_diff_eq!(
            fit1.coefficient("x").unwrap(),
            fit2.coefficient("x").unwrap(),
            epsilon = 1e-8
        );
    }

    #[test]
    fn rescaling_outcome_rescales_everything() {
        let m = toy_iv(150, 4);
        let fit1 = tsls_fit(&m).unwrap();
        let mut m2 = m.clone();
        m2.y *= 10.0;
        let fit2 = tsls_fit(&m2).unwrap();
        for i in 0..fit1.coefficients.len() {
            assert_abs_diff_eq!(
                10.0 * fit1.coefficients[i],
                fit2.coefficients[i],
                epsilon = 1e-9
            );
            assert_abs_diff_eq!(10.0 * fit1.se(i), fit2.se(i), epsilon = 1e-9);
        }
    }

    #[test]
    fn duplicated_rows_leave_point_estimates_unchanged() {
        let m = toy_iv(100, 5);
        let fit1 = tsls_fit(&m).unwrap();
        let n = m.n_rows();
        let dup = |mat: &DMatrix<f64>| DMatrix::from_fn(2 * n, mat.ncols(), |i, j| mat[(i % n, j)]);
        let m2 = DesignMatrix {
            y: DVector::from_fn(2 * n, |i, _| m.y[i % n]),
            endog: dup(&m.endog),
            controls: dup(&m.controls),
            instruments: dup(&m.instruments),
            cluster: (0..2 * n).map(|i| m.cluster[i % n]).collect(),
            students: students(2 * n),
            ..m.clone()
        };
        let fit2 = tsls_fit(&m2).unwrap();
        for i in 0..fit1.coefficients.len() {
            assert_abs_diff_eq!(fit1.coefficients[i], fit2.coefficients[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn cluster_cov_matches_literal_loop_on_three_clusters() {
        let m = toy_iv(12, 6);
        let mut m = m;
        m.cluster = blocks(&[0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        let fit = ols_fit(&m).unwrap();
        // Literal sandwich: bread and cluster-summed outer products.
        let (x, _) = assemble(&m);
        let bread = (x.transpose() * &x).try_inverse().unwrap();
        let resid = &m.y - &x * &fit.coefficients;
        let mut meat: DMatrix<f64> = DMatrix::zeros(x.ncols(), x.ncols());
        for g in 0..3u32 {
            let mut s: DVector<f64> = DVector::zeros(x.ncols());
            for i in 0..m.n_rows() {
                if m.cluster[i] == BlockId(g) {
                    for j in 0..x.ncols() {
                        s[j] += x[(i, j)] * resid[i];
                    }
                }
            }
            meat += &s * s.transpose();
        }
        let nf = m.n_rows() as f64;
        let kf = x.ncols() as f64;
        let factor = (3.0 / 2.0) * ((nf - 1.0) / (nf - kf));
        let v = &bread * meat * &bread * factor;
        for i in 0..x.ncols() {
            for j in 0..x.ncols() {
                assert_abs_diff_eq!(fit.vcov[(i, j)], v[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_cluster_rejected() {
        let mut m = toy_iv(20, 7);
        m.cluster = blocks(&[0; 20]);
        assert!(matches!(ols_fit(&m), Err(EstimatorError::SingleCluster(1))));
    }

    #[test]
    fn vcov_is_symmetric_psd() {
        let m = toy_iv(200, 8);
        let fit = tsls_fit(&m).unwrap();
        let v = &fit.vcov;
        for i in 0..v.nrows() {
            for j in 0..v.ncols() {
                assert_abs_diff_eq!(v[(i, j)], v[(j, i)], epsilon = 1e-10);
            }
        }
        let eig = v.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e > -1e-10));
    }

    #[test]
    fn wald_single_coefficient_equals_squared_t() {
        let m = toy_iv(200, 9);
        let fit = tsls_fit(&m).unwrap();
        let w = wald_joint(&fit, &["x"]).unwrap();
        let t = fit.coefficient("x").unwrap() / fit.se_by_name("x").unwrap();
        assert_abs_diff_eq!(w.f, t * t, epsilon = 1e-9);
    }

    #[test]
    fn wald_large_effect_is_overwhelming() {
        let m = toy_iv(800, 10);
        let fit = tsls_fit(&m).unwrap();
        let w = wald_joint(&fit, &["x"]).unwrap();
        assert!(w.p < 1e-6, "p = {}", w.p);
    }

    #[test]
    fn first_stage_f_capped_under_perfect_compliance() {
        let mut m = toy_iv(100, 11);
        m.instruments = m.endog.clone();
        let report = first_stage_f(&m).unwrap();
        assert!(report.entries[0].capped);
        assert_eq!(report.entries[0].f_unconditional, F_CAP);
    }

    #[test]
    fn single_endogenous_conditional_equals_unconditional() {
        let m = toy_iv(200, 12);
        let report = first_stage_f(&m).unwrap();
        let e = &report.entries[0];
        assert_eq!(e.f_unconditional.to_bits(), e.f_conditional.to_bits());
    }

    #[test]
    fn pure_noise_instruments_give_small_f() {
        let mut sum_f = 0.0;
        let trials = 40;
        for seed in 0..trials {
            let mut m = toy_iv(120, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(999 + seed);
            for i in 0..m.n_rows() {
                m.instruments[(i, 0)] = rng.random::<f64>() - 0.5;
            }
            let report = first_stage_f(&m).unwrap();
            sum_f += report.entries[0].f_unconditional;
        }
        // Under the null the F statistic has mean near df2/(df2-2), close
        // to 1; a weak-instrument design should stay far from strong-F
        // territory on average.
        let mean_f = sum_f / trials as f64;
        assert!(mean_f < 2.5, "mean F = {mean_f}");
    }

    #[test]
    fn peer_gradient_zero_for_reference_level_and_zero_lambda() {
        let layout = crate::design::EndogLayout {
            n_types: 3,
            n_levels: 3,
            include_lambda: true,
            w_cols: vec![Some(0), Some(1)],
            xw_cols: vec![vec![Some(2), Some(3)], vec![Some(4), Some(5)]],
            wx_cols: vec![vec![Some(6), Some(7)], vec![Some(8), Some(9)]],
        };
        let est = IVEstimate {
            names: (0..12).map(|i| format!("c{i}")).collect(),
            coefficients: DVector::from_fn(12, |i, _| if (6..10).contains(&i) { 0.0 } else { 1.0 }),
            vcov: DMatrix::zeros(12, 12),
            n_obs: 10,
            n_clusters: 5,
            r_squared: 0.5,
            method: Method::Tsls,
            n_endog: 10,
            layout,
            residuals: DVector::zeros(10),
            scores: DMatrix::zeros(10, 12),
            dof_k: 12,
        };
        // lambda-hat = 0: identified part is the zero vector.
        let g = peer_gradient(&est, 1, 1);
        assert_eq!(g.identified, vec![0.0, 0.0]);
        assert!(g.has_unidentified_offset);
        // Reference teacher level: zero by the omitted-category convention.
        let g0 = peer_gradient(&est, 2, 0);
        assert_eq!(g0.identified, vec![0.0, 0.0]);
    }
}
