//! Bayesian-bootstrap posteriors for pipeline statistics.
//!
//! Each teacher-classroom cluster receives an independent standard
//! exponential weight (every student in the cluster inherits it), the full
//! chain — weighted fixed-effects 2SLS, counterfactual prediction, the
//! per-cell assignment solves, and the reallocation effects — is recomputed
//! under those weights, and the centered quantiles of the replicated
//! statistics give posterior standard errors and intervals.
//!
//! Replication `b` draws from a dedicated RNG stream derived from
//! `(seed, b)`, so results are bit-identical whether replications run
//! serially or in parallel and in any execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::design::{self, CategorySpec, DesignMatrix};
use crate::estimator::{self};
use crate::realloc::{
    compute_are, solve_assignment, AssignmentProblem, CellScheme, CounterfactualModel,
    ReallocError, Sense, SupplySource,
};
use crate::synth::VisibleDataset;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("need at least 2 replications, got {0}")]
    TooFewReplications(usize),
    #[error("need at least 2 draws, got {0}")]
    TooFewDraws(usize),
    #[error("point estimation failed: {0}")]
    PointEstimate(String),
    #[error("unknown statistic `{0}`")]
    UnknownStatistic(String),
    #[error(transparent)]
    Design(#[from] design::DesignError),
    #[error(transparent)]
    Realloc(#[from] ReallocError),
}

/// Replication count, seed, and which statistics to track.
#[derive(Debug, Clone)]
pub struct BootstrapConfig {
    pub replications: usize,
    pub seed: u64,
    /// Run replications on the rayon pool; results are identical either way.
    pub parallel: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replications: 1000,
            seed: 0,
            parallel: true,
        }
    }
}

// Streams 0..16 are reserved by the data generator.
const BOOTSTRAP_STREAM_BASE: u64 = 16;

fn replication_rng(seed: u64, replication: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(BOOTSTRAP_STREAM_BASE + replication as u64);
    rng
}

/// One standard exponential weight per teacher-classroom cluster.
pub fn draw_weights(n_clusters: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n_clusters).map(|_| Exp1.sample(rng)).collect()
}

/// Flag threshold below which a posterior summary is marked as based on
/// too few draws for the quantile-based standard error to be reliable.
pub const LOW_B_THRESHOLD: usize = 100;

/// Quantile-based posterior standard error and interval.
#[derive(Debug, Clone)]
pub struct PosteriorSe {
    pub se: f64,
    /// Central 95% interval for the statistic.
    pub interval: (f64, f64),
    /// All draws equal: the posterior is a point mass.
    pub degenerate: bool,
    pub low_b: bool,
}

/// Linear-interpolation quantile between adjacent order statistics at rank
/// `(n - 1) p` (the common default definition in statistical software).
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Standard error from centered posterior draws: the central 95% quantile
/// range of `draw - point`, divided by twice the 0.975 standard normal
/// quantile; the interval is `[point - q(0.975), point - q(0.025)]`.
pub fn posterior_se(draws: &[f64], point: f64) -> Result<PosteriorSe, InferenceError> {
    if draws.len() < 2 {
        return Err(InferenceError::TooFewDraws(draws.len()));
    }
    let mut centered: Vec<f64> = draws.iter().map(|d| d - point).collect();
    centered.sort_by(f64::total_cmp);
    let q_lo = quantile(&centered, 0.025);
    let q_hi = quantile(&centered, 0.975);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let width = 2.0 * normal.inverse_cdf(0.975);
    let degenerate = centered.first() == centered.last();
    Ok(PosteriorSe {
        se: (q_hi - q_lo) / width,
        interval: (point - q_hi, point - q_lo),
        degenerate,
        low_b: draws.len() < LOW_B_THRESHOLD,
    })
}

/// Posterior summary of one tracked statistic.
#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub name: String,
    pub point: f64,
    pub draws: Vec<f64>,
    pub se: f64,
    pub interval: (f64, f64),
    pub degenerate: bool,
    pub low_b: bool,
}

#[derive(Debug, Clone)]
pub struct BootstrapOutput {
    pub summaries: Vec<PosteriorSummary>,
    pub replications: usize,
    /// Replications whose weighted fit failed, with reasons.
    pub skipped: Vec<(usize, String)>,
    /// More than one percent of replications were skipped.
    pub skip_alarm: bool,
}

/// A statistic-producing chain that can be re-evaluated under cluster
/// weights. `evaluate(None)` is the point estimate on the original sample.
pub trait Pipeline: Sync {
    fn statistic_names(&self) -> Vec<String>;
    fn n_clusters(&self) -> usize;
    fn evaluate(&self, weights: Option<&[f64]>) -> Result<Vec<f64>, String>;
}

/// Run the Bayesian bootstrap over any pipeline.
pub fn bootstrap_run<P: Pipeline>(
    pipeline: &P,
    config: &BootstrapConfig,
) -> Result<BootstrapOutput, InferenceError> {
    if config.replications < 2 {
        return Err(InferenceError::TooFewReplications(config.replications));
    }
    let points = pipeline
        .evaluate(None)
        .map_err(InferenceError::PointEstimate)?;
    let names = pipeline.statistic_names();
    assert_eq!(points.len(), names.len());

    let n_clusters = pipeline.n_clusters();
    let one_rep = |b: usize| -> (usize, Result<Vec<f64>, String>) {
        let mut rng = replication_rng(config.seed, b);
        let weights = draw_weights(n_clusters, &mut rng);
        (b, pipeline.evaluate(Some(&weights)))
    };
    let results: Vec<(usize, Result<Vec<f64>, String>)> = if config.parallel {
        (0..config.replications)
            .into_par_iter()
            .map(one_rep)
            .collect()
    } else {
        (0..config.replications).map(one_rep).collect()
    };

    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(config.replications); names.len()];
    let mut skipped = Vec::new();
    for (b, result) in results {
        match result {
            Ok(values) => {
                for (stat, v) in draws.iter_mut().zip(values) {
                    stat.push(v);
                }
            }
            Err(reason) => skipped.push((b, reason)),
        }
    }
    let kept = config.replications - skipped.len();
    if kept < 2 {
        return Err(InferenceError::TooFewReplications(kept));
    }

    let mut summaries = Vec::with_capacity(names.len());
    for ((name, point), stat_draws) in names.into_iter().zip(points).zip(draws) {
        let se = posterior_se(&stat_draws, point)?;
        summaries.push(PosteriorSummary {
            name,
            point,
            draws: stat_draws,
            se: se.se,
            interval: se.interval,
            degenerate: se.degenerate,
            low_b: se.low_b,
        });
    }
    let skip_alarm = skipped.len() * 100 > config.replications;
    Ok(BootstrapOutput {
        summaries,
        replications: config.replications,
        skipped,
        skip_alarm,
    })
}

/// Which reallocation statistics the full pipeline tracks.
#[derive(Debug, Clone)]
pub struct StatisticSet {
    /// Overall optimal-versus-status-quo effect.
    pub overall: bool,
    /// Per-student-type effects.
    pub by_type: bool,
    /// Conditional-on-reassigned variants.
    pub conditional: bool,
    /// Optimal-versus-worst effects.
    pub vs_worst: bool,
    /// Named equation coefficients to track.
    pub coefficients: Vec<String>,
}

impl Default for StatisticSet {
    fn default() -> Self {
        Self {
            overall: true,
            by_type: true,
            conditional: true,
            vs_worst: true,
            coefficients: vec![],
        }
    }
}

/// Options for the full reallocation chain.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub spec: CategorySpec,
    pub include_lambda: bool,
    pub scheme: CellScheme,
    pub supply: SupplySource,
    pub statistics: StatisticSet,
}

#[derive(Debug, Clone)]
enum StatDef {
    Are {
        vs_worst: bool,
        subgroup: Option<usize>,
        conditional: bool,
    },
    ReassignedFraction,
    Coefficient(String),
}

/// The full weighted chain: absorb block effects under weights, fit 2SLS,
/// predict counterfactual values, re-solve the optimal and worst
/// assignments, and compute the tracked reallocation effects.
///
/// A replication whose conditional-on-reassigned set is empty contributes
/// zero for that statistic (nobody moved, so no conditional gain accrued).
pub struct ArePipeline {
    matrix: DesignMatrix,
    model: CounterfactualModel,
    /// Cluster index of every design row.
    row_cluster: Vec<usize>,
    supply: SupplySource,
    stat_defs: Vec<StatDef>,
    names: Vec<String>,
}

impl ArePipeline {
    pub fn new(data: &VisibleDataset, options: &PipelineOptions) -> Result<Self, InferenceError> {
        let derived = design::derive(data, &options.spec)?;
        let matrix = design::build_design_from_derived(&derived, options.include_lambda);
        let model = CounterfactualModel::from_dataset(data, &options.spec, options.scheme)?;

        // Row -> cluster map via the model's student list; both come from
        // the same derivation, in the same order.
        let cluster_of: std::collections::HashMap<_, _> = model.student_clusters().collect();
        let row_cluster: Vec<usize> = matrix
            .students
            .iter()
            .map(|id| *cluster_of.get(id).expect("design row has a cluster"))
            .collect();

        // Statistic order is fixed at construction.
        let mut stat_defs = Vec::new();
        let mut names = Vec::new();
        let set = &options.statistics;
        let mut push_are = |vs_worst: bool, subgroup: Option<usize>, conditional: bool| {
            let base = if vs_worst { "are_max" } else { "are" };
            let cond = if conditional { "_reassigned" } else { "" };
            let group = subgroup.map_or("_all".to_string(), |g| format!("_type{g}"));
            names.push(format!("{base}{group}{cond}"));
            stat_defs.push(StatDef::Are {
                vs_worst,
                subgroup,
                conditional,
            });
        };
        if set.overall {
            push_are(false, None, false);
            if set.conditional {
                push_are(false, None, true);
            }
            if set.vs_worst {
                push_are(true, None, false);
                if set.conditional {
                    push_are(true, None, true);
                }
            }
        }
        if set.by_type {
            for g in 0..model.n_types {
                push_are(false, Some(g), false);
                if set.conditional {
                    push_are(false, Some(g), true);
                }
                if set.vs_worst {
                    push_are(true, Some(g), false);
                }
            }
        }
        names.push("reassigned_fraction".into());
        stat_defs.push(StatDef::ReassignedFraction);
        for c in &set.coefficients {
            names.push(format!("coef_{c}"));
            stat_defs.push(StatDef::Coefficient(c.clone()));
        }

        let pipeline = Self {
            matrix,
            model,
            row_cluster,
            supply: options.supply,
            stat_defs,
            names,
        };
        // Validate tracked coefficients against the point fit right away.
        let point = pipeline
            .evaluate(None)
            .map_err(InferenceError::PointEstimate)?;
        debug_assert_eq!(point.len(), pipeline.names.len());
        Ok(pipeline)
    }

    pub fn model(&self) -> &CounterfactualModel {
        &self.model
    }
}

impl Pipeline for ArePipeline {
    fn statistic_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn n_clusters(&self) -> usize {
        self.model.n_clusters()
    }

    fn evaluate(&self, weights: Option<&[f64]>) -> Result<Vec<f64>, String> {
        let row_weights: Vec<f64> = match weights {
            Some(w) => self.row_cluster.iter().map(|&c| w[c]).collect(),
            None => vec![1.0; self.matrix.n_rows()],
        };
        let absorbed = design::absorb_blocks_weighted(&self.matrix, &row_weights)
            .map_err(|e| e.to_string())?;
        let est = estimator::tsls_fit(&absorbed).map_err(|e| e.to_string())?;
        let table = self.model.predict(&est).map_err(|e| e.to_string())?;

        let best = solve_assignment(
            &AssignmentProblem::from_table(&table, Sense::Maximize, self.supply, weights)
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let worst = solve_assignment(
            &AssignmentProblem::from_table(&table, Sense::Minimize, self.supply, weights)
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let status_quo = table.status_quo_plan();

        let mut out = Vec::with_capacity(self.stat_defs.len());
        for def in &self.stat_defs {
            let value = match def {
                StatDef::Are {
                    vs_worst,
                    subgroup,
                    conditional,
                } => {
                    let baseline = if *vs_worst { &worst } else { &status_quo };
                    let report =
                        compute_are(&table, &best, baseline, *subgroup, *conditional, weights)
                            .map_err(|e| e.to_string())?;
                    report.gain.unwrap_or(0.0)
                }
                StatDef::ReassignedFraction => {
                    compute_are(&table, &best, &status_quo, None, false, weights)
                        .map_err(|e| e.to_string())?
                        .reassigned_fraction
                }
                StatDef::Coefficient(name) => est
                    .coefficient(name)
                    .ok_or_else(|| format!("unknown coefficient `{name}`"))?,
            };
            out.push(value);
        }
        Ok(out)
    }
}
