//! Run configuration: one optional TOML file plus flag overrides.
//!
//! The effective configuration is the file's values with any command-line
//! flags applied on top (flags win); its canonical serialization is hashed
//! into the run manifest so outputs carry a complete record of how they
//! were produced.

use std::path::Path;

use serde::{Deserialize, Serialize};

use classmatch::design::{CategorySpec, StudentRule};
use classmatch::inference::StatisticSet;
use classmatch::realloc::{CellScheme, SupplySource};
use classmatch::synth::{PopulationConfig, ProductionParams};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub population: Option<PopulationConfig>,
    pub params: Option<ProductionParams>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub realloc: ReallocSection,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub k: usize,
    pub l: usize,
    pub cutoffs: Vec<f64>,
    pub include_lambda: bool,
    /// Diagnostic rejection level.
    pub level: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            k: 3,
            l: 3,
            cutoffs: vec![2.25, 2.75],
            include_lambda: false,
            level: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReallocSection {
    /// Reassignment boundary: district-school-type, school-type, or block.
    pub cells: String,
    /// Teacher supply counted from realized or assigned levels.
    pub supply: String,
}

impl Default for ReallocSection {
    fn default() -> Self {
        Self {
            cells: "district-school-type".into(),
            supply: "realized".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub replications: usize,
    pub parallel: bool,
    pub dump_draws: bool,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self {
            replications: 1000,
            parallel: true,
            dump_draws: false,
        }
    }
}

/// The resolved configuration for one run.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub population: PopulationConfig,
    pub params: ProductionParams,
    pub model: ModelSection,
    pub realloc: ReallocSection,
    pub bootstrap: BootstrapSection,
}

/// Default ground-truth parameters for synthetic runs: moderate
/// student-teacher complementarity, small main effects.
pub fn default_params(k: usize, l: usize) -> ProductionParams {
    let mut p = ProductionParams::zeros(k, l);
    p.alpha = 0.1;
    for (i, b) in p.beta.iter_mut().enumerate() {
        *b = 0.5 * (i + 1) as f64;
    }
    for (i, g) in p.gamma.iter_mut().enumerate() {
        *g = 0.1 * (i + 1) as f64;
    }
    for (i, d) in p.delta.iter_mut().enumerate() {
        *d = 0.03 * (i + 1) as f64;
    }
    for (ty, row) in p.eta.chunks_mut(l - 1).enumerate() {
        for (lv, e) in row.iter_mut().enumerate() {
            *e = 0.05 * (ty + 1) as f64 * (lv + 1) as f64;
        }
    }
    for (i, lam) in p.lambda.iter_mut().enumerate() {
        *lam = 0.01 * (i + 1) as f64;
    }
    p.rho = 0.3;
    p.sd_v = 0.35;
    p.sd_u = 0.10;
    p
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let file: FileConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };

        let mut model = file.model;
        if let Some(k) = overrides.k {
            model.k = k;
        }
        if let Some(l) = overrides.l {
            model.l = l;
        }
        if let Some(cutoffs) = &overrides.cutoffs {
            model.cutoffs = cutoffs.clone();
        }
        if let Some(include_lambda) = overrides.include_lambda {
            model.include_lambda = include_lambda;
        }
        if model.cutoffs.len() + 1 != model.l {
            return Err(CliError::Usage(format!(
                "{} cutoffs imply {} teacher levels, but L = {}",
                model.cutoffs.len(),
                model.cutoffs.len() + 1,
                model.l
            )));
        }

        let mut population = file.population.unwrap_or_default();
        population.k = model.k;
        population.l = model.l;
        population.teacher_cutoffs = model.cutoffs.clone();
        if population.teacher_level_marginal.len() != model.l {
            // Keep the config usable when only L was overridden.
            population.teacher_level_marginal = vec![1.0 / model.l as f64; model.l];
        }

        let seed = overrides.seed.or(file.seed).unwrap_or(population.seed);
        population.seed = seed;

        let params = match file.params {
            Some(p) => p,
            None => default_params(model.k, model.l),
        };

        let mut realloc = file.realloc;
        if let Some(cells) = &overrides.cells {
            realloc.cells = cells.clone();
        }
        realloc
            .cells
            .parse::<CellScheme>()
            .map_err(CliError::Usage)?;
        parse_supply(&realloc.supply)?;

        let mut bootstrap = file.bootstrap;
        if let Some(b) = overrides.replications {
            bootstrap.replications = b;
        }
        if let Some(d) = overrides.dump_draws {
            bootstrap.dump_draws = d;
        }

        Ok(RunConfig {
            seed,
            population,
            params,
            model,
            realloc,
            bootstrap,
        })
    }

    pub fn category_spec(&self) -> Result<CategorySpec, CliError> {
        CategorySpec::new(
            self.model.cutoffs.clone(),
            StudentRule::WithinDistrictKtiles { k: self.model.k },
        )
        .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn cell_scheme(&self) -> CellScheme {
        self.realloc.cells.parse().expect("validated at load")
    }

    pub fn supply_source(&self) -> SupplySource {
        parse_supply(&self.realloc.supply).expect("validated at load")
    }

    pub fn statistic_set(&self) -> StatisticSet {
        StatisticSet::default()
    }

    /// Canonical serialization hashed into the manifest.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_supply(s: &str) -> Result<SupplySource, CliError> {
    match s {
        "realized" => Ok(SupplySource::Realized),
        "assigned" => Ok(SupplySource::Assigned),
        other => Err(CliError::Usage(format!(
            "unknown supply source `{other}` (expected realized or assigned)"
        ))),
    }
}

/// Flag-level overrides; `None` means "not given".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub l: Option<usize>,
    pub cutoffs: Option<Vec<f64>>,
    pub cells: Option<String>,
    pub include_lambda: Option<bool>,
    pub replications: Option<usize>,
    pub dump_draws: Option<bool>,
}
