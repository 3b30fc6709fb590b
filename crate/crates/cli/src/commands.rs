//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use num_traits::ToPrimitive;
use sha2::{Digest, Sha256};

use classmatch::design;
use classmatch::diagnostics::{self, Verdict};
use classmatch::estimator;
use classmatch::inference::{self, ArePipeline, BootstrapConfig, PipelineOptions};
use classmatch::matchcore::{self, CounterfactualRule, MatchSurface, Rational, ToyPopulation};
use classmatch::realloc::{self, AssignmentProblem, Sense, VamPolicy};
use classmatch::synth::{self, Dataset, ExportOptions};

use crate::config::RunConfig;
use crate::report::{self, AreLine};
use crate::CliError;

/// Run record written next to every output set: configuration hash, seed,
/// tool version, and the files produced.
fn write_manifest(
    out: &Path,
    subcommand: &str,
    cfg: &RunConfig,
    files: &[&str],
) -> Result<(), CliError> {
    let canonical = cfg.canonical_toml();
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    let hash: String = digest.iter().map(|b| format!("{b:02x}")).collect();

    let mut text = String::new();
    text.push_str(&format!("subcommand = \"{subcommand}\"\n"));
    text.push_str(&format!("seed = {}\n", cfg.seed));
    text.push_str(&format!("config_sha256 = \"{hash}\"\n"));
    text.push_str(&format!(
        "tool_version = \"{}\"\n",
        env!("CARGO_PKG_VERSION")
    ));
    text.push_str("files = [");
    text.push_str(
        &files
            .iter()
            .map(|f| format!("\"{f}\""))
            .collect::<Vec<_>>()
            .join(", "),
    );
    text.push_str("]\n");
    std::fs::write(out.join("manifest.toml"), text)
        .map_err(|e| CliError::Data(format!("cannot write manifest: {e}")))?;
    Ok(())
}

fn ensure_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))
}

fn load_dataset(data: Option<&PathBuf>) -> Result<Dataset, CliError> {
    let dir = data
        .ok_or_else(|| CliError::Usage("--data DIR with the dataset files is required".into()))?;
    Ok(synth::import(dir)?)
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path, oracle_columns: bool) -> Result<(), CliError> {
    ensure_out(out)?;
    let dataset = synth::generate(&cfg.population, &cfg.params)?;
    synth::export(&dataset, out, ExportOptions { oracle_columns })?;
    log::info!(
        "wrote {} students, {} teachers, {} sections, {} blocks",
        dataset.students.len(),
        dataset.teachers.len(),
        dataset.sections.len(),
        dataset.blocks.len()
    );
    write_manifest(
        out,
        "synth",
        cfg,
        &["students.csv", "teachers.csv", "sections.csv", "blocks.csv"],
    )
}

pub fn cmd_estimate(
    cfg: &RunConfig,
    data: Option<&PathBuf>,
    out: &Path,
    dump_design: bool,
) -> Result<(), CliError> {
    ensure_out(out)?;
    let dataset = load_dataset(data)?;
    let spec = cfg.category_spec()?;
    let matrix = design::build_design(&dataset.visible(), &spec, cfg.model.include_lambda)?;
    for warning in &matrix.meta.warnings {
        log::warn!("{warning}");
    }
    let absorbed = design::absorb_blocks(&matrix)?;
    let ols = estimator::ols_fit(&absorbed)?;
    let tsls = estimator::tsls_fit(&absorbed)?;
    let first_stage = estimator::first_stage_f(&absorbed)?;

    report::write_estimates(&out.join("estimates.csv"), &[&ols, &tsls])?;
    report::write_fit_stats(&out.join("fit_stats.csv"), &[&ols, &tsls])?;
    report::write_first_stage(&out.join("first_stage.csv"), &first_stage)?;
    let mut files = vec!["estimates.csv", "fit_stats.csv", "first_stage.csv"];
    if dump_design {
        design::dump_design(&absorbed, &out.join("design_matrix.csv"))
            .map_err(|e| CliError::Data(format!("cannot dump design matrix: {e}")))?;
        files.push("design_matrix.csv");
    }
    write_manifest(out, "estimate", cfg, &files)
}

/// Returns true when any diagnostic rejects at the configured level.
pub fn cmd_diagnose(cfg: &RunConfig, data: Option<&PathBuf>, out: &Path) -> Result<bool, CliError> {
    ensure_out(out)?;
    let dataset = load_dataset(data)?;
    let reports = diagnostics::run_all(&dataset.visible(), cfg.model.level)?;
    report::write_diagnostics(&out.join("diagnostics.csv"), &reports)?;
    report::write_diagnostic_coefficients(&out.join("diagnostic_coefficients.csv"), &reports)?;
    write_manifest(
        out,
        "diagnose",
        cfg,
        &["diagnostics.csv", "diagnostic_coefficients.csv"],
    )?;
    Ok(reports.iter().any(|r| r.verdict == Verdict::Reject))
}

pub fn cmd_reallocate(cfg: &RunConfig, data: Option<&PathBuf>, out: &Path) -> Result<(), CliError> {
    ensure_out(out)?;
    let dataset = load_dataset(data)?;
    let spec = cfg.category_spec()?;
    let matrix = design::build_design(&dataset.visible(), &spec, cfg.model.include_lambda)?;
    let absorbed = design::absorb_blocks(&matrix)?;
    let est = estimator::tsls_fit(&absorbed)?;

    let table =
        realloc::predict_counterfactuals(&dataset.visible(), &spec, cfg.cell_scheme(), &est)?;
    let supply = cfg.supply_source();
    let best = realloc::solve_assignment(&AssignmentProblem::from_table(
        &table,
        Sense::Maximize,
        supply,
        None,
    )?)?;
    let worst = realloc::solve_assignment(&AssignmentProblem::from_table(
        &table,
        Sense::Minimize,
        supply,
        None,
    )?)?;
    let status_quo = table.status_quo_plan();

    let mut lines = Vec::new();
    let mut subgroups: Vec<(String, Option<usize>)> = vec![("all".into(), None)];
    for g in 0..table.n_types {
        subgroups.push((format!("type{g}"), Some(g)));
    }
    for (comparison, baseline) in [
        ("optimal_vs_status_quo", &status_quo),
        ("optimal_vs_worst", &worst),
    ] {
        for conditional in [false, true] {
            for (name, group) in &subgroups {
                let report =
                    realloc::compute_are(&table, &best, baseline, *group, conditional, None)?;
                lines.push(AreLine {
                    comparison,
                    subgroup: name.clone(),
                    conditional,
                    report,
                });
            }
        }
    }

    report::write_plan(&out.join("plan_optimal.csv"), &table, &best)?;
    report::write_plan(&out.join("plan_worst.csv"), &table, &worst)?;
    report::write_are_report(&out.join("are_report.csv"), &lines)?;
    let assort = [
        (
            "status_quo",
            realloc::assortativeness_summary(&table, &status_quo)?,
        ),
        ("optimal", realloc::assortativeness_summary(&table, &best)?),
        ("worst", realloc::assortativeness_summary(&table, &worst)?),
    ];
    report::write_assortativeness(&out.join("assortativeness.csv"), &assort)?;
    write_manifest(
        out,
        "reallocate",
        cfg,
        &[
            "plan_optimal.csv",
            "plan_worst.csv",
            "are_report.csv",
            "assortativeness.csv",
        ],
    )
}

/// Returns true when the skip alarm fired.
pub fn cmd_bootstrap(
    cfg: &RunConfig,
    data: Option<&PathBuf>,
    out: &Path,
) -> Result<bool, CliError> {
    ensure_out(out)?;
    let dataset = load_dataset(data)?;
    let options = PipelineOptions {
        spec: cfg.category_spec()?,
        include_lambda: cfg.model.include_lambda,
        scheme: cfg.cell_scheme(),
        supply: cfg.supply_source(),
        statistics: cfg.statistic_set(),
    };
    let pipeline = ArePipeline::new(&dataset.visible(), &options)?;
    let output = inference::bootstrap_run(
        &pipeline,
        &BootstrapConfig {
            replications: cfg.bootstrap.replications,
            seed: cfg.seed,
            parallel: cfg.bootstrap.parallel,
        },
    )?;
    for (b, reason) in &output.skipped {
        log::warn!("replication {b} skipped: {reason}");
    }
    report::write_posterior(&out.join("posterior.csv"), &output)?;
    let mut files = vec!["posterior.csv"];
    if cfg.bootstrap.dump_draws {
        report::write_draws(&out.join("posterior_draws.csv"), &output)?;
        files.push("posterior_draws.csv");
    }
    write_manifest(out, "bootstrap", cfg, &files)?;
    Ok(output.skip_alarm)
}

pub fn cmd_benchmark_vam(
    cfg: &RunConfig,
    out: &Path,
    custom: Option<(f64, f64, Option<f64>)>,
) -> Result<(), CliError> {
    ensure_out(out)?;
    let mut rows: Vec<(f64, f64, Option<f64>)> = vec![
        (0.15, 0.05, None),
        (0.15, 0.10, None),
        (0.15, 0.05, Some(0.75)),
    ];
    if let Some(row) = custom {
        rows.push(row);
    }
    let path = out.join("vam_benchmarks.csv");
    let mut w = csv::Writer::from_path(&path)
        .map_err(|e| CliError::Data(format!("cannot write vam_benchmarks.csv: {e}")))?;
    w.write_record(["sigma", "tau", "tau_tilde", "effect_sd"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for (sigma, tau, tau_tilde) in rows {
        let effect = realloc::vam_benchmark(&VamPolicy {
            sigma,
            tau,
            tau_tilde,
        })?;
        w.write_record(&[
            sigma.to_string(),
            tau.to_string(),
            tau_tilde.map(|t| t.to_string()).unwrap_or_default(),
            effect.to_string(),
        ])
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;
    write_manifest(out, "benchmark-vam", cfg, &["vam_benchmarks.csv"])
}

fn ratio_str(r: Rational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// The reference two-type, three-students-per-class example: reproduce the
/// own/peer density in exact rationals, verify feasibility of the random
/// and tilted assignment rules, and evaluate toy reallocation values.
pub fn cmd_toy_are(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_out(out)?;
    let r = |n: i64, d: i64| Rational::new(n, d);
    let pop = ToyPopulation::new(
        vec![
            (vec![0, 0, 0], r(1, 4)),
            (vec![0, 0, 1], r(1, 4)),
            (vec![0, 1, 1], r(1, 4)),
            (vec![1, 1, 1], r(1, 4)),
        ],
        vec![r(1, 2), r(1, 2)],
        3,
        2,
    )?;
    let density = matchcore::own_peer_density(&pop)?;

    let path = out.join("toy_density.csv");
    let mut w = csv::Writer::from_path(&path)
        .map_err(|e| CliError::Data(format!("cannot write toy_density.csv: {e}")))?;
    w.write_record(["own_type", "peer_fraction", "mass", "mass_float"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for (point, mass) in density.points() {
        w.write_record(&[
            point.own_type.to_string(),
            ratio_str(point.peer_fractions[0]),
            ratio_str(mass),
            mass.to_f64().unwrap_or(f64::NAN).to_string(),
        ])
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;

    let random = CounterfactualRule::constant_marginal(&density, pop.teacher_marginal())?;
    let tilted = CounterfactualRule::from_classroom_rows(
        &pop,
        &[
            vec![r(2, 3), r(1, 3)],
            vec![r(1, 2), r(1, 2)],
            vec![r(1, 2), r(1, 2)],
            vec![r(1, 3), r(2, 3)],
        ],
    )?;

    let path = out.join("toy_feasibility.csv");
    let mut w = csv::Writer::from_path(&path)
        .map_err(|e| CliError::Data(format!("cannot write toy_feasibility.csv: {e}")))?;
    w.write_record(["rule", "feasible", "max_violation"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for (name, rule) in [("random", &random), ("tilted", &tilted)] {
        let feas = matchcore::check_feasible(rule, &density, pop.teacher_marginal())?;
        w.write_record(&[
            name.to_string(),
            feas.feasible.to_string(),
            feas.max_violation.to_string(),
        ])
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;

    // Two surfaces: one additively separable (reallocation-proof), one with
    // an own-type-by-teacher interaction.
    let separable = MatchSurface::from_fn(&density, 2, |p, w| {
        p.own_type as f64 + 0.25 * p.peer_fractions[0].to_f64().unwrap_or(0.0) + 0.5 * w as f64
    });
    let interactive = MatchSurface::from_fn(&density, 2, |p, w| {
        (p.own_type * w) as f64 + 0.3 * p.peer_fractions[0].to_f64().unwrap_or(0.0) * w as f64
    });

    let path = out.join("toy_are.csv");
    let mut w = csv::Writer::from_path(&path)
        .map_err(|e| CliError::Data(format!("cannot write toy_are.csv: {e}")))?;
    w.write_record(["surface", "rule", "value"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut values: BTreeMap<(&str, String), f64> = BTreeMap::new();
    for (sname, surface) in [("separable", &separable), ("interactive", &interactive)] {
        for (rname, rule) in [("random", &random), ("tilted", &tilted)] {
            let v = matchcore::are_nonparametric(surface, rule, &density)?;
            values.insert((sname, rname.to_string()), v);
        }
        // Deterministic classroom-level assignments, exhaustively.
        let mut best = f64::NEG_INFINITY;
        let mut worst = f64::INFINITY;
        for (_, rule) in matchcore::enumerate_deterministic_rules(&pop)? {
            let v = matchcore::are_nonparametric(surface, &rule, &density)?;
            best = best.max(v);
            worst = worst.min(v);
        }
        values.insert((sname, "best_deterministic".into()), best);
        values.insert((sname, "worst_deterministic".into()), worst);
    }
    for ((sname, rname), v) in &values {
        w.write_record(&[sname.to_string(), rname.clone(), v.to_string()])
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))?;

    write_manifest(
        out,
        "toy-are",
        cfg,
        &["toy_density.csv", "toy_feasibility.csv", "toy_are.csv"],
    )
}
