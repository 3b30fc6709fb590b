//! Comma-separated report writers with fixed column orders.

use std::path::Path;

use classmatch::diagnostics::{DiagnosticReport, Verdict};
use classmatch::estimator::{significance_stars, FTestReport, IVEstimate};
use classmatch::inference::BootstrapOutput;
use classmatch::realloc::{AreReport, AssignmentPlan, AssortRow, ClassroomValueTable};

use crate::CliError;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, CliError> {
    csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<(), CliError> {
    w.flush()
        .map_err(|e| CliError::Data(format!("cannot flush {}: {e}", path.display())))
}

fn write_row(
    w: &mut csv::Writer<std::fs::File>,
    path: &Path,
    row: &[String],
) -> Result<(), CliError> {
    w.write_record(row)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Coefficient table: one row per term with stars at the 10/5/1% levels.
pub fn write_estimates(path: &Path, fits: &[&IVEstimate]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    write_row(
        &mut w,
        path,
        &["method", "term", "estimate", "se", "stars"].map(String::from),
    )?;
    for fit in fits {
        for (i, name) in fit.names.iter().enumerate() {
            let se = fit.se(i);
            write_row(
                &mut w,
                path,
                &[
                    fit.method.to_string(),
                    name.clone(),
                    fit.coefficients[i].to_string(),
                    se.to_string(),
                    significance_stars(fit.coefficients[i], se).to_string(),
                ],
            )?;
        }
    }
    finish(w, path)
}

pub fn write_fit_stats(path: &Path, fits: &[&IVEstimate]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    write_row(
        &mut w,
        path,
        &["method", "n_obs", "n_clusters", "r_squared"].map(String::from),
    )?;
    for fit in fits {
        write_row(
            &mut w,
            path,
            &[
                fit.method.to_string(),
                fit.n_obs.to_string(),
                fit.n_clusters.to_string(),
                fit.r_squared.to_string(),
            ],
        )?;
    }
    finish(w, path)
}

pub fn write_first_stage(path: &Path, report: &FTestReport) -> Result<(), CliError> {
    let mut w = writer(path)?;
    write_row(
        &mut w,
        path,
        &[
            "term",
            "f_unconditional",
            "p_unconditional",
            "df1",
            "df2",
            "f_conditional",
            "df1_conditional",
            "df2_conditional",
            "capped",
        ]
        .map(String::from),
    )?;
    for e in &report.entries {
        write_row(
            &mut w,
            path,
            &[
                e.name.clone(),
                e.f_unconditional.to_string(),
                e.p_unconditional.to_string(),
                e.df_unconditional.0.to_string(),
                e.df_unconditional.1.to_string(),
                e.f_conditional.to_string(),
                e.df_conditional.0.to_string(),
                e.df_conditional.1.to_string(),
                e.capped.to_string(),
            ],
        )?;
    }
    finish(w, path)
}

fn verdict_str(v: &Verdict) -> String {
    match v {
        Verdict::Pass => "pass".into(),
        Verdict::Reject => "reject".into(),
        Verdict::Degenerate => "degenerate".into(),
        Verdict::Skipped(reason) => format!("skipped: {reason}"),
    }
}

pub fn write_diagnostics(path: &Path, reports: &[DiagnosticReport]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    write_row(
        &mut w,
        path,
        &[
            "test",
            "dependent",
            "n",
            "f",
            "p",
            "df1",
            "df2",
            "level",
            "verdict",
        ]
        .map(String::from),
    )?;
    for r in reports {
        write_row(
            &mut w,
            path,
            &[
                r.test.clone(),
                r.dependent.clone(),
                r.n.to_string(),
                r.f.to_string(),
                r.p.to_string(),
                r.df.0.to_string(),
                r.df.1.to_string(),
                r.level.to_string(),
                verdict_str(&r.verdict),
            ],
        )?;
    }
    finish(w, path)
}

pub fn write_diagnostic_coefficients(
    path: &Path,
    reports: &[DiagnosticReport],
) -> Result<(), CliError> {
    let mut w = writer(path)?;
    write_row(
        &mut w,
        path,
        &["test", "dependent", "term", "estimate", "se", "stars"].map(String::from),
    )?;
    for r in reports {
        for c in &r.coefficients {
            write_row(
                &mut w,
                path,
                &[
                    r.test.clone(),
                    r.dependent.clone(),
                    c.name.clone(),
                    c.estimate.to_string(),
                    c.se.to_string(),
                    significance_stars(c.estimate, c.se).to_string(),
                ],
            )?;
        }
    }
    finish(w, path)
}

pub fn write_plan(
    path: &Path,
    table: &ClassroomValueTable,
    plan: &AssignmentPlan,
) -> Result<(), CliError> {
    let mut w = writer(path)?;
    write_row(
        &mut w,
        path,
        &[
            "cluster",
            "teacher",
            "cell",
            "sections",
            "n_students",
            "status_quo_level",
            "assigned_level",
        ]
        .map(String::from),
    )?;
    for (i, c) in table.clusters.iter().enumerate() {
        let sections = c
            .sections
            .iter()
            .map(|s| s.0.to_string())
            .collect::<Vec<_>>()
            .join(";");
        write_row(
            &mut w,
            path,
            &[
                i.to_string(),
                c.teacher.0.to_string(),
                c.cell.0.clone(),
                sections,
                c.n_students.to_string(),
                c.status_quo_level.to_string(),
                plan.levels[i].to_string(),
            ],
        )?;
    }
    finish(w, path)
}

pub struct AreLine {
    pub comparison: &'static str,
    pub subgroup: String,
    pub conditional: bool,
    pub report: AreReport,
}

pub fn write_are_report(path: &Path, lines: &[AreLine]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    write_row(
        &mut w,
        path,
        &[
            "comparison",
            "subgroup",
            "conditional_on_reassigned",
            "gain",
            "n_students",
            "reassigned_fraction",
        ]
        .map(String::from),
    )?;
    for line in lines {
        write_row(
            &mut w,
            path,
            &[
                line.comparison.to_string(),
                line.subgroup.clone(),
                line.conditional.to_string(),
                line.report.gain.map(|g| g.to_string()).unwrap_or_default(),
                line.report.n_students.to_string(),
                line.report.reassigned_fraction.to_string(),
            ],
        )?;
    }
    finish(w, path)
}

/// Long-format shares file backing composition-by-level charts.
pub fn write_assortativeness(path: &Path, rows: &[(&str, Vec<AssortRow>)]) -> Result<(), CliError> {
    let mut w = writer(path)?;
    write_row(
        &mut w,
        path,
        &[
            "plan",
            "teacher_level",
            "student_type",
            "share",
            "n_classrooms",
        ]
        .map(String::from),
    )?;
    for (plan, summary) in rows {
        for row in summary {
            for (ty, share) in row.shares.iter().enumerate() {
                write_row(
                    &mut w,
                    path,
                    &[
                        plan.to_string(),
                        row.level.to_string(),
                        ty.to_string(),
                        share.to_string(),
                        row.n_clusters.to_string(),
                    ],
                )?;
            }
        }
    }
    finish(w, path)
}

pub fn write_posterior(path: &Path, output: &BootstrapOutput) -> Result<(), CliError> {
    let mut w = writer(path)?;
    write_row(
        &mut w,
        path,
        &[
            "statistic",
            "point",
            "se",
            "ci_lo",
            "ci_hi",
            "replications",
            "skipped",
            "degenerate",
            "low_b",
        ]
        .map(String::from),
    )?;
    for s in &output.summaries {
        write_row(
            &mut w,
            path,
            &[
                s.name.clone(),
                s.point.to_string(),
                s.se.to_string(),
                s.interval.0.to_string(),
                s.interval.1.to_string(),
                output.replications.to_string(),
                output.skipped.len().to_string(),
                s.degenerate.to_string(),
                s.low_b.to_string(),
            ],
        )?;
    }
    finish(w, path)
}

pub fn write_draws(path: &Path, output: &BootstrapOutput) -> Result<(), CliError> {
    let mut w = writer(path)?;
    write_row(
        &mut w,
        path,
        &["statistic", "replication", "value"].map(String::from),
    )?;
    for s in &output.summaries {
        for (b, v) in s.draws.iter().enumerate() {
            write_row(
                &mut w,
                path,
                &[s.name.clone(), b.to_string(), v.to_string()],
            )?;
        }
    }
    finish(w, path)
}
