//! End-to-end subcommand tests against the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_classmatch"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn read(dir: &Path, file: &str) -> String {
    std::fs::read_to_string(dir.join(file)).unwrap_or_else(|e| panic!("read {file}: {e}"))
}

fn synth_into(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", dir.to_str().unwrap(), "--seed", "11"];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(
        out.status.success(),
        "synth failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth_into(a.path(), &[]);
    synth_into(b.path(), &[]);
    for file in [
        "students.csv",
        "teachers.csv",
        "sections.csv",
        "blocks.csv",
        "manifest.toml",
    ] {
        assert_eq!(read(a.path(), file), read(b.path(), file), "{file} differs");
    }
}

#[test]
fn synth_rejects_single_classroom_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[population]\nclassrooms_per_block = 1\n").unwrap();
    let out = run(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("at least 2"), "stderr: {stderr}");
}

#[test]
fn dataset_round_trips_through_import() {
    let a = tempfile::tempdir().unwrap();
    synth_into(a.path(), &["--oracle-columns"]);
    // Re-exporting an imported dataset reproduces the files byte for byte.
    let ds = classmatch::synth::import(a.path()).unwrap();
    let b = tempfile::tempdir().unwrap();
    classmatch::synth::export(
        &ds,
        b.path(),
        classmatch::synth::ExportOptions {
            oracle_columns: true,
        },
    )
    .unwrap();
    for file in ["students.csv", "teachers.csv", "sections.csv", "blocks.csv"] {
        assert_eq!(read(a.path(), file), read(b.path(), file), "{file} differs");
    }
}

#[test]
fn estimate_ols_equals_tsls_under_perfect_compliance() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.toml");
    std::fs::write(
        &config,
        "[population]\nnoncompliance_teachers = 0.0\nnoncompliance_students = 0.0\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "synth",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let est = dir.path().join("est");
    let out = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--out",
        est.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = read(&est, "estimates.csv");
    let mut ols: Vec<(&str, &str)> = vec![];
    let mut tsls: Vec<(&str, &str)> = vec![];
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        match fields[0] {
            "OLS" => ols.push((fields[1], fields[2])),
            "2SLS" => tsls.push((fields[1], fields[2])),
            _ => {}
        }
    }
    assert_eq!(ols, tsls);
}

#[test]
fn include_lambda_toggles_endogenous_count() {
    let data = tempfile::tempdir().unwrap();
    synth_into(data.path(), &[]);
    let count_endog = |dir: &Path| {
        read(dir, "estimates.csv")
            .lines()
            .filter(|l| l.starts_with("2SLS,") && (l.contains(",W") || l.contains("xW")))
            .count()
    };
    let without = tempfile::tempdir().unwrap();
    let out = run(&[
        "estimate",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        without.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    // W1, W2, X1xW1, X1xW2, X2xW1, X2xW2
    assert_eq!(count_endog(without.path()), 6);

    let with = tempfile::tempdir().unwrap();
    let out = run(&[
        "estimate",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        with.path().to_str().unwrap(),
        "--include-lambda",
    ]);
    assert!(out.status.success());
    // Adds W1xXbar1, W1xXbar2, W2xXbar1, W2xXbar2.
    assert_eq!(count_endog(with.path()), 10);
}

#[test]
fn missing_data_directory_is_a_data_error() {
    let out = run(&[
        "estimate",
        "--data",
        "/nonexistent-dir",
        "--out",
        "/tmp/x-est",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["synth", "--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_cells_value_is_a_usage_error() {
    let data = tempfile::tempdir().unwrap();
    synth_into(data.path(), &[]);
    let out = run(&[
        "reallocate",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        "/tmp/x-re",
        "--cells",
        "galaxy",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diagnose_skips_attribute_missing_everywhere() {
    let data = tempfile::tempdir().unwrap();
    synth_into(data.path(), &[]);
    // Blank out teacher aux2 entirely.
    let text = read(data.path(), "teachers.csv");
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    for line in lines.iter_mut().skip(1) {
        let mut fields: Vec<&str> = line.split(',').collect();
        fields[4] = "";
        *line = fields.join(",");
    }
    std::fs::write(data.path().join("teachers.csv"), lines.join("\n") + "\n").unwrap();

    let out_dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "diagnose",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        out_dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.code() == Some(0) || out.status.code() == Some(4));
    let text = read(out_dir.path(), "diagnostics.csv");
    let aux2_line = text
        .lines()
        .find(|l| l.contains("d_teacher_aux2"))
        .expect("aux2 report present");
    assert!(aux2_line.contains("skipped"), "line: {aux2_line}");
}

#[test]
fn bootstrap_two_replications_flagged_low_b() {
    let data = tempfile::tempdir().unwrap();
    synth_into(data.path(), &[]);
    let out_dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "bootstrap",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        out_dir.path().to_str().unwrap(),
        "--replications",
        "2",
        "--seed",
        "5",
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = read(out_dir.path(), "posterior.csv");
    for line in text.lines().skip(1) {
        assert!(line.ends_with(",true"), "low_b expected: {line}");
    }
}

#[test]
fn bootstrap_serial_and_parallel_outputs_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_into(&data, &[]);
    let serial_cfg = dir.path().join("serial.toml");
    std::fs::write(&serial_cfg, "[bootstrap]\nparallel = false\n").unwrap();

    let a = dir.path().join("serial");
    let out = run(&[
        "bootstrap",
        "--config",
        serial_cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        a.to_str().unwrap(),
        "--replications",
        "40",
        "--seed",
        "9",
    ]);
    assert!(out.status.success());

    let b = dir.path().join("parallel");
    let out = run(&[
        "bootstrap",
        "--data",
        data.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
        "--replications",
        "40",
        "--seed",
        "9",
    ]);
    assert!(out.status.success());
    assert_eq!(read(&a, "posterior.csv"), read(&b, "posterior.csv"));
}

#[test]
fn reallocate_emits_plans_ares_and_shares() {
    let data = tempfile::tempdir().unwrap();
    synth_into(data.path(), &[]);
    let out_dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "reallocate",
        "--data",
        data.path().to_str().unwrap(),
        "--out",
        out_dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    for f in [
        "plan_optimal.csv",
        "plan_worst.csv",
        "are_report.csv",
        "assortativeness.csv",
        "manifest.toml",
    ] {
        assert!(out_dir.path().join(f).exists(), "{f} missing");
    }
    // Optimal-vs-status-quo and optimal-vs-worst overall gains, ordered.
    let text = read(out_dir.path(), "are_report.csv");
    let gain = |comparison: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(comparison) && l.contains(",all,false"))
            .and_then(|l| l.split(',').nth(3))
            .and_then(|v| v.parse().ok())
            .unwrap()
    };
    let vs_sq = gain("optimal_vs_status_quo");
    let vs_worst = gain("optimal_vs_worst");
    assert!(vs_sq >= 0.0);
    assert!(vs_worst >= vs_sq);
}

#[test]
fn toy_are_reproduces_reference_density() {
    let out_dir = tempfile::tempdir().unwrap();
    let out = run(&["toy-are", "--out", out_dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let text = read(out_dir.path(), "toy_density.csv");
    for expected in [
        "0,0/1,1/4",
        "0,1/2,1/6",
        "0,1/1,1/12",
        "1,0/1,1/12",
        "1,1/2,1/6",
        "1,1/1,1/4",
    ] {
        assert!(text.contains(expected), "missing row {expected}");
    }
    let feas = read(out_dir.path(), "toy_feasibility.csv");
    assert!(feas.contains("random,true,0"));
    assert!(feas.contains("tilted,true,0"));
    // Separable surface: reallocation effects vanish.
    let are = read(out_dir.path(), "toy_are.csv");
    let value = |rule: &str| -> f64 {
        are.lines()
            .find(|l| l.starts_with(&format!("separable,{rule}")))
            .and_then(|l| l.split(',').nth(2))
            .and_then(|v| v.parse().ok())
            .unwrap()
    };
    assert!((value("random") - value("tilted")).abs() < 1e-12);
    assert!((value("best_deterministic") - value("worst_deterministic")).abs() < 1e-12);
}

#[test]
fn benchmark_vam_emits_reference_values() {
    let out_dir = tempfile::tempdir().unwrap();
    let out = run(&["benchmark-vam", "--out", out_dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let text = read(out_dir.path(), "vam_benchmarks.csv");
    let effects: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert!((effects[0] - 0.015).abs() < 0.001);
    assert!((effects[1] - 0.026).abs() < 0.001);
    assert!((effects[2] - 0.021).abs() < 0.001);
}

#[test]
fn manifest_records_seed_and_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), &[]);
    let manifest = read(dir.path(), "manifest.toml");
    assert!(manifest.contains("subcommand = \"synth\""));
    assert!(manifest.contains("seed = 11"));
    assert!(manifest.contains("config_sha256 = \""));
    assert!(manifest.contains("tool_version = \""));
}

#[test]
fn analysis_outputs_reproducible_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_into(&data, &[]);

    let est_a = dir.path().join("est_a");
    let est_b = dir.path().join("est_b");
    for out in [&est_a, &est_b] {
        let r = run(&[
            "estimate",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--dump-design",
        ]);
        assert!(r.status.success());
    }
    for f in ["estimates.csv", "fit_stats.csv", "first_stage.csv", "design_matrix.csv"] {
        assert_eq!(read(&est_a, f), read(&est_b, f), "{f} differs");
    }

    let re_a = dir.path().join("re_a");
    let re_b = dir.path().join("re_b");
    for out in [&re_a, &re_b] {
        let r = run(&[
            "reallocate",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(r.status.success());
    }
    for f in ["plan_optimal.csv", "plan_worst.csv", "are_report.csv", "assortativeness.csv"] {
        assert_eq!(read(&re_a, f), read(&re_b, f), "{f} differs");
    }
}

#[test]
fn bootstrap_can_dump_draws() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_into(&data, &[]);
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "[bootstrap]\ndump_draws = true\n").unwrap();
    let out_dir = dir.path().join("boot");
    let out = run(&[
        "bootstrap",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--replications",
        "5",
        "--seed",
        "2",
    ]);
    assert!(out.status.success());
    let draws = read(&out_dir, "posterior_draws.csv");
    assert!(draws.lines().next().unwrap().starts_with("statistic,replication,value"));
    // Five replications per tracked statistic.
    let n_stats = read(&out_dir, "posterior.csv").lines().count() - 1;
    assert_eq!(draws.lines().count() - 1, 5 * n_stats);
}
