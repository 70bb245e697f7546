mod common;

use std::path::Path;
use std::process::{Command, Output};

fn fars(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fars"))
        .args(args)
        .current_dir(dir)
        .env_remove("FARS_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(csv: &str) -> usize {
    csv.lines().count() - 1
}

#[test]
fn unknown_flag_exits_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    common::fixture(dir.path(), "");
    let o = fars(dir.path(), &["estimate", "--config", "fars.toml", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = fars(dir.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for cmd in ["estimate", "subsample", "scenario", "quantiles", "density", "risk", "run-unstressed", "run-stressed", "plot-data"] {
        assert!(stdout(&o).contains(cmd), "{cmd}");
    }
}

#[test]
fn missing_data_file_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    common::fixture(dir.path(), "");
    std::fs::remove_file(dir.path().join("panel.csv")).unwrap();
    let o = fars(dir.path(), &["estimate", "--config", "fars.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("panel.csv"), "{}", stderr(&o));

    let o = fars(dir.path(), &["estimate", "--config", "absent.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.toml"), "{}", stderr(&o));
}

#[test]
fn invalid_override_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    common::fixture(dir.path(), "");
    let o = fars(dir.path(), &["estimate", "--config", "fars.toml", "--alpha", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    let o = fars(dir.path(), &["estimate", "--config", "fars.toml", "--support", "3,-3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = fars(dir.path(), &["estimate", "--config", "fars.toml", "--gamma", "xyz"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn estimate_prints_factors_per_node() {
    let dir = tempfile::tempdir().unwrap();
    common::fixture(dir.path(), "");
    let o = fars(dir.path(), &["estimate", "--config", "fars.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("Factors per node"));
    assert!(text.contains("Number of periods:   80"));
    assert!(text.contains("Number of factors:   3"));
    for label in ["1-2", "1", "2"] {
        assert!(
            text.lines().any(|l| {
                let parts: Vec<&str> = l.split_whitespace().collect();
                parts == [label, "1"]
            }),
            "node {label} missing in\n{text}"
        );
    }
    assert!(text.contains("Iterations"));
    assert!(text.contains("RSS"));
    assert!(dir.path().join("fars_out/model/factors.csv").is_file());
}

#[test]
fn thread_variable_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    common::fixture(dir.path(), "");
    let o = Command::new(env!("CARGO_BIN_EXE_fars"))
        .args(["estimate", "--config", "fars.toml"])
        .current_dir(dir.path())
        .env("FARS_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_fars"))
        .args(["estimate", "--config", "fars.toml"])
        .current_dir(dir.path())
        .env("FARS_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn stage_commands_compose_and_plot_data_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    common::fixture(dir.path(), "est_points = 64\nrandom_samples = 400\nn_samples = 6");
    let cfg = ["--config", "fars.toml", "--out", "run", "--support", "-6,6"];
    for cmd in ["estimate", "subsample", "scenario", "quantiles", "density", "risk"] {
        let mut args = vec![cmd];
        args.extend(cfg);
        let o = fars(dir.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
    }
    let fars_summary = fars(dir.path(), &["risk", "--config", "fars.toml", "--out", "run"]);
    assert!(stdout(&fars_summary).contains("GiS"));

    let plot = |kind: &str| {
        let o = fars(dir.path(), &["plot-data", "--kind", kind, "--out", "run"]);
        assert_eq!(o.status.code(), Some(0), "{kind}: {}", stderr(&o));
        stdout(&o)
    };
    let factors = plot("factors");
    assert!(factors.starts_with("period,series,value\n"));
    assert_eq!(data_rows(&factors), 80 * 3);
    assert_eq!(data_rows(&plot("quantiles")), 80 * 5);
    let density = plot("density");
    assert!(density.starts_with("period,abscissa,density\n"));
    assert_eq!(data_rows(&density), 80 * 64);
    assert_eq!(data_rows(&plot("risk")), 80);

    let stressed = fars(dir.path(), &["plot-data", "--kind", "quantiles", "run/fars/stressed_quantiles.csv"]);
    assert_eq!(stressed.status.code(), Some(0));
    assert_eq!(data_rows(&stdout(&stressed)), 80 * 5);

    let mismatch = fars(dir.path(), &["plot-data", "--kind", "density", "run/model/factors.csv"]);
    assert_eq!(mismatch.status.code(), Some(1));
    let missing = fars(dir.path(), &["plot-data", "--kind", "risk", "run/nothing/risk.csv"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn numeric_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = common::fixture(dir.path(), "");
    // A structure asking for more factors than a block has variables.
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("{ blocks = [1], count = 1 }", "{ blocks = [1], count = 40 }");
    std::fs::write(&path, text).unwrap();
    let o = fars(dir.path(), &["estimate", "--config", "fars.toml"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("estimate"));
}

#[test]
fn unstressed_run_prints_all_summaries() {
    let dir = tempfile::tempdir().unwrap();
    common::fixture(dir.path(), "random_samples = 300\nest_points = 32");
    let o = fars(dir.path(), &["run-unstressed", "--config", "fars.toml", "--qtau", "0.1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for section in ["Multilevel Dynamic Factor Model", "Quantile Regressions", "Skew-t Densities", "Quantile Risk (GaR)"] {
        assert!(text.contains(section), "{section}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fars_out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["config"]["qtau"], 0.1);
}
