mod common;

use std::path::Path;
use std::process::Command;

use ehr_lift::io::sha256_file;
use ehr_lift::pipeline::{run_pipeline, run_stage, RunConfig, RunManifest, Stage, Table1};
use ehr_lift::synth::{synthesize, SynthConfig};

const SMALL: &str = r#"
cancer_types = ["pancreas"]
models = ["gbdt", "logreg"]
seed = 5
bootstrap_resamples = 100

[gbdt]
trees = 20
max_depth = 3

[synth]
persons = 3000
"#;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn small_synthetic_run_is_complete_and_consistent() {
    let config = RunConfig::parse(SMALL).unwrap();
    let out = tempfile::tempdir().unwrap();
    let manifest = run_pipeline(&config, out.path()).unwrap();

    assert!(manifest.is_acyclic());
    let names: Vec<&str> = manifest.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(names, ["synth", "cohort", "train", "evaluate", "report"]);
    assert_eq!(manifest.config_hash, config.hash());
    for (file, sum) in &manifest.checksums {
        assert_eq!(&sha256_file(&out.path().join(file)).unwrap(), sum, "{file}");
    }

    // Two planted risk factors against two models.
    let table: Table1 = read_json(&out.path().join("report/table1.json"));
    assert_eq!(table.rows.len(), 4);
    for row in &table.rows {
        assert_eq!(row.significant_ehr, row.p_ehr.is_some_and(|p| p < 0.05));
    }
    let csv = std::fs::read_to_string(out.path().join("report/table1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn unknown_cancer_type_fails_before_any_output() {
    let data = tempfile::tempdir().unwrap();
    let synth = SynthConfig { persons: 400, ..Default::default() };
    let manifest = synthesize(&synth).unwrap().write(data.path()).unwrap();

    let config = RunConfig::parse(&format!(
        "manifest = {:?}\ncancer_types = [\"lung\"]\n",
        manifest.to_str().unwrap()
    ))
    .unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = run_pipeline(&config, out.path()).unwrap_err().to_string();
    assert!(err.starts_with("[cohort]"), "{err}");
    assert!(err.contains("lung"), "{err}");
    assert_eq!(std::fs::read_dir(out.path()).unwrap().count(), 0);
}

#[test]
fn rerunning_a_stage_reproduces_its_outputs() {
    let config = RunConfig::parse(SMALL).unwrap();
    let out = tempfile::tempdir().unwrap();
    let first = run_pipeline(&config, out.path()).unwrap();
    run_stage(&config, out.path(), Stage::Train).unwrap();
    run_stage(&config, out.path(), Stage::Evaluate).unwrap();
    let second = RunManifest::read(out.path()).unwrap();
    assert_eq!(first.checksums, second.checksums);
}

#[test]
fn external_dataset_from_checked_in_fixture_loads_through_the_pipeline() {
    // Too small to train on, but the cohort stage runs and counts the drops.
    let manifest = common::fixture_dir("tiny").join("manifest.toml");
    let config = RunConfig::parse(&format!(
        "manifest = {:?}\ncancer_types = [\"pancreas\"]\nmin_conditions = 1\n",
        manifest.to_str().unwrap()
    ))
    .unwrap();
    let out = tempfile::tempdir().unwrap();
    run_stage(&config, out.path(), Stage::Cohort).unwrap();
    let summary: serde_json::Value = read_json(&out.path().join("cohort/summary.json"));
    assert_eq!(summary["load"]["duplicates"], 1);
    assert_eq!(summary["load"]["unknown_concept"], 1);
    assert_eq!(summary["cases_identified"], 1);

    let err = run_pipeline(&config, out.path()).unwrap_err().to_string();
    assert!(err.starts_with("[train]"), "{err}");
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ehr-lift"))
}

#[test]
fn cli_runs_all_stages_and_reports_stage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, SMALL).unwrap();
    let out = dir.path().join("out");

    let status = cli()
        .args(["all", "--jobs", "2", "--seed", "9", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let manifest = RunManifest::read(&out).unwrap();
    assert_eq!(manifest.seed, 9);
    assert!(out.join("report/table1.csv").is_file());

    // Training into an empty directory fails in the train stage.
    let empty = dir.path().join("empty");
    let result = cli()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&empty)
        .output()
        .unwrap();
    assert!(!result.status.success());
    let stderr = String::from_utf8(result.stderr).unwrap();
    assert!(stderr.starts_with("ehr-lift: [train]"), "{stderr}");

    let result = cli().arg("report").output().unwrap();
    assert!(!result.status.success());
    assert!(String::from_utf8(result.stderr).unwrap().contains("--config"));
}
