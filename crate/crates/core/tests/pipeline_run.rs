use std::path::Path;

use prix_core::classifier::Variant;
use prix_core::evaluation::Granularity;
use prix_core::pipeline::{run_all, PipelineConfig, PipelineError};
use prix_core::synth::{generate, SynthConfig};

fn write_corpus(dir: &Path) {
    let corpus = generate(&SynthConfig {
        docs_per_class: vec![4; 3],
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    corpus.write(dir).unwrap();
    // split the index in two files to exercise globbing
    let index = std::fs::read_to_string(dir.join("index.tsv")).unwrap();
    let (a, b): (Vec<&str>, Vec<&str>) = index.lines().partition(|l| l.starts_with("d000"));
    std::fs::create_dir_all(dir.join("pages")).unwrap();
    std::fs::write(dir.join("pages/part1.tsv"), a.join("\n")).unwrap();
    std::fs::write(dir.join("pages/part2.tsv"), b.join("\n")).unwrap();
}

fn config_text() -> &'static str {
    r#"
seed = 11
[input]
index = ["pages/*.tsv"]
manifest = "manifest.tsv"
strict = true
[features]
n = 16
[loo]
n_grid = [8, 16]
archs = ["mlp0"]
epochs = 5
granularities = ["document", "page-voted"]
"#
}

#[test]
fn run_all_from_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let config_path = dir.path().join("run.toml");
    std::fs::write(&config_path, config_text()).unwrap();
    let config = PipelineConfig::load(&config_path).unwrap();
    let out = dir.path().join("out");
    let summary = run_all(&config, &out).unwrap();

    assert_eq!(summary.results.len(), 4);
    assert!(summary.results.iter().all(|r| r.arch == Variant::Mlp0));
    assert_eq!(
        summary.results.iter().filter(|r| r.granularity == Granularity::PageVoted).count(),
        2
    );
    for f in [
        "collection.json",
        "expectations.json",
        "feature_spec.json",
        "vectors.tsv",
        "run_manifest.json",
        "report/results.json",
        "report/curve_document.tsv",
        "report/curve_page-voted.tsv",
        "report/confusion_document_mlp0_8.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 3);
    assert!(manifest["outputs"]["report"].as_array().unwrap().len() > 3);
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn missing_manifest_names_stage_and_path() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    std::fs::remove_file(dir.path().join("manifest.tsv")).unwrap();
    let config_path = dir.path().join("run.toml");
    std::fs::write(&config_path, config_text()).unwrap();
    let config = PipelineConfig::load(&config_path).unwrap();
    let err = run_all(&config, &dir.path().join("out")).unwrap_err();
    assert!(matches!(err, PipelineError::Stage { stage: "ingest", .. }));
    let msg = err.to_string();
    assert!(msg.contains("ingest") && msg.contains("manifest.tsv"), "{msg}");
}

#[test]
fn bad_config_is_rejected_before_any_stage() {
    assert!(PipelineConfig::from_toml("seed = \"x\"").is_err());
    let c = PipelineConfig::from_toml("[input]\nindex = [\"a\"]\n").unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run_all(&c, dir.path()), Err(PipelineError::Config(_))));
}
