//! End-to-end runs driven by a TOML config.
//!
//! ```toml
//! seed = 7
//!
//! [input]
//! index = ["pages/*.tsv"]     # globs, relative to the config file
//! manifest = "manifest.tsv"
//! strict = false
//! # or generate a corpus instead:
//! # [input.synth]
//! # num_classes = 3
//! # ...
//!
//! [features]
//! n = 1024
//!
//! [loo]
//! n_grid = [8, 16, 32]
//! archs = ["mlp0", "mlp1"]
//! granularities = ["document", "page", "page-voted"]
//! ```
//!
//! Outputs never contain thread counts, and only `run_manifest.json` carries
//! timestamps, so every other file is byte-identical across runs of the same
//! config whatever the worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evaluation::{self, Granularity, LooConfig, LooResult};
use crate::expectation::{build_expectation_table, ExpectationTable};
use crate::features::{fit_feature_spec, PruneRules};
use crate::ingest::{self, Collection};
use crate::seed;
use crate::synth::{self, SynthConfig};

pub const THREADS_ENV: &str = "PRIX_THREADS";

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: BoxError,
    },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<BoxError>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| PipelineError::Stage {
            stage,
            source: e.into(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputConfig {
    pub index: Vec<String>,
    pub manifest: Option<PathBuf>,
    pub strict: bool,
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    #[serde(flatten)]
    pub rules: PruneRules,
    pub n: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            rules: PruneRules::default(),
            n: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LooSection {
    #[serde(flatten)]
    pub config: LooConfig,
    pub granularities: Vec<Granularity>,
}

impl Default for LooSection {
    fn default() -> Self {
        LooSection {
            config: LooConfig::default(),
            granularities: vec![Granularity::Document],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; `None` defers to `PRIX_THREADS`, then to all cores.
    pub threads: Option<usize>,
    pub input: InputConfig,
    pub features: FeatureConfig,
    pub loo: LooSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Loads a config and resolves relative input paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for pattern in &mut self.input.index {
            if Path::new(pattern.as_str()).is_relative() {
                *pattern = base.join(&*pattern).to_string_lossy().into_owned();
            }
        }
        if let Some(m) = &mut self.input.manifest {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        match (&self.input.synth, self.input.index.is_empty(), &self.input.manifest) {
            (Some(_), true, None) => {}
            (None, false, Some(_)) => {}
            (Some(_), _, _) => return bad("give either [input.synth] or index + manifest, not both"),
            (None, _, _) => return bad("input needs index globs and a manifest"),
        }
        if self.loo.granularities.is_empty() {
            return bad("loo.granularities is empty");
        }
        if self.threads == Some(0) {
            return bad("threads must be positive");
        }
        Ok(())
    }
}

/// Worker count: explicit value, then `PRIX_THREADS`, then rayon's default.
pub fn resolve_threads(explicit: Option<usize>) -> Option<usize> {
    explicit.or_else(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .filter(|&n| n > 0)
    })
}

/// Runs `f` on a dedicated pool of `threads` workers (or the global pool).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match resolve_threads(threads) {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Expands index globs into a sorted, de-duplicated file list.
pub fn index_files(index: &[String]) -> ingest::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for pattern in index {
        files.extend(ingest::expand_glob(pattern)?);
    }
    files.sort();
    files.dedup();
    Ok(files)
}

/// Parses every index file and joins the pages with the manifest.
pub fn ingest_stage(index: &[String], manifest: &Path, strict: bool) -> ingest::Result<Collection> {
    let pages = ingest::parse_prix_files(&index_files(index)?)?;
    let manifest = ingest::parse_manifest(manifest)?;
    let (collection, _report) = ingest::validate_collection(pages, &manifest, strict)?;
    Ok(collection)
}

/// Runs every requested granularity. `page-voted` reuses the page folds.
pub fn run_loo(
    table: &ExpectationTable,
    config: &LooConfig,
    granularities: &[Granularity],
) -> evaluation::Result<Vec<LooResult>> {
    let mut results = Vec::new();
    if granularities.contains(&Granularity::Document) {
        results.extend(evaluation::loo_documents(table, config)?);
    }
    let want_page = granularities.contains(&Granularity::Page);
    let want_voted = granularities.contains(&Granularity::PageVoted);
    if want_page || want_voted {
        let pages = evaluation::loo_pages(table, config)?;
        if want_voted {
            for r in &pages {
                results.push(evaluation::vote_documents(r, table)?);
            }
        }
        if want_page {
            results.extend(pages);
        }
    }
    results.sort_by(|a, b| (a.granularity, a.arch, a.n).cmp(&(b.granularity, b.arch, b.n)));
    Ok(results)
}

pub fn vectors_tsv(spec_vectors: &[crate::features::DocVector], classes: &[String]) -> String {
    let mut out = String::new();
    for v in spec_vectors {
        let label = v.label.map(|c| classes[c].as_str()).unwrap_or("");
        let values: Vec<String> = v.values.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{}\t{}\t{}", v.doc_id, label, values.join(",")).unwrap();
    }
    out
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    config_digest: String,
    started_unix: u64,
    finished_unix: u64,
    /// `(path, sha256)` of every input file.
    inputs: Vec<(String, String)>,
    synth_seed: Option<u64>,
    config: &'a PipelineConfig,
    documents: usize,
    pages: usize,
    vocabulary: usize,
    /// `(path relative to the output directory, sha256)`, by stage.
    outputs: BTreeMap<&'static str, Vec<(String, String)>>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub results: Vec<LooResult>,
}

fn write(path: &Path, contents: &str) -> std::io::Result<()> {
    fs::write(path, contents)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Ingest, expectations, features, leave-one-out and report, into `out_dir`.
pub fn run_all(config: &PipelineConfig, out_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out_dir).stage("setup")?;
    with_threads(config.threads, || run_stages(config, out_dir))?
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn digest_files(files: &[PathBuf], base: Option<&Path>) -> Result<Vec<(String, String)>> {
    files
        .iter()
        .map(|f| {
            let bytes = fs::read(f).stage("run_manifest")?;
            let name = base.and_then(|b| f.strip_prefix(b).ok()).unwrap_or(f);
            Ok((name.to_string_lossy().into_owned(), sha256_hex(&bytes)))
        })
        .collect()
}

fn run_stages(config: &PipelineConfig, out_dir: &Path) -> Result<RunSummary> {
    let started_unix = unix_now();
    let mut synth_seed = None;
    let mut input_files = Vec::new();
    let collection = if let Some(synth_config) = &config.input.synth {
        let mut sc = synth_config.clone();
        sc.seed = seed::derive(config.seed, "synth");
        synth_seed = Some(sc.seed);
        log::info!("synth: generating corpus with seed {}", sc.seed);
        let corpus = synth::generate(&sc).stage("synth")?;
        let files = corpus.write(&out_dir.join("corpus")).stage("synth")?;
        input_files.extend([files.index.clone(), files.manifest.clone(), files.texts.clone()]);
        ingest_stage(
            &[files.index.to_string_lossy().into_owned()],
            &files.manifest,
            true,
        )
        .stage("ingest")?
    } else {
        let manifest = config.input.manifest.clone().expect("validated");
        input_files = index_files(&config.input.index).stage("ingest")?;
        input_files.push(manifest);
        ingest_stage(
            &config.input.index,
            config.input.manifest.as_deref().expect("validated"),
            config.input.strict,
        )
        .stage("ingest")?
    };
    log::info!(
        "ingest: {} documents, {} pages, {} spots",
        collection.num_documents(),
        collection.num_pages(),
        collection.num_records()
    );
    collection.save(&out_dir.join("collection.json")).stage("ingest")?;

    let table = build_expectation_table(&collection);
    log::info!("expectations: {} distinct words", table.words().len());
    table.save(&out_dir.join("expectations.json")).stage("expectations")?;

    let (spec, vectors) =
        fit_feature_spec(&table, config.features.rules, config.features.n).stage("features")?;
    log::info!("features: {} dimensions", spec.vocabulary.len());
    spec.save(&out_dir.join("feature_spec.json")).stage("features")?;
    write(&out_dir.join("vectors.tsv"), &vectors_tsv(&vectors, table.classes())).stage("features")?;

    let mut loo = config.loo.config.clone();
    loo.seed = config.seed;
    loo.rules = config.features.rules;
    let results = run_loo(&table, &loo, &config.loo.granularities).stage("loo")?;
    for r in &results {
        log::info!(
            "loo: {} {} n={} error {:.4} ± {:.4}",
            r.granularity,
            r.arch,
            r.n,
            r.error_rate,
            r.ci95_halfwidth
        );
    }
    let report_dir = out_dir.join("report");
    evaluation::write_report(&results, table.classes(), &report_dir).stage("report")?;

    let mut report_files: Vec<PathBuf> = fs::read_dir(&report_dir)
        .stage("report")?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    report_files.sort();
    let stage_files = |names: &[&str]| -> Vec<PathBuf> { names.iter().map(|f| out_dir.join(f)).collect() };
    let mut outputs = BTreeMap::new();
    outputs.insert("ingest", digest_files(&stage_files(&["collection.json"]), Some(out_dir))?);
    outputs.insert("expectations", digest_files(&stage_files(&["expectations.json"]), Some(out_dir))?);
    outputs.insert(
        "features",
        digest_files(&stage_files(&["feature_spec.json", "vectors.tsv"]), Some(out_dir))?,
    );
    outputs.insert("report", digest_files(&report_files, Some(out_dir))?);
    let mut echoed = config.clone();
    echoed.threads = None;
    let config_digest = sha256_hex(serde_json::to_string(&echoed).stage("run_manifest")?.as_bytes());
    let manifest = RunManifest {
        tool: "prix-classify",
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config_digest,
        started_unix,
        finished_unix: unix_now(),
        inputs: digest_files(&input_files, None)?,
        synth_seed,
        config: &echoed,
        documents: table.num_docs(),
        pages: collection.num_pages(),
        vocabulary: table.words().len(),
        outputs,
    };
    let text = serde_json::to_string_pretty(&manifest).stage("run_manifest")? + "\n";
    write(&out_dir.join("run_manifest.json"), &text).stage("run_manifest")?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        results,
    })
}
