//! Synthetic probabilistic-index collections with known ground truth.
//!
//! Each class owns a set of signature words that only ever appear in its own
//! documents; every page also carries Zipf-distributed filler words shared by
//! all classes. True word occurrences become spots with relevance
//! probabilities drawn from `rp_model.true_hit`. Each page additionally has a
//! number of noise slots; each slot emits, with probability
//! `rp_model.false_spot_rate`, a false spot of a word drawn uniformly from the
//! whole vocabulary, with probability drawn from `rp_model.false_spot`.
//!
//! [`PlainTextOracle`] reruns the classical text pipeline on the true texts
//! with integer counts. It shares no code with the expectation and feature
//! modules and is used to check that the probabilistic pipeline reduces to it
//! when every probability is 1 and there are no false spots.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{self, init_model, MlpArchitecture};
use crate::evaluation::{Granularity, LooConfig, LooResult, Prediction};
use crate::ingest::{DocumentManifest, ManifestDocument, PrixPage, PrixRecord};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible config: {0}")]
    Infeasible(String),
    #[error("config: {0}")]
    Config(#[from] toml::de::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
    #[error(transparent)]
    Classifier(#[from] crate::classifier::ClassifierError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RpDistribution {
    Fixed { value: f64 },
    Beta { a: f64, b: f64 },
}

impl RpDistribution {
    fn validate(&self, what: &str) -> Result<()> {
        match *self {
            RpDistribution::Fixed { value } if !(value > 0.0 && value <= 1.0) => Err(
                SynthError::Infeasible(format!("{what}: fixed probability {value} not in (0,1]")),
            ),
            RpDistribution::Beta { a, b } if !(a > 0.0 && b > 0.0) => {
                Err(SynthError::Infeasible(format!("{what}: Beta({a},{b}) needs a, b > 0")))
            }
            _ => Ok(()),
        }
    }

    fn sampler(&self) -> RpSampler {
        match *self {
            RpDistribution::Fixed { value } => RpSampler::Fixed(value),
            RpDistribution::Beta { a, b } => RpSampler::Beta(Beta::new(a, b).expect("validated")),
        }
    }
}

enum RpSampler {
    Fixed(f64),
    Beta(Beta<f64>),
}

impl RpSampler {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            RpSampler::Fixed(v) => *v,
            // keep strictly inside (0,1]
            RpSampler::Beta(b) => b.sample(rng).clamp(1e-6, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpModel {
    pub true_hit: RpDistribution,
    pub false_spot_rate: f64,
    pub false_spot: RpDistribution,
}

impl Default for RpModel {
    fn default() -> Self {
        RpModel {
            true_hit: RpDistribution::Beta { a: 8.0, b: 2.0 },
            false_spot_rate: 0.5,
            false_spot: RpDistribution::Beta { a: 2.0, b: 8.0 },
        }
    }
}

impl RpModel {
    /// Every true word is spotted with probability 1 and nothing else is.
    pub fn noise_free() -> Self {
        RpModel {
            true_hit: RpDistribution::Fixed { value: 1.0 },
            false_spot_rate: 0.0,
            false_spot: RpDistribution::Fixed { value: 1.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub docs_per_class: Vec<usize>,
    pub pages_per_doc: (usize, usize),
    /// Per-class override of `pages_per_doc`.
    #[serde(default)]
    pub pages_per_doc_by_class: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    pub class_labels: Option<Vec<String>>,
    /// Filler (non-signature) true words per page.
    pub words_per_page: (usize, usize),
    /// Total vocabulary, signature words included.
    pub vocab_size: usize,
    pub signatures_per_class: usize,
    /// Probability that a given signature word of the class appears on a page.
    pub signature_prob: f64,
    pub noise_words_per_page: (usize, usize),
    #[serde(default)]
    pub rp_model: RpModel,
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_zipf() -> f64 {
    1.0
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 3,
            docs_per_class: vec![8, 8, 8],
            pages_per_doc: (1, 4),
            pages_per_doc_by_class: None,
            class_labels: None,
            words_per_page: (30, 60),
            vocab_size: 400,
            signatures_per_class: 5,
            signature_prob: 0.6,
            noise_words_per_page: (0, 10),
            rp_model: RpModel::default(),
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Class structure mirroring the two notarial books: 14 classes with
    /// 557 documents, and per-class page ranges.
    pub fn table1_like() -> Self {
        let labels = [
            "P", "CP", "O", "A", "T", "V", "R", "CEN", "DP", "D", "C", "TH", "RED", "OTHER",
        ];
        let docs = vec![240, 73, 44, 32, 29, 21, 17, 12, 10, 10, 6, 6, 1, 56];
        let pages = vec![
            (2, 24),
            (2, 30),
            (2, 32),
            (2, 16),
            (4, 48),
            (4, 122),
            (4, 4),
            (2, 26),
            (2, 8),
            (2, 4),
            (2, 14),
            (4, 8),
            (12, 12),
            (2, 70),
        ];
        SynthConfig {
            num_classes: 14,
            docs_per_class: docs,
            pages_per_doc: (2, 122),
            pages_per_doc_by_class: Some(pages),
            class_labels: Some(labels.iter().map(|s| s.to_string()).collect()),
            words_per_page: (20, 40),
            vocab_size: 2000,
            signatures_per_class: 5,
            signature_prob: 0.3,
            noise_words_per_page: (0, 10),
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Infeasible(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.docs_per_class.len() != self.num_classes {
            return bad(format!(
                "docs_per_class has {} entries for {} classes",
                self.docs_per_class.len(),
                self.num_classes
            ));
        }
        if self.docs_per_class.contains(&0) {
            return bad("every class needs at least one document".to_string());
        }
        let ranges = self
            .pages_per_doc_by_class
            .clone()
            .unwrap_or_else(|| vec![self.pages_per_doc; self.num_classes]);
        if ranges.len() != self.num_classes {
            return bad("pages_per_doc_by_class length differs from num_classes".to_string());
        }
        for (lo, hi) in ranges.iter().chain([&self.pages_per_doc]) {
            if *lo == 0 || lo > hi {
                return bad(format!("bad pages-per-document range ({lo}, {hi})"));
            }
        }
        for (name, (lo, hi)) in [
            ("words_per_page", self.words_per_page),
            ("noise_words_per_page", self.noise_words_per_page),
        ] {
            if lo > hi {
                return bad(format!("{name}: min {lo} > max {hi}"));
            }
        }
        if let Some(labels) = &self.class_labels {
            let unique: BTreeSet<&String> = labels.iter().collect();
            if labels.len() != self.num_classes || unique.len() != labels.len() {
                return bad("class_labels must be unique, one per class".to_string());
            }
        }
        let signatures = self.num_classes * self.signatures_per_class;
        if signatures >= self.vocab_size {
            return bad(format!(
                "{signatures} signature words leave no filler words in a vocabulary of {}",
                self.vocab_size
            ));
        }
        if !(0.0..=1.0).contains(&self.signature_prob) {
            return bad(format!("signature_prob {} not in [0,1]", self.signature_prob));
        }
        if !(0.0..=1.0).contains(&self.rp_model.false_spot_rate) {
            return bad(format!(
                "false_spot_rate {} not in [0,1]",
                self.rp_model.false_spot_rate
            ));
        }
        if !(self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be >= 0".to_string());
        }
        self.rp_model.true_hit.validate("true_hit")?;
        self.rp_model.false_spot.validate("false_spot")
    }

    fn labels(&self) -> Vec<String> {
        self.class_labels
            .clone()
            .unwrap_or_else(|| (0..self.num_classes).map(|c| format!("c{c:02}")).collect())
    }
}

pub fn signature_word(class: usize, k: usize) -> String {
    format!("sig{class:02}x{k:02}")
}

pub fn filler_word(i: usize) -> String {
    format!("w{i:05}")
}

/// A generated collection: index pages, manifest and true page texts.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub pages: Vec<PrixPage>,
    pub manifest: DocumentManifest,
    /// `(page_id, words)` in manifest order.
    pub texts: Vec<(String, Vec<String>)>,
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    // separate streams: texts, true-hit probabilities, false spots; changing
    // the noise settings leaves the texts untouched
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut hit_rng = ChaCha8Rng::seed_from_u64(config.seed);
    hit_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(2);
    let labels = config.labels();
    let signatures: Vec<Vec<String>> = (0..config.num_classes)
        .map(|c| (0..config.signatures_per_class).map(|k| signature_word(c, k)).collect())
        .collect();
    let num_filler = config.vocab_size - config.num_classes * config.signatures_per_class;
    let filler: Vec<String> = (0..num_filler).map(filler_word).collect();
    let vocabulary: Vec<&String> = signatures.iter().flatten().chain(&filler).collect();
    let zipf = Zipf::new(num_filler as f64, config.zipf_exponent)
        .map_err(|e| SynthError::Infeasible(format!("zipf: {e}")))?;
    let true_rp = config.rp_model.true_hit.sampler();
    let false_rp = config.rp_model.false_spot.sampler();
    let ranges = config
        .pages_per_doc_by_class
        .clone()
        .unwrap_or_else(|| vec![config.pages_per_doc; config.num_classes]);

    let mut documents = Vec::new();
    let mut pages = Vec::new();
    let mut texts = Vec::new();
    let mut doc_no = 0usize;
    for (class, &count) in config.docs_per_class.iter().enumerate() {
        for _ in 0..count {
            let doc_id = format!("d{doc_no:04}");
            doc_no += 1;
            let (lo, hi) = ranges[class];
            let num_pages = rng.random_range(lo..=hi);
            let mut page_ids = Vec::with_capacity(num_pages);
            for p in 0..num_pages {
                let page_id = format!("{doc_id}p{p:03}");
                let mut words: Vec<String> = Vec::new();
                let num_filler_words =
                    rng.random_range(config.words_per_page.0..=config.words_per_page.1);
                for _ in 0..num_filler_words {
                    let rank = zipf.sample(&mut rng) as usize;
                    words.push(filler[rank.clamp(1, num_filler) - 1].clone());
                }
                for sig in &signatures[class] {
                    if rng.random_bool(config.signature_prob) {
                        words.push(sig.clone());
                    }
                }
                words.shuffle(&mut rng);

                let mut records: Vec<PrixRecord> = words
                    .iter()
                    .map(|w| PrixRecord::new(w, true_rp.sample(&mut hit_rng)).expect("valid spot"))
                    .collect();
                let slots = noise_rng
                    .random_range(config.noise_words_per_page.0..=config.noise_words_per_page.1);
                for _ in 0..slots {
                    if noise_rng.random_bool(config.rp_model.false_spot_rate) {
                        let w = vocabulary[noise_rng.random_range(0..vocabulary.len())];
                        records.push(PrixRecord::new(w, false_rp.sample(&mut noise_rng)).expect("valid spot"));
                    }
                }
                pages.push(PrixPage {
                    page_id: page_id.clone(),
                    records,
                });
                texts.push((page_id.clone(), words));
                page_ids.push(page_id);
            }
            documents.push(ManifestDocument {
                doc_id,
                class_label: labels[class].clone(),
                page_ids,
            });
        }
    }
    let manifest = DocumentManifest::new(documents, labels)?;
    Ok(SynthCorpus {
        pages,
        manifest,
        texts,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFiles {
    pub index: PathBuf,
    pub manifest: PathBuf,
    pub texts: PathBuf,
}

pub const INDEX_FILE: &str = "index.tsv";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TEXTS_FILE: &str = "texts.tsv";

impl SynthCorpus {
    /// Writes `index.tsv`, `manifest.tsv` and `texts.tsv`
    /// (`page_id<TAB>space-separated words`).
    pub fn write(&self, dir: &Path) -> Result<CorpusFiles> {
        fs::create_dir_all(dir).map_err(|source| SynthError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let files = CorpusFiles {
            index: dir.join(INDEX_FILE),
            manifest: dir.join(MANIFEST_FILE),
            texts: dir.join(TEXTS_FILE),
        };
        let mut index = String::from("# page_id\tpseudo_word\trelevance_prob\n");
        index.push_str(&crate::ingest::write_prix_string(&self.pages));
        write(&files.index, &index)?;
        write(&files.manifest, &self.manifest.to_tsv())?;
        write(&files.texts, &texts_to_tsv(&self.texts))?;
        Ok(files)
    }
}

pub fn texts_to_tsv(texts: &[(String, Vec<String>)]) -> String {
    let mut out = String::new();
    for (page, words) in texts {
        writeln!(out, "{page}\t{}", words.join(" ")).unwrap();
    }
    out
}

pub fn parse_texts(text: &str) -> Vec<(String, Vec<String>)> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (page, words) = l.split_once('\t').unwrap_or((l, ""));
            (
                page.to_string(),
                words.split_whitespace().map(String::from).collect(),
            )
        })
        .collect()
}

pub fn load_texts(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    Ok(parse_texts(&read(path)?))
}

/// Classical bag-of-words pipeline over true texts with integer counts.
#[derive(Debug, Clone)]
pub struct PlainTextOracle {
    classes: Vec<String>,
    doc_ids: Vec<String>,
    doc_class: Vec<usize>,
    /// Word counts per document.
    counts: Vec<HashMap<String, usize>>,
}

/// Per-fold output of the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFold {
    /// Pruned words ranked by information gain (best first) with scores.
    pub ranking: Vec<(String, f64)>,
    /// Raw (unstandardized) tf-idf vectors of every document at the largest n,
    /// in manifest order, held-out document included.
    pub raw_vectors: Vec<Vec<f64>>,
    pub idf: Vec<f64>,
}

impl PlainTextOracle {
    pub fn new(texts: &[(String, Vec<String>)], manifest: &DocumentManifest) -> Self {
        let by_page: HashMap<&str, &Vec<String>> =
            texts.iter().map(|(p, w)| (p.as_str(), w)).collect();
        let mut counts = Vec::new();
        let mut doc_class = Vec::new();
        let mut doc_ids = Vec::new();
        for d in manifest.documents() {
            let mut c: HashMap<String, usize> = HashMap::new();
            for p in &d.page_ids {
                for w in by_page.get(p.as_str()).into_iter().flat_map(|v| v.iter()) {
                    *c.entry(w.to_lowercase()).or_default() += 1;
                }
            }
            counts.push(c);
            doc_class.push(manifest.class_index(&d.class_label).expect("valid manifest"));
            doc_ids.push(d.doc_id.clone());
        }
        PlainTextOracle {
            classes: manifest.classes().to_vec(),
            doc_ids,
            doc_class,
            counts,
        }
    }

    /// Ranking, idf and raw vectors with document `held_out` (if any) removed
    /// from every statistic.
    pub fn fold(&self, held_out: Option<usize>, min_chars: usize, min_doc_freq: f64, n: usize) -> OracleFold {
        let train: Vec<usize> = (0..self.counts.len()).filter(|&d| Some(d) != held_out).collect();
        let m = train.len();
        let num_classes = self.classes.len();
        let mut class_size = vec![0usize; num_classes];
        let mut df: HashMap<&str, usize> = HashMap::new();
        let mut class_df: HashMap<&str, Vec<usize>> = HashMap::new();
        for &d in &train {
            class_size[self.doc_class[d]] += 1;
            for w in self.counts[d].keys() {
                *df.entry(w).or_default() += 1;
                class_df.entry(w).or_insert_with(|| vec![0; num_classes])[self.doc_class[d]] += 1;
            }
        }
        let kept: BTreeSet<&str> = df
            .iter()
            .filter(|(w, &f)| w.chars().count() >= min_chars && f as f64 >= min_doc_freq)
            .map(|(w, _)| *w)
            .collect();

        let mut ranking: Vec<(String, f64)> = kept
            .iter()
            .map(|w| {
                let f_t = df[w] as f64;
                let total = m as f64;
                let mut h_with = 0.0;
                let mut h_without = 0.0;
                for c in 0..num_classes {
                    let f_ct = class_df[w][c] as f64;
                    let p = f_ct / f_t;
                    if p > 0.0 {
                        h_with += p * p.ln();
                    }
                    if total - f_t > 0.0 {
                        let q = (class_size[c] as f64 - f_ct) / (total - f_t);
                        if q > 0.0 {
                            h_without += q * q.ln();
                        }
                    }
                }
                let ig = (f_t / total) * h_with + ((total - f_t) / total) * h_without;
                (w.to_string(), ig)
            })
            .collect();
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let selected: Vec<&str> = ranking.iter().take(n).map(|(w, _)| w.as_str()).collect();
        let idf: Vec<f64> = selected
            .iter()
            .map(|w| (m as f64 / df[w] as f64).ln())
            .collect();
        let raw_vectors = self
            .counts
            .iter()
            .map(|c| {
                let total: usize = c
                    .iter()
                    .filter(|(w, _)| kept.contains(w.as_str()))
                    .map(|(_, n)| n)
                    .sum();
                selected
                    .iter()
                    .zip(&idf)
                    .map(|(w, idf)| {
                        if total == 0 {
                            0.0
                        } else {
                            (c.get(*w).copied().unwrap_or(0) as f64 / total as f64) * idf
                        }
                    })
                    .collect()
            })
            .collect();
        OracleFold {
            ranking,
            raw_vectors,
            idf,
        }
    }

    /// Document-level leave-one-out with the same classifier, seeds and
    /// training order as [`crate::evaluation::loo_documents`].
    pub fn loo_documents(&self, config: &LooConfig) -> Result<Vec<LooResult>> {
        let n_max = config.n_grid.iter().copied().max().unwrap_or(1);
        let num_docs = self.counts.len();
        let mut per_fold = Vec::with_capacity(num_docs);
        for held in 0..num_docs {
            let fold = self.fold(Some(held), config.rules.min_chars, config.rules.min_doc_freq, n_max);
            let dim_max = fold.idf.len();
            let train_docs: Vec<usize> = (0..num_docs).filter(|&d| d != held).collect();
            // population mean / stddev over the training documents
            let mut mean = vec![0.0; dim_max];
            let mut stats_docs: Vec<usize> = train_docs.clone();
            if config.frozen_standardizer {
                stats_docs.push(held);
            }
            for &d in &stats_docs {
                for (j, x) in fold.raw_vectors[d].iter().enumerate() {
                    mean[j] += x;
                }
            }
            let count = stats_docs.len() as f64;
            for v in &mut mean {
                *v /= count;
            }
            let mut sd = vec![0.0; dim_max];
            for &d in &stats_docs {
                for (j, x) in fold.raw_vectors[d].iter().enumerate() {
                    sd[j] += (x - mean[j]) * (x - mean[j]);
                }
            }
            for v in &mut sd {
                *v = (*v / count).sqrt();
                if *v <= 0.0 {
                    *v = 1.0;
                }
            }
            let standardize = |d: usize| -> Vec<f64> {
                fold.raw_vectors[d]
                    .iter()
                    .enumerate()
                    .map(|(j, x)| (x - mean[j]) / sd[j])
                    .collect()
            };
            let mut outcome = Vec::new();
            for &n in &config.n_grid {
                let dim = n.min(dim_max);
                let train: Vec<(Vec<f64>, usize)> = train_docs
                    .iter()
                    .map(|&d| (standardize(d)[..dim].to_vec(), self.doc_class[d]))
                    .collect();
                let test = standardize(held)[..dim].to_vec();
                for &arch in &config.archs {
                    let seed = config
                        .experiment_seed(Granularity::Document, arch, n)
                        .wrapping_add(held as u64);
                    let architecture = MlpArchitecture::new(arch, dim, self.classes.len())
                        .with_hidden_width(config.hidden_width);
                    let run = classifier::train(init_model(architecture, seed), &train, &config.train_config(seed))?;
                    outcome.push(run.model.predict(&test)?);
                }
            }
            per_fold.push((dim_max, outcome));
        }
        let mut results = Vec::new();
        for (ni, &n) in config.n_grid.iter().enumerate() {
            let n_effective = per_fold.iter().map(|(d, _)| n.min(*d)).min().unwrap_or(n);
            for (ai, &arch) in config.archs.iter().enumerate() {
                let idx = ni * config.archs.len() + ai;
                let predictions = per_fold
                    .iter()
                    .enumerate()
                    .map(|(d, (_, o))| Prediction {
                        unit_id: self.doc_ids[d].clone(),
                        true_class: self.doc_class[d],
                        predicted_class: o[idx].0,
                        posterior: o[idx].1.clone(),
                    })
                    .collect();
                results.push(LooResult::from_predictions(
                    Granularity::Document,
                    arch,
                    n,
                    n_effective,
                    predictions,
                    self.classes.len(),
                ));
            }
        }
        results.sort_by(|a, b| (a.arch, a.n).cmp(&(b.arch, b.n)));
        Ok(results)
    }
}
