//! Leave-one-out evaluation at document and page granularity, page voting,
//! confusion matrices and report files.
//!
//! Each fold recomputes every fitted statistic without the held-out unit:
//! document frequencies (by subtracting the unit's cached maxima from the
//! table), pruning, the information-gain ranking, idf and the standardizer.
//! Within a fold the vocabulary for every `n` is a prefix of the ranking, and
//! tf-idf components do not depend on `n`, so the fold is vectorized once at
//! the largest `n` and sliced for smaller ones.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{self, init_model, ClassifierError, MlpArchitecture, TrainConfig, Variant};
use crate::expectation::{CorpusStats, ExpectationTable, UnitStats};
use crate::features::{
    self, prune_vocabulary, rank_vocabulary, FeatureError, PruneRules, ScoredWord, Standardizer,
    TfIdfSpace, VocabEntry,
};
use crate::seed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error("no words survive pruning in fold `{0}`")]
    EmptyVocabulary(String),
    #[error("document `{0}` has no classified pages")]
    NoPages(String),
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Document,
    Page,
    PageVoted,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::Document => "document",
            Granularity::Page => "page",
            Granularity::PageVoted => "page-voted",
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LooConfig {
    pub n_grid: Vec<usize>,
    pub archs: Vec<Variant>,
    pub rules: PruneRules,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_width: usize,
    pub seed: u64,
    /// Page folds drop the held-out page's whole document from every statistic
    /// and from training.
    pub fold_by_document: bool,
    /// Fit the standardizer on every unit of the fold, held-out unit included.
    pub frozen_standardizer: bool,
}

impl Default for LooConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        LooConfig {
            n_grid: features::default_n_grid(),
            archs: Variant::ALL.to_vec(),
            rules: PruneRules::default(),
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            hidden_width: classifier::DEFAULT_HIDDEN_WIDTH,
            seed: 0,
            fold_by_document: false,
            frozen_standardizer: false,
        }
    }
}

impl LooConfig {
    /// Base seed of one (granularity, arch, n) experiment; fold `i` adds `i`.
    pub fn experiment_seed(&self, granularity: Granularity, arch: Variant, n: usize) -> u64 {
        seed::derive(self.seed, &format!("loo/{granularity}/{arch}/{n}"))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub unit_id: String,
    pub true_class: usize,
    pub predicted_class: usize,
    pub posterior: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<usize>>,
    /// `1 - diagonal / row sum`; `None` for classes with no units.
    pub per_class_error: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn errors(&self) -> usize {
        self.total() - (0..self.counts.len()).map(|i| self.counts[i][i]).sum::<usize>()
    }

    pub fn error_rate(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.errors() as f64 / total as f64
        }
    }
}

pub fn confusion_matrix(predictions: &[Prediction], num_classes: usize) -> ConfusionMatrix {
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    for p in predictions {
        counts[p.true_class][p.predicted_class] += 1;
    }
    let per_class_error = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| 1.0 - row[i] as f64 / total as f64)
        })
        .collect();
    ConfusionMatrix {
        counts,
        per_class_error,
    }
}

/// Normal-approximation 95% half-width `1.96·sqrt(e(1-e)/N)`.
pub fn confidence_interval(error_rate: f64, num_units: usize) -> f64 {
    if num_units == 0 {
        return 0.0;
    }
    1.96 * (error_rate * (1.0 - error_rate) / num_units as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub granularity: Granularity,
    pub arch: Variant,
    pub n: usize,
    /// `n` after clamping to the available vocabulary (smallest over folds).
    pub n_effective: usize,
    pub predictions: Vec<Prediction>,
    pub error_rate: f64,
    pub confusion: ConfusionMatrix,
    pub ci95_halfwidth: f64,
}

impl LooResult {
    pub fn from_predictions(
        granularity: Granularity,
        arch: Variant,
        n: usize,
        n_effective: usize,
        predictions: Vec<Prediction>,
        num_classes: usize,
    ) -> LooResult {
        let confusion = confusion_matrix(&predictions, num_classes);
        let error_rate = confusion.error_rate();
        LooResult {
            granularity,
            arch,
            n,
            n_effective,
            ci95_halfwidth: confidence_interval(error_rate, predictions.len()),
            predictions,
            error_rate,
            confusion,
        }
    }

    pub fn per_class_error(&self) -> &[Option<f64>] {
        &self.confusion.per_class_error
    }
}

/// The unit held out in a fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeldOut {
    Document(usize),
    /// A single page; the rest of its document stays in the collection.
    Page { doc: usize, page: usize },
    /// A page, with its whole document removed from statistics and training.
    PageAndDocument { doc: usize, page: usize },
}

impl HeldOut {
    fn stats(self, table: &ExpectationTable) -> CorpusStats {
        match self {
            HeldOut::Document(d) | HeldOut::PageAndDocument { doc: d, .. } => {
                table.stats_excluding_docs(&[d])
            }
            HeldOut::Page { doc, page } => table.stats_excluding_page(doc, page),
        }
    }

    fn is_page(self) -> bool {
        !matches!(self, HeldOut::Document(_))
    }

    fn excludes_page(self, doc: usize, page: usize) -> bool {
        match self {
            HeldOut::Document(d) => d == doc,
            HeldOut::Page { doc: d, page: p } => d == doc && p == page,
            HeldOut::PageAndDocument { doc: d, .. } => d == doc,
        }
    }

    fn label(self, table: &ExpectationTable) -> String {
        match self {
            HeldOut::Document(d) => table.docs()[d].doc_id.clone(),
            HeldOut::Page { doc, page } | HeldOut::PageAndDocument { doc, page } => {
                table.docs()[doc].pages[page].0.clone()
            }
        }
    }
}

/// Everything a fold fits, at the largest requested `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldData {
    pub num_docs: usize,
    pub class_sizes: Vec<usize>,
    pub pruned: Vec<String>,
    pub ranking: Vec<ScoredWord>,
    pub vocabulary: Vec<VocabEntry>,
    pub standardizer: Standardizer,
    /// Standardized training vectors with labels, in unit order.
    pub train: Vec<(Vec<f64>, usize)>,
    pub train_ids: Vec<String>,
    pub test: Vec<f64>,
    pub test_class: usize,
}

impl FoldData {
    pub fn dim(&self) -> usize {
        self.vocabulary.len()
    }

    /// Training data restricted to the first `n` features.
    pub fn train_prefix(&self, n: usize) -> Vec<(Vec<f64>, usize)> {
        self.train.iter().map(|(v, c)| (v[..n].to_vec(), *c)).collect()
    }
}

fn unit_stats(table: &ExpectationTable, doc: usize, page: Option<usize>) -> &UnitStats {
    let d = &table.docs()[doc];
    match page {
        None => &d.total,
        Some(p) => &d.pages[p].1,
    }
}

/// Fits one fold from the cached table. `n_max` is clamped to the vocabulary.
pub fn prepare_fold(
    table: &ExpectationTable,
    held_out: HeldOut,
    rules: PruneRules,
    n_max: usize,
    frozen_standardizer: bool,
) -> Result<FoldData> {
    let stats = held_out.stats(table);
    let pruned = prune_vocabulary(table, &stats, rules);
    if pruned.is_empty() {
        return Err(EvalError::EmptyVocabulary(held_out.label(table)));
    }
    let ranked = rank_vocabulary(table, &stats, &pruned)?;
    let space = TfIdfSpace::new(table, &stats, &pruned, &ranked, n_max.min(ranked.len()))?;

    let mut train_raw = Vec::new();
    let mut train_ids = Vec::new();
    let mut train_classes = Vec::new();
    let test_unit;
    let test_class;
    if held_out.is_page() {
        let (hd, hp) = match held_out {
            HeldOut::Page { doc, page } | HeldOut::PageAndDocument { doc, page } => (doc, page),
            HeldOut::Document(_) => unreachable!(),
        };
        for (di, d) in table.docs().iter().enumerate() {
            for (pi, (pid, stats)) in d.pages.iter().enumerate() {
                if held_out.excludes_page(di, pi) {
                    continue;
                }
                train_raw.push(space.vectorize(stats));
                train_ids.push(pid.clone());
                train_classes.push(d.class);
            }
        }
        test_unit = unit_stats(table, hd, Some(hp));
        test_class = table.docs()[hd].class;
    } else {
        let HeldOut::Document(hd) = held_out else { unreachable!() };
        for (di, d) in table.docs().iter().enumerate() {
            if di == hd {
                continue;
            }
            train_raw.push(space.vectorize(&d.total));
            train_ids.push(d.doc_id.clone());
            train_classes.push(d.class);
        }
        test_unit = unit_stats(table, hd, None);
        test_class = table.docs()[hd].class;
    }
    let test_raw = space.vectorize(test_unit);

    let standardizer = {
        let mut refs: Vec<&[f64]> = train_raw.iter().map(Vec::as_slice).collect();
        if frozen_standardizer {
            refs.push(&test_raw);
        }
        Standardizer::fit(&refs)?
    };
    let train = train_raw
        .iter()
        .zip(train_classes)
        .map(|(v, c)| (standardizer.transform(v), c))
        .collect();
    Ok(FoldData {
        num_docs: stats.num_docs,
        class_sizes: stats.class_sizes.clone(),
        pruned: space.pruned_words(table).map(String::from).collect(),
        ranking: ranked.into_iter().map(|(_, s)| s).collect(),
        vocabulary: space.vocabulary.clone(),
        test: standardizer.transform(&test_raw),
        standardizer,
        train,
        train_ids,
        test_class,
    })
}

fn warn_small_classes(table: &ExpectationTable) {
    for (c, size) in table.class_sizes().into_iter().enumerate() {
        if size < 2 {
            log::warn!(
                "class `{}` has {size} document(s); leave-one-out can never predict it correctly",
                table.classes()[c]
            );
        }
    }
}

fn warn_clamped_grid(table: &ExpectationTable, config: &LooConfig) {
    let stats = table.stats();
    let available = prune_vocabulary(table, &stats, config.rules).len();
    for &n in &config.n_grid {
        if n > available {
            log::warn!("n = {n} exceeds the pruned vocabulary ({available} words); clamped");
        }
    }
}

struct FoldOutcome {
    unit_id: String,
    true_class: usize,
    n_available: usize,
    /// Indexed like `(n_grid x archs)`, row-major by n.
    predictions: Vec<(usize, Vec<f64>)>,
}

fn run_fold(
    table: &ExpectationTable,
    config: &LooConfig,
    granularity: Granularity,
    held_out: HeldOut,
    fold_index: usize,
) -> Result<FoldOutcome> {
    let n_max = config.n_grid.iter().copied().max().unwrap_or(1);
    let fold = prepare_fold(table, held_out, config.rules, n_max, config.frozen_standardizer)?;
    let mut predictions = Vec::with_capacity(config.n_grid.len() * config.archs.len());
    for &n in &config.n_grid {
        let dim = n.min(fold.dim());
        let train = fold.train_prefix(dim);
        let test = &fold.test[..dim];
        for &arch in &config.archs {
            let seed = config
                .experiment_seed(granularity, arch, n)
                .wrapping_add(fold_index as u64);
            let architecture =
                MlpArchitecture::new(arch, dim, table.num_classes()).with_hidden_width(config.hidden_width);
            let run = classifier::train(init_model(architecture, seed), &train, &config.train_config(seed))?;
            predictions.push(run.model.predict(test)?);
        }
    }
    Ok(FoldOutcome {
        unit_id: held_out.label(table),
        true_class: fold.test_class,
        n_available: fold.dim(),
        predictions,
    })
}

fn collect_results(
    table: &ExpectationTable,
    config: &LooConfig,
    granularity: Granularity,
    outcomes: Vec<FoldOutcome>,
) -> Vec<LooResult> {
    let mut results = Vec::new();
    for (ni, &n) in config.n_grid.iter().enumerate() {
        let n_effective = outcomes.iter().map(|o| n.min(o.n_available)).min().unwrap_or(n);
        for (ai, &arch) in config.archs.iter().enumerate() {
            let idx = ni * config.archs.len() + ai;
            let predictions = outcomes
                .iter()
                .map(|o| Prediction {
                    unit_id: o.unit_id.clone(),
                    true_class: o.true_class,
                    predicted_class: o.predictions[idx].0,
                    posterior: o.predictions[idx].1.clone(),
                })
                .collect();
            results.push(LooResult::from_predictions(
                granularity,
                arch,
                n,
                n_effective,
                predictions,
                table.num_classes(),
            ));
        }
    }
    results.sort_by(|a, b| (a.granularity, a.arch, a.n).cmp(&(b.granularity, b.arch, b.n)));
    results
}

fn check_config(table: &ExpectationTable, config: &LooConfig) -> Result<()> {
    if config.n_grid.is_empty() || config.archs.is_empty() {
        return Err(EvalError::Empty("empty n grid or architecture list".to_string()));
    }
    if config.n_grid.contains(&0) {
        return Err(FeatureError::ZeroN.into());
    }
    if table.num_docs() < 3 {
        return Err(EvalError::Empty(format!(
            "leave-one-out needs at least 3 documents, got {}",
            table.num_docs()
        )));
    }
    Ok(())
}

/// Leave-one-out over documents, one result per (arch, n).
pub fn loo_documents(table: &ExpectationTable, config: &LooConfig) -> Result<Vec<LooResult>> {
    check_config(table, config)?;
    warn_small_classes(table);
    warn_clamped_grid(table, config);
    let outcomes = (0..table.num_docs())
        .into_par_iter()
        .map(|d| run_fold(table, config, Granularity::Document, HeldOut::Document(d), d))
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_results(table, config, Granularity::Document, outcomes))
}

/// Every page of the collection in manifest order, as `(doc, page)`.
pub fn page_units(table: &ExpectationTable) -> Vec<(usize, usize)> {
    table
        .docs()
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| (0..doc.pages.len()).map(move |p| (d, p)))
        .collect()
}

/// Leave-one-out over pages, one result per (arch, n).
pub fn loo_pages(table: &ExpectationTable, config: &LooConfig) -> Result<Vec<LooResult>> {
    check_config(table, config)?;
    warn_small_classes(table);
    warn_clamped_grid(table, config);
    let units = page_units(table);
    let outcomes = units
        .par_iter()
        .enumerate()
        .map(|(i, &(doc, page))| {
            let held_out = if config.fold_by_document {
                HeldOut::PageAndDocument { doc, page }
            } else {
                HeldOut::Page { doc, page }
            };
            run_fold(table, config, Granularity::Page, held_out, i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_results(table, config, Granularity::Page, outcomes))
}

/// Plurality vote of a document's page predictions. Ties go to the tied class
/// with the larger summed posterior, then to the lowest class index.
pub fn vote(page_predictions: &[&Prediction], num_classes: usize) -> (usize, Vec<f64>) {
    let mut votes = vec![0usize; num_classes];
    let mut mass = vec![0.0; num_classes];
    for p in page_predictions {
        votes[p.predicted_class] += 1;
        for (m, q) in mass.iter_mut().zip(&p.posterior) {
            *m += q;
        }
    }
    let mut best = 0;
    for c in 1..num_classes {
        if votes[c] > votes[best] || (votes[c] == votes[best] && mass[c] > mass[best]) {
            best = c;
        }
    }
    let count = page_predictions.len().max(1) as f64;
    (best, mass.into_iter().map(|m| m / count).collect())
}

/// Turns a page-level result into a document-level one by voting.
pub fn vote_documents(page_result: &LooResult, table: &ExpectationTable) -> Result<LooResult> {
    let by_page: std::collections::HashMap<&str, &Prediction> = page_result
        .predictions
        .iter()
        .map(|p| (p.unit_id.as_str(), p))
        .collect();
    let mut predictions = Vec::with_capacity(table.num_docs());
    for d in table.docs() {
        let pages: Vec<&Prediction> = d
            .pages
            .iter()
            .filter_map(|(pid, _)| by_page.get(pid.as_str()).copied())
            .collect();
        if pages.is_empty() {
            return Err(EvalError::NoPages(d.doc_id.clone()));
        }
        let (class, posterior) = vote(&pages, table.num_classes());
        predictions.push(Prediction {
            unit_id: d.doc_id.clone(),
            true_class: d.class,
            predicted_class: class,
            posterior,
        });
    }
    Ok(LooResult::from_predictions(
        Granularity::PageVoted,
        page_result.arch,
        page_result.n,
        page_result.n_effective,
        predictions,
        table.num_classes(),
    ))
}

// ---- reports ----

#[derive(Debug, Serialize)]
struct ResultRecord<'a> {
    granularity: Granularity,
    arch: Variant,
    n: usize,
    n_effective: usize,
    num_units: usize,
    errors: usize,
    error_rate: f64,
    ci95_halfwidth: f64,
    per_class_error: Vec<(&'a str, Option<f64>)>,
}

#[derive(Debug, Serialize)]
struct ConfusionRecord<'a> {
    granularity: Granularity,
    arch: Variant,
    n: usize,
    classes: &'a [String],
    counts: &'a [Vec<usize>],
    row_totals: Vec<usize>,
    per_class_error: &'a [Option<f64>],
    error_rate: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResultsBundle {
    pub classes: Vec<String>,
    pub results: Vec<LooResult>,
}

fn sorted(results: &[LooResult]) -> Vec<&LooResult> {
    let mut r: Vec<&LooResult> = results.iter().collect();
    r.sort_by(|a, b| (a.granularity, a.arch, a.n).cmp(&(b.granularity, b.arch, b.n)));
    r
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes report files into `dir`:
///
/// * `results.json`: one record per (granularity, arch, n), sorted that way.
/// * `confusion_<granularity>_<arch>_<n>.json`: matrix, row totals, per-class error.
/// * `curve_<granularity>.tsv`: columns `arch n log2_n error_rate ci95_halfwidth num_units`.
/// * `predictions_<granularity>_<arch>_<n>.tsv`: columns `unit_id true predicted posterior`.
/// * `loo_results.json`: the full results, reloadable with [`load_results`].
pub fn write_report(results: &[LooResult], classes: &[String], dir: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(EvalError::Empty("no results to report".to_string()));
    }
    fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let ordered = sorted(results);

    let records: Vec<ResultRecord> = ordered
        .iter()
        .map(|r| ResultRecord {
            granularity: r.granularity,
            arch: r.arch,
            n: r.n,
            n_effective: r.n_effective,
            num_units: r.predictions.len(),
            errors: r.confusion.errors(),
            error_rate: r.error_rate,
            ci95_halfwidth: r.ci95_halfwidth,
            per_class_error: classes
                .iter()
                .map(String::as_str)
                .zip(r.per_class_error().iter().copied())
                .collect(),
        })
        .collect();
    write(&dir.join("results.json"), &(serde_json::to_string_pretty(&records)? + "\n"))?;

    for r in &ordered {
        let stem = format!("{}_{}_{}", r.granularity, r.arch, r.n);
        let record = ConfusionRecord {
            granularity: r.granularity,
            arch: r.arch,
            n: r.n,
            classes,
            counts: &r.confusion.counts,
            row_totals: r.confusion.counts.iter().map(|row| row.iter().sum()).collect(),
            per_class_error: &r.confusion.per_class_error,
            error_rate: r.error_rate,
        };
        write(
            &dir.join(format!("confusion_{stem}.json")),
            &(serde_json::to_string_pretty(&record)? + "\n"),
        )?;
        let mut tsv = String::from("unit_id\ttrue\tpredicted\tposterior\n");
        for p in &r.predictions {
            let post: Vec<String> = p.posterior.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(
                tsv,
                "{}\t{}\t{}\t{}",
                p.unit_id, classes[p.true_class], classes[p.predicted_class],
                post.join(",")
            )
            .unwrap();
        }
        write(&dir.join(format!("predictions_{stem}.tsv")), &tsv)?;
    }

    let mut granularities: Vec<Granularity> = ordered.iter().map(|r| r.granularity).collect();
    granularities.dedup();
    for g in granularities {
        let mut tsv = String::from("arch\tn\tlog2_n\terror_rate\tci95_halfwidth\tnum_units\n");
        for r in ordered.iter().filter(|r| r.granularity == g) {
            writeln!(
                tsv,
                "{}\t{}\t{:.4}\t{:.6}\t{:.6}\t{}",
                r.arch,
                r.n,
                (r.n as f64).log2(),
                r.error_rate,
                r.ci95_halfwidth,
                r.predictions.len()
            )
            .unwrap();
        }
        write(&dir.join(format!("curve_{g}.tsv")), &tsv)?;
    }

    let bundle = ResultsBundle {
        classes: classes.to_vec(),
        results: ordered.into_iter().cloned().collect(),
    };
    write(&dir.join("loo_results.json"), &serde_json::to_string(&bundle)?)?;
    Ok(())
}

pub fn load_results(path: &Path) -> Result<ResultsBundle> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}
