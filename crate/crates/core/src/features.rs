//! Vocabulary pruning, information-gain ranking, tf-idf vectors and
//! standardization, all driven by expectation estimates.
//!
//! Natural logarithms are used throughout. Information gain keeps only the two
//! word-dependent addends (the class-prior entropy is the same for every word),
//! so scores are ≤ 0 and larger means more informative.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expectation::{CorpusStats, ExpectationTable, Fixed, UnitStats};

pub const SPEC_FORMAT: &str = "prix-feature-spec";
pub const SPEC_VERSION: u32 = 1;

pub const DEFAULT_MIN_CHARS: usize = 3;
pub const DEFAULT_MIN_DOC_FREQ: f64 = 1.0;

/// Default grid of vocabulary sizes: 8, 16, ..., 16384.
pub fn default_n_grid() -> Vec<usize> {
    (3..=14).map(|k| 1usize << k).collect()
}

const CONSISTENCY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("inconsistent counts: {0}")]
    Inconsistent(String),
    #[error("standardizer needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("vector has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("n must be at least 1")]
    ZeroN,
    #[error("spec file: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneRules {
    pub min_chars: usize,
    pub min_doc_freq: f64,
}

impl Default for PruneRules {
    fn default() -> Self {
        PruneRules {
            min_chars: DEFAULT_MIN_CHARS,
            min_doc_freq: DEFAULT_MIN_DOC_FREQ,
        }
    }
}

/// Word ids (ascending) that survive both pruning rules under `stats`.
pub fn prune_vocabulary(table: &ExpectationTable, stats: &CorpusStats, rules: PruneRules) -> Vec<u32> {
    let kept: Vec<u32> = (0..table.words().len() as u32)
        .filter(|&id| {
            table.word(id).chars().count() >= rules.min_chars
                && stats.doc_freq[id as usize].to_f64() >= rules.min_doc_freq
        })
        .collect();
    if kept.is_empty() {
        log::warn!("vocabulary pruning removed every word");
    }
    kept
}

fn xlogx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Word-dependent part of the information gain.
///
/// `docs_with` is `f(t_v)`, `class_docs_with[c]` is `f(c,t_v)`, `num_docs` is
/// `M` and `class_sizes[c]` is `M_c`. All may be fractional expectations.
pub fn information_gain(
    docs_with: f64,
    class_docs_with: &[f64],
    num_docs: f64,
    class_sizes: &[f64],
) -> Result<f64, FeatureError> {
    let tol = CONSISTENCY_TOL * num_docs.max(1.0);
    if docs_with > num_docs + tol || docs_with < -tol {
        return Err(FeatureError::Inconsistent(format!(
            "f(t_v) = {docs_with} outside [0, M = {num_docs}]"
        )));
    }
    for (c, (&f_c, &m_c)) in class_docs_with.iter().zip(class_sizes).enumerate() {
        if f_c > docs_with + tol || f_c > m_c + tol {
            return Err(FeatureError::Inconsistent(format!(
                "f(c{c},t_v) = {f_c} exceeds f(t_v) = {docs_with} or M_c = {m_c}"
            )));
        }
    }
    let p_t = docs_with / num_docs;
    let p_not = (num_docs - docs_with) / num_docs;

    let mut with = 0.0;
    if docs_with > 0.0 {
        for &f_c in class_docs_with {
            with += xlogx(f_c / docs_with);
        }
    }
    let without_total = num_docs - docs_with;
    let mut without = 0.0;
    if without_total > 0.0 {
        for (&f_c, &m_c) in class_docs_with.iter().zip(class_sizes) {
            without += xlogx((m_c - f_c).max(0.0) / without_total);
        }
    }
    Ok(p_t * with + p_not * without)
}

/// Information gain of table word `id` under `stats`.
pub fn word_information_gain(stats: &CorpusStats, id: u32) -> Result<f64, FeatureError> {
    let class_with: Vec<f64> = stats
        .class_doc_freq
        .iter()
        .map(|row| row[id as usize].to_f64())
        .collect();
    let sizes: Vec<f64> = stats.class_sizes.iter().map(|&s| s as f64).collect();
    information_gain(
        stats.doc_freq[id as usize].to_f64(),
        &class_with,
        stats.num_docs as f64,
        &sizes,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredWord {
    pub word: String,
    pub score: f64,
}

/// Sorts by score descending, ties by word ascending.
pub fn rank_words(mut words: Vec<ScoredWord>) -> Vec<ScoredWord> {
    words.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.word.cmp(&b.word)));
    words
}

/// The `n` best words; all of them (with a warning) if fewer are available.
pub fn select_vocabulary(ranked: &[ScoredWord], n: usize) -> Result<&[ScoredWord], FeatureError> {
    if n == 0 {
        return Err(FeatureError::ZeroN);
    }
    if n > ranked.len() {
        log::warn!("requested n = {n} but only {} words are available", ranked.len());
    }
    Ok(&ranked[..n.min(ranked.len())])
}

/// Scores every pruned word and ranks the result. Returns word ids alongside.
pub fn rank_vocabulary(
    table: &ExpectationTable,
    stats: &CorpusStats,
    pruned: &[u32],
) -> Result<Vec<(u32, ScoredWord)>, FeatureError> {
    let mut scored = pruned
        .iter()
        .map(|&id| {
            Ok((
                id,
                ScoredWord {
                    word: table.word(id).to_string(),
                    score: word_information_gain(stats, id)?,
                },
            ))
        })
        .collect::<Result<Vec<_>, FeatureError>>()?;
    scored.sort_by(|a, b| {
        b.1.score
            .total_cmp(&a.1.score)
            .then_with(|| a.1.word.cmp(&b.1.word))
    });
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub word: String,
    pub ig_score: f64,
    pub doc_freq: f64,
    pub idf: f64,
}

/// A fitted tf-idf space over one fold's statistics.
///
/// Term frequencies are normalized by the expected running words over the
/// whole pruned vocabulary, not just the selected words.
#[derive(Debug, Clone)]
pub struct TfIdfSpace {
    pub vocabulary: Vec<VocabEntry>,
    feature_of: HashMap<u32, usize>,
    in_pruned: Vec<bool>,
    pruned_words: Vec<u32>,
    pub num_docs: usize,
    pub class_sizes: Vec<usize>,
}

impl TfIdfSpace {
    /// Uses the first `n` entries of `ranked` (see [`rank_vocabulary`]).
    pub fn new(
        table: &ExpectationTable,
        stats: &CorpusStats,
        pruned: &[u32],
        ranked: &[(u32, ScoredWord)],
        n: usize,
    ) -> Result<TfIdfSpace, FeatureError> {
        if n == 0 {
            return Err(FeatureError::ZeroN);
        }
        if n > ranked.len() {
            log::warn!("requested n = {n} but only {} words are available", ranked.len());
        }
        let m = stats.num_docs as f64;
        let selected = &ranked[..n.min(ranked.len())];
        let vocabulary = selected
            .iter()
            .map(|(id, sw)| {
                let df = stats.doc_freq[*id as usize].to_f64();
                VocabEntry {
                    word: sw.word.clone(),
                    ig_score: sw.score,
                    doc_freq: df,
                    idf: (m / df).ln(),
                }
            })
            .collect();
        let feature_of = selected.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
        let mut in_pruned = vec![false; table.words().len()];
        for &id in pruned {
            in_pruned[id as usize] = true;
        }
        Ok(TfIdfSpace {
            vocabulary,
            feature_of,
            in_pruned,
            pruned_words: pruned.to_vec(),
            num_docs: stats.num_docs,
            class_sizes: stats.class_sizes.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vocabulary.len()
    }

    /// Expected running words of `unit` restricted to the pruned vocabulary.
    pub fn running_words(&self, unit: &UnitStats) -> Fixed {
        unit.words
            .iter()
            .filter(|w| self.in_pruned[w.word as usize])
            .map(|w| w.sum)
            .sum()
    }

    /// tf-idf vector of a document or page. Empty units give a zero vector.
    pub fn vectorize(&self, unit: &UnitStats) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        let total = self.running_words(unit);
        if total.is_zero() {
            log::warn!("unit with no expected running words; using a zero vector");
            return v;
        }
        let total = total.to_f64();
        for w in &unit.words {
            if let Some(&f) = self.feature_of.get(&w.word) {
                v[f] = (w.sum.to_f64() / total) * self.vocabulary[f].idf;
            }
        }
        v
    }

    pub fn pruned_words<'a>(&'a self, table: &'a ExpectationTable) -> impl Iterator<Item = &'a str> + 'a {
        self.pruned_words.iter().map(move |&id| table.word(id))
    }
}

/// Per-feature population mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl Standardizer {
    /// Zero-variance features get stddev 1 so they map to a constant 0.
    pub fn fit(vectors: &[&[f64]]) -> Result<Standardizer, FeatureError> {
        if vectors.len() < 2 {
            return Err(FeatureError::TooFewVectors(vectors.len()));
        }
        let dim = vectors[0].len();
        let count = vectors.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in vectors {
            if v.len() != dim {
                return Err(FeatureError::Dimension {
                    expected: dim,
                    got: v.len(),
                });
            }
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        let mut var = vec![0.0; dim];
        for v in vectors {
            for ((s, x), m) in var.iter_mut().zip(v.iter()).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let stddev = var
            .into_iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, stddev })
    }

    pub fn apply(&self, v: &mut [f64]) {
        for ((x, m), s) in v.iter_mut().zip(&self.mean).zip(&self.stddev) {
            *x = (*x - m) / s;
        }
    }

    pub fn transform(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        self.apply(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocVector {
    pub doc_id: String,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionSummary {
    pub num_docs: usize,
    pub class_sizes: Vec<usize>,
    pub classes: Vec<String>,
}

/// Frozen feature pipeline: selected vocabulary with IG and idf, the pruned
/// vocabulary used for tf normalization, and standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub n: usize,
    pub rules: PruneRules,
    pub vocabulary: Vec<VocabEntry>,
    /// Full ranked vocabulary (all pruned words) for reporting.
    pub ranking: Vec<ScoredWord>,
    pub normalizer_vocabulary: Vec<String>,
    pub standardization: Standardizer,
    pub collection: CollectionSummary,
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    format: String,
    version: u32,
    spec: FeatureSpec,
}

/// Fits features on the whole table. Returns the spec and the standardized
/// document vectors it was fitted on.
pub fn fit_feature_spec(
    table: &ExpectationTable,
    rules: PruneRules,
    n: usize,
) -> Result<(FeatureSpec, Vec<DocVector>), FeatureError> {
    let stats = table.stats();
    let pruned = prune_vocabulary(table, &stats, rules);
    let ranked = rank_vocabulary(table, &stats, &pruned)?;
    let space = TfIdfSpace::new(table, &stats, &pruned, &ranked, n)?;
    let raw: Vec<Vec<f64>> = table.docs().iter().map(|d| space.vectorize(&d.total)).collect();
    let refs: Vec<&[f64]> = raw.iter().map(Vec::as_slice).collect();
    let standardization = Standardizer::fit(&refs)?;
    let vectors = table
        .docs()
        .iter()
        .zip(raw)
        .map(|(d, v)| DocVector {
            doc_id: d.doc_id.clone(),
            values: standardization.transform(&v),
            label: Some(d.class),
        })
        .collect();
    let spec = FeatureSpec {
        n: space.dim(),
        rules,
        normalizer_vocabulary: space.pruned_words(table).map(String::from).collect(),
        vocabulary: space.vocabulary.clone(),
        ranking: ranked.into_iter().map(|(_, s)| s).collect(),
        standardization,
        collection: CollectionSummary {
            num_docs: stats.num_docs,
            class_sizes: stats.class_sizes,
            classes: table.classes().to_vec(),
        },
    };
    Ok((spec, vectors))
}

impl FeatureSpec {
    /// Standardized tf-idf vector for a unit of a (possibly different) table.
    pub fn vectorize(&self, table: &ExpectationTable, unit: &UnitStats) -> Vec<f64> {
        let feature_of: HashMap<&str, usize> = self
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, e)| (e.word.as_str(), i))
            .collect();
        let in_norm: std::collections::HashSet<&str> =
            self.normalizer_vocabulary.iter().map(String::as_str).collect();
        let mut v = vec![0.0; self.vocabulary.len()];
        let total: Fixed = unit
            .words
            .iter()
            .filter(|w| in_norm.contains(table.word(w.word)))
            .map(|w| w.sum)
            .sum();
        if !total.is_zero() {
            let total = total.to_f64();
            for w in &unit.words {
                if let Some(&f) = feature_of.get(table.word(w.word)) {
                    v[f] = (w.sum.to_f64() / total) * self.vocabulary[f].idf;
                }
            }
        }
        self.standardization.apply(&mut v);
        v
    }

    pub fn to_json(&self) -> Result<String, FeatureError> {
        Ok(serde_json::to_string(&SpecFile {
            format: SPEC_FORMAT.to_string(),
            version: SPEC_VERSION,
            spec: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self, FeatureError> {
        let f: SpecFile = serde_json::from_str(text)?;
        if f.format != SPEC_FORMAT || f.version != SPEC_VERSION {
            return Err(FeatureError::Format(format!(
                "expected {SPEC_FORMAT} v{SPEC_VERSION}, found {} v{}",
                f.format, f.version
            )));
        }
        Ok(f.spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        std::fs::write(path, self.to_json()?).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let text = std::fs::read_to_string(path).map_err(|source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expectation::build_expectation_table;
    use crate::ingest::{parse_manifest_str, parse_prix_str, validate_collection};

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum::<f64>()
    }

    #[test]
    fn default_grid() {
        let g = default_n_grid();
        assert_eq!(g.first(), Some(&8));
        assert_eq!(g.last(), Some(&16384));
        assert_eq!(g.len(), 12);
    }

    #[test]
    fn class_determining_word_has_zero_ig() {
        let ig = information_gain(5.0, &[5.0, 0.0], 10.0, &[5.0, 5.0]).unwrap();
        assert_eq!(ig, 0.0);
    }

    #[test]
    fn independent_word_has_minus_prior_entropy() {
        // P(t) = 1/2, P(c|t) = P(c|not t) = P(c)
        let ig = information_gain(4.0, &[1.0, 3.0], 8.0, &[2.0, 6.0]).unwrap();
        assert_eq!(ig, -entropy(&[0.25, 0.75]));
        let ig = information_gain(2.0, &[1.0, 1.0], 8.0, &[4.0, 4.0]).unwrap();
        assert_eq!(ig, -entropy(&[0.5, 0.5]));
    }

    #[test]
    fn fractional_toy_matches_hand_evaluation() {
        // M = 4, M_1 = M_2 = 2, f(t) = 2.5, f(c1,t) = 2.0, f(c2,t) = 0.5
        let ig = information_gain(2.5, &[2.0, 0.5], 4.0, &[2.0, 2.0]).unwrap();
        let expected = (2.5 / 4.0) * (0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln())
            + (1.5 / 4.0) * (0.0 + 1.0 * 1.0f64.ln());
        assert!((ig - expected).abs() < 1e-15, "{ig} vs {expected}");
    }

    #[test]
    fn corrupted_counts_are_rejected() {
        assert!(information_gain(11.0, &[5.0, 6.0], 10.0, &[5.0, 5.0]).is_err());
        assert!(information_gain(3.0, &[4.0, 0.0], 10.0, &[5.0, 5.0]).is_err());
    }

    #[test]
    fn ig_is_scale_invariant() {
        let a = information_gain(2.5, &[2.0, 0.5], 4.0, &[2.0, 2.0]).unwrap();
        let b = information_gain(25.0, &[20.0, 5.0], 40.0, &[20.0, 20.0]).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn selection_ties_and_bounds() {
        let ranked = rank_words(vec![
            ScoredWord { word: "zeta".into(), score: -0.1 },
            ScoredWord { word: "alfa".into(), score: -0.1 },
            ScoredWord { word: "beta".into(), score: -0.5 },
        ]);
        assert_eq!(ranked[0].word, "alfa");
        assert_eq!(select_vocabulary(&ranked, 1).unwrap()[0].word, "alfa");
        assert_eq!(select_vocabulary(&ranked, 10).unwrap().len(), 3);
        assert!(select_vocabulary(&ranked, 0).is_err());
    }

    #[test]
    fn standardizer_two_points_and_constant() {
        let s = Standardizer::fit(&[&[0.0, 5.0], &[2.0, 5.0]]).unwrap();
        assert_eq!(s.mean, [1.0, 5.0]);
        assert_eq!(s.stddev, [1.0, 1.0]);
        assert_eq!(s.transform(&[0.0, 5.0]), [-1.0, 0.0]);
        assert_eq!(s.transform(&[2.0, 5.0]), [1.0, 0.0]);
        assert!(matches!(Standardizer::fit(&[&[1.0]]), Err(FeatureError::TooFewVectors(1))));
    }

    fn collection() -> crate::ingest::Collection {
        let m = parse_manifest_str("d1\tA\tp1\nd2\tA\tp2\nd3\tB\tp3\nd4\tB\tp4\n", "m").unwrap();
        let pages = parse_prix_str(
            "p1\tpoder\t0.9\np1\tcomun\t1.0\np1\tde\t1.0\n\
             p2\tpoder\t0.8\np2\tcomun\t1.0\np2\tventa\t0.1\n\
             p3\tventa\t0.9\np3\tcomun\t1.0\np3\traro\t0.5\n\
             p4\tventa\t0.7\np4\tcomun\t1.0\np4\tpoder\t0.2\n",
            "t",
        )
        .unwrap();
        validate_collection(pages, &m, true).unwrap().0
    }

    #[test]
    fn pruning_rules() {
        let t = build_expectation_table(&collection());
        let stats = t.stats();
        let kept: Vec<&str> = prune_vocabulary(&t, &stats, PruneRules::default())
            .into_iter()
            .map(|id| t.word(id))
            .collect();
        // "de" too short, "raro" below 1.0 expected documents
        assert_eq!(kept, ["comun", "poder", "venta"]);
    }

    #[test]
    fn ubiquitous_word_has_zero_idf_and_tf_sums_to_one() {
        let t = build_expectation_table(&collection());
        let stats = t.stats();
        let pruned = prune_vocabulary(&t, &stats, PruneRules::default());
        let ranked = rank_vocabulary(&t, &stats, &pruned).unwrap();
        let space = TfIdfSpace::new(&t, &stats, &pruned, &ranked, 3).unwrap();
        let comun = space.vocabulary.iter().position(|e| e.word == "comun").unwrap();
        assert_eq!(space.vocabulary[comun].idf, 0.0);
        for d in t.docs() {
            assert_eq!(space.vectorize(&d.total)[comun], 0.0);
            let total = space.running_words(&d.total).to_f64();
            let tf_sum: f64 = d
                .total
                .words
                .iter()
                .filter(|w| pruned.contains(&w.word))
                .map(|w| w.sum.to_f64() / total)
                .sum();
            assert!((tf_sum - 1.0).abs() < 1e-12);
        }
        // the two class-specific words outrank the ubiquitous one
        assert_eq!(ranked.last().unwrap().1.word, "comun");
    }

    #[test]
    fn tfidf_scalar_value() {
        // E[n(v,X)] = 1.1, E[n(X)] = 100, M = 10, E[m] = 2.5
        let expected = 0.011 * 4f64.ln();
        let value = (1.1 / 100.0) * (10.0f64 / 2.5).ln();
        assert!((value - expected).abs() < 1e-15);
    }

    #[test]
    fn spec_round_trip_and_refit_vectorize() {
        let t = build_expectation_table(&collection());
        let (spec, vecs) = fit_feature_spec(&t, PruneRules::default(), 2).unwrap();
        assert_eq!(spec.n, 2);
        assert_eq!(FeatureSpec::from_json(&spec.to_json().unwrap()).unwrap(), spec);
        for (d, v) in t.docs().iter().zip(&vecs) {
            assert_eq!(spec.vectorize(&t, &d.total), v.values);
        }
    }
}
