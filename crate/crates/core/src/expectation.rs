//! Expected word counts and document frequencies from relevance probabilities.
//!
//! For a page `x`, document `X` and collection `𝒳`:
//!
//! * `E[n(x)]    = Σ_v P(R|x,v)` (all spots on the page)
//! * `E[n(X)]    = Σ_{x⊑X} E[n(x)]`
//! * `E[n(v,X)]  = Σ_{x⊑X} P(R|x,v)`
//! * `E[m(v,𝒳)]  = Σ_{X⊑𝒳} max_{x∈X} P(R|x,v)`
//!
//! Every spot contributes to the sums. The maximum in the document frequency
//! ranges over all spots of the document, not per page.
//!
//! All accumulation happens in [`Fixed`], an exact fixed-point integer, so the
//! results do not depend on summation order and held-out contributions can be
//! subtracted without rounding drift.

use std::collections::{BTreeSet, HashMap};
use std::ops::{Add, AddAssign, Sub, SubAssign};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{normalize_word, Collection, Document, PrixPage};

pub const TABLE_FORMAT: &str = "prix-expectations";
pub const TABLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExpectationError {
    #[error("unknown class label `{0}`")]
    UnknownClass(String),
    #[error("table file: {0}")]
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

const FRACTION_BITS: i32 = 80;

/// Exact fixed-point quantity in units of 2^-80.
///
/// Probabilities above 2^-27 convert without loss; smaller ones round to the
/// nearest 2^-80. Sums of up to ~10^14 unit probabilities fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Fixed(i128);

impl Fixed {
    pub const ZERO: Fixed = Fixed(0);

    pub fn from_f64(v: f64) -> Fixed {
        debug_assert!(v.is_finite());
        Fixed((v * 2f64.powi(FRACTION_BITS)).round() as i128)
    }

    pub fn from_count(n: usize) -> Fixed {
        Fixed((n as i128) << FRACTION_BITS)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 * 2f64.powi(-FRACTION_BITS)
    }

    pub fn raw(self) -> i128 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl Add for Fixed {
    type Output = Fixed;
    fn add(self, rhs: Fixed) -> Fixed {
        Fixed(self.0 + rhs.0)
    }
}

impl AddAssign for Fixed {
    fn add_assign(&mut self, rhs: Fixed) {
        self.0 += rhs.0;
    }
}

impl Sub for Fixed {
    type Output = Fixed;
    fn sub(self, rhs: Fixed) -> Fixed {
        Fixed(self.0 - rhs.0)
    }
}

impl SubAssign for Fixed {
    fn sub_assign(&mut self, rhs: Fixed) {
        self.0 -= rhs.0;
    }
}

impl std::iter::Sum for Fixed {
    fn sum<I: Iterator<Item = Fixed>>(iter: I) -> Fixed {
        iter.fold(Fixed::ZERO, Add::add)
    }
}

pub fn expected_page_words(page: &PrixPage) -> f64 {
    page_sum(page).to_f64()
}

fn page_sum(page: &PrixPage) -> Fixed {
    page.records.iter().map(|r| Fixed::from_f64(r.relevance_prob)).sum()
}

pub fn expected_doc_words(doc: &Document) -> f64 {
    doc.pages.iter().map(page_sum).sum::<Fixed>().to_f64()
}

pub fn expected_word_freq(doc: &Document, word: &str) -> f64 {
    let word = normalize_word(word);
    doc.pages
        .iter()
        .flat_map(|p| &p.records)
        .filter(|r| r.pseudo_word == word)
        .map(|r| Fixed::from_f64(r.relevance_prob))
        .sum::<Fixed>()
        .to_f64()
}

fn doc_max(doc: &Document, word: &str) -> Fixed {
    doc.pages
        .iter()
        .flat_map(|p| &p.records)
        .filter(|r| r.pseudo_word == word)
        .map(|r| Fixed::from_f64(r.relevance_prob))
        .max()
        .unwrap_or(Fixed::ZERO)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Subset<'a> {
    All,
    Class(&'a str),
}

pub fn expected_doc_frequency(
    collection: &Collection,
    word: &str,
    subset: Subset<'_>,
) -> Result<f64, ExpectationError> {
    let word = normalize_word(word);
    let class = match subset {
        Subset::All => None,
        Subset::Class(label) => Some(
            collection
                .classes()
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| ExpectationError::UnknownClass(label.to_string()))?,
        ),
    };
    Ok(collection
        .documents()
        .iter()
        .filter(|d| class.is_none_or(|c| d.class == c))
        .map(|d| doc_max(d, &word))
        .sum::<Fixed>()
        .to_f64())
}

/// Sum and maximum of one word's relevance probabilities within a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordStat {
    pub word: u32,
    pub sum: Fixed,
    pub max: Fixed,
}

/// Per-word statistics of a page or document, sorted by word id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitStats {
    pub running: Fixed,
    pub words: Vec<WordStat>,
}

impl UnitStats {
    fn from_accumulator(acc: HashMap<u32, (Fixed, Fixed)>) -> UnitStats {
        let mut words: Vec<WordStat> = acc
            .into_iter()
            .map(|(word, (sum, max))| WordStat { word, sum, max })
            .collect();
        words.sort_unstable_by_key(|w| w.word);
        let running = words.iter().map(|w| w.sum).sum();
        UnitStats { running, words }
    }

    /// Merges several units (e.g. the pages of a document).
    pub fn merge<'a>(parts: impl IntoIterator<Item = &'a UnitStats>) -> UnitStats {
        let mut acc: HashMap<u32, (Fixed, Fixed)> = HashMap::new();
        for part in parts {
            for w in &part.words {
                let e = acc.entry(w.word).or_insert((Fixed::ZERO, Fixed::ZERO));
                e.0 += w.sum;
                e.1 = e.1.max(w.max);
            }
        }
        UnitStats::from_accumulator(acc)
    }

    pub fn get(&self, word: u32) -> Option<&WordStat> {
        self.words
            .binary_search_by_key(&word, |w| w.word)
            .ok()
            .map(|i| &self.words[i])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocStats {
    pub doc_id: String,
    pub class: usize,
    pub total: UnitStats,
    pub pages: Vec<(String, UnitStats)>,
}

impl DocStats {
    /// Document statistics with one page removed; `None` if it was the only page.
    pub fn without_page(&self, page: usize) -> Option<UnitStats> {
        if self.pages.len() <= 1 {
            return None;
        }
        Some(UnitStats::merge(
            self.pages
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != page)
                .map(|(_, (_, s))| s),
        ))
    }
}

/// Document-frequency statistics of a (possibly reduced) collection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub class_sizes: Vec<usize>,
    pub doc_freq: Vec<Fixed>,
    pub class_doc_freq: Vec<Vec<Fixed>>,
}

impl CorpusStats {
    fn remove(&mut self, class: usize, stats: &UnitStats) {
        self.num_docs -= 1;
        self.class_sizes[class] -= 1;
        for w in &stats.words {
            self.doc_freq[w.word as usize] -= w.max;
            self.class_doc_freq[class][w.word as usize] -= w.max;
        }
    }

    fn insert(&mut self, class: usize, stats: &UnitStats) {
        self.num_docs += 1;
        self.class_sizes[class] += 1;
        for w in &stats.words {
            self.doc_freq[w.word as usize] += w.max;
            self.class_doc_freq[class][w.word as usize] += w.max;
        }
    }
}

/// Cached expectations for a whole collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectationTable {
    classes: Vec<String>,
    words: Vec<String>,
    docs: Vec<DocStats>,
    doc_freq: Vec<Fixed>,
    class_doc_freq: Vec<Vec<Fixed>>,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    format: String,
    version: u32,
    table: ExpectationTable,
}

fn page_stats(page: &PrixPage, index: &HashMap<&str, u32>) -> UnitStats {
    let mut acc: HashMap<u32, (Fixed, Fixed)> = HashMap::new();
    for r in &page.records {
        let id = index[r.pseudo_word.as_str()];
        let p = Fixed::from_f64(r.relevance_prob);
        let e = acc.entry(id).or_insert((Fixed::ZERO, Fixed::ZERO));
        e.0 += p;
        e.1 = e.1.max(p);
    }
    UnitStats::from_accumulator(acc)
}

pub fn build_expectation_table(collection: &Collection) -> ExpectationTable {
    let vocab: BTreeSet<&str> = collection
        .documents()
        .iter()
        .flat_map(|d| &d.pages)
        .flat_map(|p| &p.records)
        .map(|r| r.pseudo_word.as_str())
        .collect();
    let words: Vec<String> = vocab.iter().map(|w| w.to_string()).collect();
    let index: HashMap<&str, u32> = vocab.iter().enumerate().map(|(i, w)| (*w, i as u32)).collect();

    let docs: Vec<DocStats> = collection
        .documents()
        .par_iter()
        .map(|d| {
            let pages: Vec<(String, UnitStats)> = d
                .pages
                .iter()
                .map(|p| (p.page_id.clone(), page_stats(p, &index)))
                .collect();
            DocStats {
                doc_id: d.doc_id.clone(),
                class: d.class,
                total: UnitStats::merge(pages.iter().map(|(_, s)| s)),
                pages,
            }
        })
        .collect();

    let num_classes = collection.num_classes();
    let mut doc_freq = vec![Fixed::ZERO; words.len()];
    let mut class_doc_freq = vec![vec![Fixed::ZERO; words.len()]; num_classes];
    for d in &docs {
        for w in &d.total.words {
            doc_freq[w.word as usize] += w.max;
            class_doc_freq[d.class][w.word as usize] += w.max;
        }
    }
    ExpectationTable {
        classes: collection.classes().to_vec(),
        words,
        docs,
        doc_freq,
        class_doc_freq,
    }
}

impl ExpectationTable {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.words
            .binary_search_by(|w| w.as_str().cmp(word))
            .ok()
            .map(|i| i as u32)
    }

    pub fn docs(&self) -> &[DocStats] {
        &self.docs
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.classes.len()];
        for d in &self.docs {
            sizes[d.class] += 1;
        }
        sizes
    }

    /// `E[n(X)]` of document `doc`.
    pub fn doc_running(&self, doc: usize) -> f64 {
        self.docs[doc].total.running.to_f64()
    }

    /// `E[n(v,X)]`.
    pub fn doc_word(&self, doc: usize, word: &str) -> f64 {
        self.word_id(word)
            .and_then(|id| self.docs[doc].total.get(id))
            .map_or(0.0, |w| w.sum.to_f64())
    }

    /// `E[m(v,𝒳)]`.
    pub fn doc_freq(&self, word: &str) -> f64 {
        self.word_id(word)
            .map_or(0.0, |id| self.doc_freq[id as usize].to_f64())
    }

    /// `E[m(v,𝒳_c)]`.
    pub fn class_doc_freq(&self, class: usize, word: &str) -> f64 {
        self.word_id(word)
            .map_or(0.0, |id| self.class_doc_freq[class][id as usize].to_f64())
    }

    pub fn total_running(&self) -> f64 {
        self.docs.iter().map(|d| d.total.running).sum::<Fixed>().to_f64()
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            num_docs: self.docs.len(),
            class_sizes: self.class_sizes(),
            doc_freq: self.doc_freq.clone(),
            class_doc_freq: self.class_doc_freq.clone(),
        }
    }

    /// Statistics with the listed documents' contributions subtracted.
    pub fn stats_excluding_docs(&self, excluded: &[usize]) -> CorpusStats {
        let mut s = self.stats();
        for &d in excluded {
            s.remove(self.docs[d].class, &self.docs[d].total);
        }
        s
    }

    /// Statistics with a single page removed from its document.
    pub fn stats_excluding_page(&self, doc: usize, page: usize) -> CorpusStats {
        let d = &self.docs[doc];
        let mut s = self.stats();
        s.remove(d.class, &d.total);
        if let Some(rest) = d.without_page(page) {
            s.insert(d.class, &rest);
        }
        s
    }

    pub fn to_json(&self) -> Result<String, ExpectationError> {
        Ok(serde_json::to_string(&TableFile {
            format: TABLE_FORMAT.to_string(),
            version: TABLE_VERSION,
            table: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self, ExpectationError> {
        let f: TableFile = serde_json::from_str(text)?;
        if f.format != TABLE_FORMAT || f.version != TABLE_VERSION {
            return Err(ExpectationError::Format(format!(
                "expected {TABLE_FORMAT} v{TABLE_VERSION}, found {} v{}",
                f.format, f.version
            )));
        }
        Ok(f.table)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExpectationError> {
        std::fs::write(path, self.to_json()?).map_err(|source| ExpectationError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExpectationError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExpectationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn summary(&self) -> String {
        format!(
            "documents: {}\nclasses: {}\nvocabulary size: {}\ntotal expected running words: {:.4}\n",
            self.docs.len(),
            self.classes.len(),
            self.words.len(),
            self.total_running()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_manifest_str, parse_prix_str, validate_collection, PrixRecord};

    fn page(id: &str, spots: &[(&str, f64)]) -> PrixPage {
        PrixPage {
            page_id: id.to_string(),
            records: spots
                .iter()
                .map(|(w, p)| PrixRecord::new(w, *p).unwrap())
                .collect(),
        }
    }

    fn toy() -> Collection {
        let m = parse_manifest_str("d1\tA\tp1,p2\nd2\tA\tp3\nd3\tB\tp4,p5\n", "m").unwrap();
        let pages = parse_prix_str(
            "p1\tpoder\t0.8\np1\tventa\t0.5\np1\tpoder\t0.4\n\
             p2\tpoder\t0.3\np2\tcasa\t0.9\n\
             p3\tventa\t0.9\n\
             p4\tcasa\t0.2\np4\tpoder\t1.0\n\
             p5\tventa\t0.1\n",
            "t",
        )
        .unwrap();
        validate_collection(pages, &m, true).unwrap().0
    }

    #[test]
    fn fixed_is_exact_for_ordinary_probabilities() {
        for p in [0.93, 0.1, 1.0, 1e-6, 0.333333333333] {
            assert_eq!(Fixed::from_f64(p).to_f64(), p);
        }
        assert_eq!(Fixed::from_count(7).to_f64(), 7.0);
    }

    #[test]
    fn page_word_sums() {
        assert!((expected_page_words(&page("p", &[("a", 0.9), ("b", 0.5), ("c", 0.5)])) - 1.9).abs() < 1e-15);
        assert_eq!(expected_page_words(&page("p", &[])), 0.0);
    }

    #[test]
    fn doc_sums_are_additive() {
        let c = toy();
        let d = &c.documents()[0];
        let by_page: f64 = d.pages.iter().map(expected_page_words).sum();
        assert!((expected_doc_words(d) - by_page).abs() < 1e-12);
        assert!((expected_doc_words(d) - 2.9).abs() < 1e-12);
        assert!((expected_word_freq(d, "poder") - 1.5).abs() < 1e-12);
        assert!((expected_word_freq(d, "PODER ") - 1.5).abs() < 1e-12);
        assert_eq!(expected_word_freq(d, "ausente"), 0.0);
    }

    #[test]
    fn doc_frequency_takes_document_max() {
        let c = toy();
        // poder: d1 max 0.8, d2 absent, d3 1.0
        assert!((expected_doc_frequency(&c, "poder", Subset::All).unwrap() - 1.8).abs() < 1e-12);
        assert!((expected_doc_frequency(&c, "poder", Subset::Class("A")).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(
            expected_doc_frequency(&c, "poder", Subset::Class("Z")),
            Err(ExpectationError::UnknownClass(_))
        ));
    }

    #[test]
    fn table_matches_single_word_operations() {
        let c = toy();
        let t = build_expectation_table(&c);
        assert_eq!(t.words(), ["casa", "poder", "venta"]);
        for (i, d) in c.documents().iter().enumerate() {
            assert_eq!(t.doc_running(i), expected_doc_words(d));
            for w in t.words() {
                assert_eq!(t.doc_word(i, w), expected_word_freq(d, w));
            }
        }
        for w in t.words() {
            assert_eq!(t.doc_freq(w), expected_doc_frequency(&c, w, Subset::All).unwrap());
            for (ci, label) in c.classes().iter().enumerate() {
                assert_eq!(
                    t.class_doc_freq(ci, w),
                    expected_doc_frequency(&c, w, Subset::Class(label)).unwrap()
                );
            }
        }
    }

    #[test]
    fn empty_page_contributes_nothing() {
        let m = parse_manifest_str("d1\tA\tp1,p2\nd2\tB\tp3\n", "m").unwrap();
        let pages = parse_prix_str("p1\tuno\t0.5\np3\tdos\t0.5\n", "t").unwrap();
        let (c, _) = validate_collection(pages, &m, false).unwrap();
        let t = build_expectation_table(&c);
        assert_eq!(t.docs()[0].pages[1].1.running, Fixed::ZERO);
        assert_eq!(t.doc_running(0), 0.5);
    }

    #[test]
    fn fold_subtraction_equals_rebuild() {
        let c = toy();
        let t = build_expectation_table(&c);
        for d in 0..c.num_documents() {
            let inc = t.stats_excluding_docs(&[d]);
            let reduced = build_expectation_table(&c.without_documents(&[d]));
            let scratch = reduced.stats();
            assert_eq!(inc.num_docs, scratch.num_docs);
            assert_eq!(inc.class_sizes, scratch.class_sizes);
            for (id, w) in t.words().iter().enumerate() {
                let fresh = reduced.word_id(w).map_or(Fixed::ZERO, |j| scratch.doc_freq[j as usize]);
                assert_eq!(inc.doc_freq[id], fresh);
            }
        }
    }

    #[test]
    fn page_exclusion_recomputes_document_max() {
        let c = toy();
        let t = build_expectation_table(&c);
        // dropping p1 from d1 leaves poder max 0.3
        let s = t.stats_excluding_page(0, 0);
        let poder = t.word_id("poder").unwrap() as usize;
        assert_eq!(s.doc_freq[poder], Fixed::from_f64(0.3) + Fixed::from_f64(1.0));
        assert_eq!(s.num_docs, 3);
        // d2 has a single page: the document disappears
        let s = t.stats_excluding_page(1, 0);
        assert_eq!(s.num_docs, 2);
        assert_eq!(s.class_sizes, [1, 1]);
    }

    #[test]
    fn table_json_round_trip() {
        let t = build_expectation_table(&toy());
        assert_eq!(ExpectationTable::from_json(&t.to_json().unwrap()).unwrap(), t);
    }
}
