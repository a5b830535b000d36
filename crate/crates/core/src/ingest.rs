//! Probabilistic-index and manifest ingestion.
//!
//! Index files are tab-separated, one spot per line:
//!
//! ```text
//! page_id <TAB> pseudo_word <TAB> prob [<TAB> x,y,w,h]
//! ```
//!
//! Manifests list one document per line:
//!
//! ```text
//! doc_id <TAB> class_label <TAB> page_id_1,page_id_2,...
//! ```
//!
//! Both accept `#` comment lines, blank lines and `\r\n` endings. A manifest may
//! also declare classes that have no documents with a `#!classes<TAB>A,B,C`
//! directive; declared classes come first in class-index order.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const COLLECTION_FORMAT: &str = "prix-collection";
pub const COLLECTION_VERSION: u32 = 1;

const CLASSES_DIRECTIVE: &str = "#!classes";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("page `{page}` declared in both {first} and {second}")]
    DuplicatePageAcrossFiles {
        page: String,
        first: String,
        second: String,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("manifest page `{page}` of document `{doc}` has no index data (strict mode)")]
    MissingPage { doc: String, page: String },
    #[error("no index files match `{0}`")]
    NoMatch(String),
    #[error("bad glob pattern: {0}")]
    Pattern(#[from] glob::PatternError),
    #[error("collection file: {0}")]
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

pub type Result<T> = std::result::Result<T, IngestError>;

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Normalized word identity: trimmed and lowercased.
pub fn normalize_word(raw: &str) -> String {
    raw.trim().to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl std::str::FromStr for BBox {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(format!("bbox must have 4 comma-separated fields, got {}", parts.len()));
        }
        let mut v = [0u32; 4];
        for (slot, part) in v.iter_mut().zip(&parts) {
            *slot = part
                .parse()
                .map_err(|_| format!("bbox field `{part}` is not a non-negative integer"))?;
        }
        Ok(BBox {
            x: v[0],
            y: v[1],
            width: v[2],
            height: v[3],
        })
    }
}

/// One spotted pseudo-word with its relevance probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrixRecord {
    pub pseudo_word: String,
    pub relevance_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

impl PrixRecord {
    pub fn new(word: &str, relevance_prob: f64) -> std::result::Result<Self, String> {
        let pseudo_word = normalize_word(word);
        if pseudo_word.is_empty() {
            return Err("empty pseudo_word".to_string());
        }
        if !(relevance_prob > 0.0 && relevance_prob <= 1.0) {
            return Err(format!("relevance_prob out of range (0,1]: {relevance_prob}"));
        }
        Ok(PrixRecord {
            pseudo_word,
            relevance_prob,
            bbox: None,
        })
    }

    pub fn with_bbox(mut self, bbox: BBox) -> Self {
        self.bbox = Some(bbox);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrixPage {
    pub page_id: String,
    pub records: Vec<PrixRecord>,
}

impl PrixPage {
    pub fn empty(page_id: impl Into<String>) -> Self {
        PrixPage {
            page_id: page_id.into(),
            records: Vec::new(),
        }
    }
}

fn split_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
}

fn is_skippable(line: &str) -> bool {
    line.trim().is_empty() || line.starts_with('#')
}

/// Parses index text. `origin` is only used in error messages.
pub fn parse_prix_str(text: &str, origin: &str) -> Result<Vec<PrixPage>> {
    let mut pages: Vec<PrixPage> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in split_lines(text) {
        if is_skippable(line) {
            continue;
        }
        let err = |reason: String| IngestError::Parse {
            path: origin.to_string(),
            line: lineno,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(err(format!("expected 3 or 4 tab-separated fields, got {}", fields.len())));
        }
        let page_id = fields[0].trim();
        if page_id.is_empty() {
            return Err(err("empty page_id".to_string()));
        }
        let prob: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| err(format!("relevance_prob `{}` is not a number", fields[2])))?;
        let mut record = PrixRecord::new(fields[1], prob).map_err(err)?;
        if let Some(b) = fields.get(3) {
            record = record.with_bbox(b.parse().map_err(err)?);
        }
        let idx = *by_id.entry(page_id.to_string()).or_insert_with(|| {
            pages.push(PrixPage::empty(page_id));
            pages.len() - 1
        });
        pages[idx].records.push(record);
    }
    Ok(pages)
}

pub fn parse_prix_file(path: &Path) -> Result<Vec<PrixPage>> {
    parse_prix_str(&read_to_string(path)?, &path.display().to_string())
}

/// Parses several index files, rejecting pages declared in more than one file.
pub fn parse_prix_files(paths: &[PathBuf]) -> Result<Vec<PrixPage>> {
    use rayon::prelude::*;
    let parsed: Vec<Vec<PrixPage>> = paths
        .par_iter()
        .map(|p| parse_prix_file(p))
        .collect::<Result<_>>()?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (file_idx, pages) in parsed.into_iter().enumerate() {
        for page in pages {
            if let Some(&first) = seen.get(&page.page_id) {
                return Err(IngestError::DuplicatePageAcrossFiles {
                    page: page.page_id,
                    first: paths[first].display().to_string(),
                    second: paths[file_idx].display().to_string(),
                });
            }
            seen.insert(page.page_id.clone(), file_idx);
            out.push(page);
        }
    }
    Ok(out)
}

/// Expands a glob into a sorted list of files.
pub fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)?.filter_map(|p| p.ok()).collect();
    paths.sort();
    if paths.is_empty() {
        return Err(IngestError::NoMatch(pattern.to_string()));
    }
    Ok(paths)
}

/// Renders pages back into the index TSV format.
pub fn write_prix_string(pages: &[PrixPage]) -> String {
    let mut out = String::new();
    for page in pages {
        for r in &page.records {
            write!(out, "{}\t{}\t{}", page.page_id, r.pseudo_word, r.relevance_prob).unwrap();
            if let Some(b) = r.bbox {
                write!(out, "\t{},{},{},{}", b.x, b.y, b.width, b.height).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDocument {
    pub doc_id: String,
    pub class_label: String,
    pub page_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentManifest {
    documents: Vec<ManifestDocument>,
    classes: Vec<String>,
}

impl DocumentManifest {
    /// Builds a manifest and checks its invariants.
    pub fn new(documents: Vec<ManifestDocument>, classes: Vec<String>) -> Result<Self> {
        let bad = |m: String| Err(IngestError::Manifest(m));
        if classes.len() < 2 {
            return bad(format!("at least 2 classes required, found {}", classes.len()));
        }
        let class_set: HashSet<&str> = classes.iter().map(String::as_str).collect();
        if class_set.len() != classes.len() {
            return bad("duplicate class label".to_string());
        }
        let mut doc_ids = HashSet::new();
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for doc in &documents {
            if !doc_ids.insert(doc.doc_id.as_str()) {
                return bad(format!("duplicate document `{}`", doc.doc_id));
            }
            if !class_set.contains(doc.class_label.as_str()) {
                return bad(format!(
                    "document `{}` references unknown class `{}`",
                    doc.doc_id, doc.class_label
                ));
            }
            if doc.page_ids.is_empty() {
                return bad(format!("empty document `{}`", doc.doc_id));
            }
            let mut local = HashSet::new();
            for page in &doc.page_ids {
                if !local.insert(page.as_str()) {
                    return bad(format!(
                        "duplicate page within document `{}`: `{page}`",
                        doc.doc_id
                    ));
                }
                if let Some(other) = owner.insert(page.as_str(), doc.doc_id.as_str()) {
                    return bad(format!(
                        "page `{page}` assigned to documents `{other}` and `{}`",
                        doc.doc_id
                    ));
                }
            }
        }
        Ok(DocumentManifest { documents, classes })
    }

    pub fn documents(&self) -> &[ManifestDocument] {
        &self.documents
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_documents(&self) -> usize {
        self.documents.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn num_pages(&self) -> usize {
        self.documents.iter().map(|d| d.page_ids.len()).sum()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CLASSES_DIRECTIVE}\t{}", self.classes.join(",")).unwrap();
        for d in &self.documents {
            writeln!(out, "{}\t{}\t{}", d.doc_id, d.class_label, d.page_ids.join(",")).unwrap();
        }
        out
    }
}

pub fn parse_manifest_str(text: &str, origin: &str) -> Result<DocumentManifest> {
    let mut declared: Vec<String> = Vec::new();
    let mut documents = Vec::new();
    for (lineno, line) in split_lines(text) {
        let err = |reason: String| IngestError::Parse {
            path: origin.to_string(),
            line: lineno,
            reason,
        };
        if let Some(rest) = line.strip_prefix(CLASSES_DIRECTIVE) {
            for label in rest.trim().split(',').map(str::trim).filter(|l| !l.is_empty()) {
                if !declared.iter().any(|d| d == label) {
                    declared.push(label.to_string());
                }
            }
            continue;
        }
        if is_skippable(line) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let doc_id = fields[0].trim();
        let class_label = fields[1].trim();
        if doc_id.is_empty() || class_label.is_empty() {
            return Err(err("empty doc_id or class_label".to_string()));
        }
        let page_ids: Vec<String> = fields[2]
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(String::from)
            .collect();
        documents.push(ManifestDocument {
            doc_id: doc_id.to_string(),
            class_label: class_label.to_string(),
            page_ids,
        });
    }
    let mut classes = declared;
    for d in &documents {
        if !classes.contains(&d.class_label) {
            classes.push(d.class_label.clone());
        }
    }
    DocumentManifest::new(documents, classes)
}

pub fn parse_manifest(path: &Path) -> Result<DocumentManifest> {
    parse_manifest_str(&read_to_string(path)?, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub class: usize,
    pub pages: Vec<PrixPage>,
}

/// A validated collection: manifest order, every manifest page resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collection {
    classes: Vec<String>,
    documents: Vec<Document>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub orphan_pages: Vec<String>,
    pub missing_pages: Vec<String>,
    pub empty_pages: Vec<String>,
}

impl ValidationReport {
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        for p in &self.orphan_pages {
            w.push(format!("orphan page `{p}` is indexed but not in the manifest; excluded"));
        }
        for p in &self.missing_pages {
            w.push(format!("manifest page `{p}` has no index data; treated as empty"));
        }
        for p in &self.empty_pages {
            w.push(format!("page `{p}` has no records"));
        }
        w
    }
}

pub fn validate_collection(
    pages: Vec<PrixPage>,
    manifest: &DocumentManifest,
    strict: bool,
) -> Result<(Collection, ValidationReport)> {
    let wanted: HashSet<&str> = manifest
        .documents()
        .iter()
        .flat_map(|d| d.page_ids.iter().map(String::as_str))
        .collect();
    let mut report = ValidationReport::default();
    let mut available: HashMap<String, PrixPage> = HashMap::new();
    for page in pages {
        if !wanted.contains(page.page_id.as_str()) {
            report.orphan_pages.push(page.page_id);
            continue;
        }
        match available.get_mut(&page.page_id) {
            Some(existing) => existing.records.extend(page.records),
            None => {
                available.insert(page.page_id.clone(), page);
            }
        }
    }
    let mut documents = Vec::with_capacity(manifest.num_documents());
    for d in manifest.documents() {
        let mut doc_pages = Vec::with_capacity(d.page_ids.len());
        for pid in &d.page_ids {
            let page = match available.remove(pid) {
                Some(p) => p,
                None if strict => {
                    return Err(IngestError::MissingPage {
                        doc: d.doc_id.clone(),
                        page: pid.clone(),
                    })
                }
                None => {
                    report.missing_pages.push(pid.clone());
                    PrixPage::empty(pid.clone())
                }
            };
            if page.records.is_empty() && !report.missing_pages.contains(pid) {
                report.empty_pages.push(pid.clone());
            }
            doc_pages.push(page);
        }
        documents.push(Document {
            doc_id: d.doc_id.clone(),
            class: manifest.class_index(&d.class_label).expect("validated manifest"),
            pages: doc_pages,
        });
    }
    for w in report.warnings() {
        log::warn!("{w}");
    }
    Ok((
        Collection {
            classes: manifest.classes().to_vec(),
            documents,
        },
        report,
    ))
}

#[derive(Serialize, Deserialize)]
struct CollectionFile {
    format: String,
    version: u32,
    collection: Collection,
}

impl Collection {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn num_documents(&self) -> usize {
        self.documents.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_pages(&self) -> usize {
        self.documents.iter().map(|d| d.pages.len()).sum()
    }

    pub fn num_records(&self) -> usize {
        self.documents
            .iter()
            .flat_map(|d| &d.pages)
            .map(|p| p.records.len())
            .sum()
    }

    pub fn manifest(&self) -> DocumentManifest {
        let documents = self
            .documents
            .iter()
            .map(|d| ManifestDocument {
                doc_id: d.doc_id.clone(),
                class_label: self.classes[d.class].clone(),
                page_ids: d.pages.iter().map(|p| p.page_id.clone()).collect(),
            })
            .collect();
        DocumentManifest::new(documents, self.classes.clone()).expect("collection is valid")
    }

    /// Documents in manifest order with the given indices removed.
    pub fn without_documents(&self, excluded: &[usize]) -> Collection {
        Collection {
            classes: self.classes.clone(),
            documents: self
                .documents
                .iter()
                .enumerate()
                .filter(|(i, _)| !excluded.contains(i))
                .map(|(_, d)| d.clone())
                .collect(),
        }
    }

    /// Versioned JSON bundle.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CollectionFile {
            format: COLLECTION_FORMAT.to_string(),
            version: COLLECTION_VERSION,
            collection: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CollectionFile = serde_json::from_str(text)?;
        if file.format != COLLECTION_FORMAT {
            return Err(IngestError::Format(format!("unexpected format `{}`", file.format)));
        }
        if file.version != COLLECTION_VERSION {
            return Err(IngestError::Format(format!(
                "unsupported version {} (expected {COLLECTION_VERSION})",
                file.version
            )));
        }
        let c = file.collection;
        // re-check invariants on load
        c.manifest_checked()?;
        Ok(c)
    }

    fn manifest_checked(&self) -> Result<DocumentManifest> {
        if self.documents.iter().any(|d| d.class >= self.classes.len()) {
            return Err(IngestError::Format("class index out of range".to_string()));
        }
        for r in self.documents.iter().flat_map(|d| &d.pages).flat_map(|p| &p.records) {
            if !(r.relevance_prob > 0.0 && r.relevance_prob <= 1.0) || r.pseudo_word.is_empty() {
                return Err(IngestError::Format(format!("invalid record {r:?}")));
            }
        }
        let documents = self
            .documents
            .iter()
            .map(|d| ManifestDocument {
                doc_id: d.doc_id.clone(),
                class_label: self.classes[d.class].clone(),
                page_ids: d.pages.iter().map(|p| p.page_id.clone()).collect(),
            })
            .collect();
        DocumentManifest::new(documents, self.classes.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?)
    }
}
