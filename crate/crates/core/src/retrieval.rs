//! Lexical retrieval over supplementary materials.
//!
//! Documents are split into overlapping word windows, indexed into an
//! inverted index, and ranked with Okapi BM25 (`k1 = 1.2`, `b = 0.75`,
//! `idf = ln(1 + (N - df + 0.5) / (df + 0.5))`). Building is single-writer
//! through [`IndexBuilder`]; [`IndexBuilder::publish`] freezes an immutable
//! [`Bm25Index`] that any number of readers can share.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontmatter;

pub const DEFAULT_CHUNK_SIZE: usize = 400;
pub const DEFAULT_OVERLAP: usize = 50;
pub const DEFAULT_TOP_K: usize = 4;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

pub const INDEX_FORMAT: &str = "arise-bm25-index";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("document {0} has an empty body")]
    EmptyDocument(String),
    #[error("chunk size {size} must exceed overlap {overlap}")]
    InvalidChunking { size: usize, overlap: usize },
    #[error("no documents found in {0}")]
    NoDocuments(PathBuf),
    #[error("unreadable corpus files: {}", .0.iter().map(|(p, e)| format!("{} ({e})", p.display())).collect::<Vec<_>>().join(", "))]
    Unreadable(Vec<(PathBuf, String)>),
    #[error("index file {path}: {message}")]
    IndexFile { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DocumentKind {
    Definition,
    CaseStudy,
    Article,
    Policy,
}

impl DocumentKind {
    pub fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_lowercase().replace('_', "-").as_str() {
            "definition" => Some(Self::Definition),
            "case-study" => Some(Self::CaseStudy),
            "article" => Some(Self::Article),
            "policy" => Some(Self::Policy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub kind: DocumentKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub title: String,
    pub text: String,
    /// Word offset of the chunk within its document.
    pub offset: usize,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub num_docs: usize,
    pub num_chunks: usize,
    pub avg_chunk_len_tokens: f64,
    pub vocabulary_size: usize,
}

impl fmt::Display for IndexStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "num_docs={} num_chunks={} avg_chunk_len_tokens={:.1} vocabulary_size={}",
            self.num_docs, self.num_chunks, self.avg_chunk_len_tokens, self.vocabulary_size
        )
    }
}

/// Anything that can rank chunks for a query.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, k: usize) -> Vec<RetrievedChunk>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub offset: usize,
    pub text: String,
    pub num_tokens: usize,
}

/// Splits `body` into whitespace-token windows of `chunk_size` whose starts
/// advance by `chunk_size - overlap`. The last window ends at the body's end.
///
/// Panics unless `chunk_size > overlap`.
pub fn chunk(body: &str, chunk_size: usize, overlap: usize) -> Vec<Chunk> {
    assert!(chunk_size > overlap, "chunk size must exceed overlap");
    let words: Vec<&str> = body.split_whitespace().collect();
    let stride = chunk_size - overlap;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < words.len() {
        let end = (start + chunk_size).min(words.len());
        chunks.push(Chunk {
            offset: start,
            text: words[start..end].join(" "),
            num_tokens: end - start,
        });
        if end == words.len() {
            break;
        }
        start += stride;
    }
    chunks
}

/// Index terms: maximal alphanumeric runs, lowercased.
pub fn analyze(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

// ---------------------------------------------------------------------------
// Building
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct DocEntry {
    doc: Document,
    chunks: Vec<Chunk>,
}

/// Single-writer index builder. Re-ingesting a `doc_id` replaces it.
#[derive(Debug, Clone)]
pub struct IndexBuilder {
    chunk_size: usize,
    overlap: usize,
    docs: BTreeMap<String, DocEntry>,
}

impl Default for IndexBuilder {
    fn default() -> Self {
        Self::new(DEFAULT_CHUNK_SIZE, DEFAULT_OVERLAP)
    }
}

impl IndexBuilder {
    pub fn new(chunk_size: usize, overlap: usize) -> Self {
        assert!(chunk_size > overlap, "chunk size must exceed overlap");
        Self {
            chunk_size,
            overlap,
            docs: BTreeMap::new(),
        }
    }

    pub fn try_new(chunk_size: usize, overlap: usize) -> Result<Self, RetrievalError> {
        if chunk_size <= overlap {
            return Err(RetrievalError::InvalidChunking {
                size: chunk_size,
                overlap,
            });
        }
        Ok(Self::new(chunk_size, overlap))
    }

    pub fn ingest(&mut self, doc: Document) -> Result<IndexStats, RetrievalError> {
        if doc.body.trim().is_empty() {
            return Err(RetrievalError::EmptyDocument(doc.doc_id));
        }
        let chunks = chunk(&doc.body, self.chunk_size, self.overlap);
        self.docs.insert(doc.doc_id.clone(), DocEntry { doc, chunks });
        Ok(self.stats())
    }

    pub fn stats(&self) -> IndexStats {
        let chunks = || self.docs.values().flat_map(|d| d.chunks.iter());
        let num_chunks = chunks().count();
        let tokens: usize = chunks().map(|c| c.num_tokens).sum();
        let vocabulary: BTreeSet<String> = chunks().flat_map(|c| analyze(&c.text)).collect();
        IndexStats {
            num_docs: self.docs.len(),
            num_chunks,
            avg_chunk_len_tokens: if num_chunks == 0 {
                0.0
            } else {
                tokens as f64 / num_chunks as f64
            },
            vocabulary_size: vocabulary.len(),
        }
    }

    /// Freezes the current documents into a searchable index.
    pub fn publish(&self) -> Bm25Index {
        let mut chunks = Vec::new();
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        let mut total_len = 0usize;
        // BTreeMap iteration gives (doc_id, offset) order regardless of
        // ingestion order.
        for entry in self.docs.values() {
            for c in &entry.chunks {
                let idx = chunks.len() as u32;
                let terms = analyze(&c.text);
                total_len += terms.len();
                let mut tf: BTreeMap<String, u32> = BTreeMap::new();
                for t in &terms {
                    *tf.entry(t.clone()).or_default() += 1;
                }
                for (t, n) in tf {
                    postings.entry(t).or_default().push((idx, n));
                }
                chunks.push(IndexedChunk {
                    chunk_id: format!("{}#{}", entry.doc.doc_id, c.offset),
                    doc_id: entry.doc.doc_id.clone(),
                    title: entry.doc.title.clone(),
                    text: c.text.clone(),
                    offset: c.offset,
                    num_terms: terms.len() as u32,
                });
            }
        }
        let avgdl = if chunks.is_empty() {
            0.0
        } else {
            total_len as f64 / chunks.len() as f64
        };
        Bm25Index {
            stats: self.stats(),
            chunk_size: self.chunk_size,
            overlap: self.overlap,
            documents: self.docs.values().map(|d| d.doc.clone()).collect(),
            chunks,
            postings,
            avgdl,
        }
    }
}

// ---------------------------------------------------------------------------
// Searching
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct IndexedChunk {
    chunk_id: String,
    doc_id: String,
    title: String,
    text: String,
    offset: usize,
    num_terms: u32,
}

/// Immutable BM25 index. Chunks are stored in `(doc_id, offset)` order, so a
/// chunk's position doubles as the tie-break key.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    stats: IndexStats,
    chunk_size: usize,
    overlap: usize,
    documents: Vec<Document>,
    chunks: Vec<IndexedChunk>,
    postings: HashMap<String, Vec<(u32, u32)>>,
    avgdl: f64,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    chunk_size: usize,
    overlap: usize,
    documents: Vec<Document>,
}

impl Bm25Index {
    pub fn stats(&self) -> IndexStats {
        self.stats
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.chunks.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn search(&self, query: &str, k: usize) -> Vec<RetrievedChunk> {
        if k == 0 || self.chunks.is_empty() || self.avgdl == 0.0 {
            return Vec::new();
        }
        let mut scores = vec![0.0f64; self.chunks.len()];
        let mut touched = vec![false; self.chunks.len()];
        // Contributions are added per query token in query order.
        for term in analyze(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for &(idx, tf) in list {
                let idx = idx as usize;
                let tf = tf as f64;
                let dl = self.chunks[idx].num_terms as f64;
                scores[idx] += idf * tf * (BM25_K1 + 1.0)
                    / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * dl / self.avgdl));
                touched[idx] = true;
            }
        }
        let mut ranked: Vec<usize> = (0..self.chunks.len())
            .filter(|&i| touched[i] && scores[i] > 0.0)
            .collect();
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        ranked.truncate(k);
        ranked
            .into_iter()
            .enumerate()
            .map(|(r, i)| {
                let c = &self.chunks[i];
                RetrievedChunk {
                    chunk_id: c.chunk_id.clone(),
                    doc_id: c.doc_id.clone(),
                    title: c.title.clone(),
                    text: c.text.clone(),
                    offset: c.offset,
                    score: scores[i],
                    rank: r + 1,
                }
            })
            .collect()
    }

    /// Writes the versioned JSON index file. Output bytes depend only on the
    /// indexed documents and chunking parameters.
    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let file = IndexFile {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            chunk_size: self.chunk_size,
            overlap: self.overlap,
            documents: self.documents.clone(),
        };
        let json = serde_json::to_string_pretty(&file).expect("index serializes");
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let err = |message: String| RetrievalError::IndexFile {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: IndexFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if file.format != INDEX_FORMAT || file.version != INDEX_VERSION {
            return Err(err(format!(
                "unsupported index format {} v{}",
                file.format, file.version
            )));
        }
        let mut builder = IndexBuilder::try_new(file.chunk_size, file.overlap)?;
        for d in file.documents {
            builder.ingest(d)?;
        }
        Ok(builder.publish())
    }
}

impl Retriever for Bm25Index {
    fn retrieve(&self, query: &str, k: usize) -> Vec<RetrievedChunk> {
        self.search(query, k)
    }
}

// ---------------------------------------------------------------------------
// Corpus directories
// ---------------------------------------------------------------------------

/// Reads every `.txt`/`.md` file under `dir` (sorted by path) as a document
/// with a `doc_id`/`title`/`kind` front-matter header.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<Document>, RetrievalError> {
    let mut paths = Vec::new();
    collect_files(dir, &mut paths)?;
    paths.sort();
    let mut docs = Vec::new();
    let mut offenders = Vec::new();
    for path in paths {
        match read_document(&path) {
            Ok(d) => docs.push(d),
            Err(e) => offenders.push((path, e)),
        }
    }
    if !offenders.is_empty() {
        return Err(RetrievalError::Unreadable(offenders));
    }
    if docs.is_empty() {
        return Err(RetrievalError::NoDocuments(dir.to_path_buf()));
    }
    Ok(docs)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), RetrievalError> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if matches!(path.extension().and_then(|e| e.to_str()), Some("txt" | "md")) {
            out.push(path);
        }
    }
    Ok(())
}

fn read_document(path: &Path) -> Result<Document, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let fm = frontmatter::parse(&text).ok_or("missing or unterminated front-matter")?;
    let doc_id = fm.get("doc_id").ok_or("missing doc_id")?.to_string();
    let title = fm.get("title").unwrap_or(&doc_id).to_string();
    let kind = fm
        .get("kind")
        .map(|k| DocumentKind::parse(k).ok_or(format!("unknown kind {k:?}")))
        .transpose()?
        .unwrap_or(DocumentKind::Article);
    if fm.body.is_empty() {
        return Err("empty body".into());
    }
    Ok(Document {
        doc_id,
        title,
        body: fm.body,
        kind,
    })
}
