//! Document ingestion and sliding-window chunking.
//!
//! Articles arrive as plain text plus a manifest line (id, title, source
//! tag). The chunker slices each body into token-budgeted windows that
//! overlap by a fixed fraction of the budget, so no question-generation
//! prompt ever straddles a hard cut.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tokenize::{self, Span};

/// Errors surfaced by manifest loading and chunking.
#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("document {doc_id} has an empty body")]
    EmptyDocument { doc_id: String },
    #[error("invalid chunking policy: {0}")]
    InvalidPolicy(String),
    #[error("unknown token estimator {0:?}")]
    UnknownEstimator(String),
    #[error("duplicate doc_id {doc_id} in manifest")]
    DuplicateDocId { doc_id: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {path}:{line}: {source}")]
    Malformed {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.to_path_buf(), source }
}

/// Exact non-negative rational. The chunk overlap is kept as a ratio rather
/// than a float so stride arithmetic never suffers binary rounding: with a
/// 2500-token budget and 1/5 overlap the stride must be exactly 2000.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    num: u32,
    den: u32,
}

impl Fraction {
    pub fn new(num: u32, den: u32) -> Result<Self, CorpusError> {
        if den == 0 {
            return Err(CorpusError::InvalidPolicy("fraction denominator is zero".into()));
        }
        let g = gcd(num, den);
        Ok(Fraction { num: num / g, den: den / g })
    }

    /// Nearest fraction with denominator 10_000; enough for any overlap a
    /// config file will plausibly state (0.2, 0.25, 0.125, ...).
    pub fn from_f64(value: f64) -> Result<Self, CorpusError> {
        if !value.is_finite() || value < 0.0 {
            return Err(CorpusError::InvalidPolicy(format!(
                "fraction must be finite and non-negative, got {value}"
            )));
        }
        let scaled = (value * 10_000.0).round();
        if scaled > u32::MAX as f64 {
            return Err(CorpusError::InvalidPolicy(format!("fraction {value} out of range")));
        }
        Fraction::new(scaled as u32, 10_000)
    }

    pub fn numerator(&self) -> u32 {
        self.num
    }

    pub fn denominator(&self) -> u32 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a.max(1)
}

/// How a document body is measured and sliced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingPolicy {
    /// Maximum tokens per chunk.
    pub token_budget: usize,
    /// Fraction of the budget shared between consecutive chunks, in [0, 1).
    pub overlap: Fraction,
    /// Key into the estimator registry, see [`estimator_for`].
    pub estimator_id: String,
}

impl Default for ChunkingPolicy {
    fn default() -> Self {
        ChunkingPolicy {
            token_budget: 2500,
            overlap: Fraction { num: 1, den: 5 },
            estimator_id: WHITESPACE_ESTIMATOR_ID.to_string(),
        }
    }
}

impl ChunkingPolicy {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.token_budget == 0 {
            return Err(CorpusError::InvalidPolicy("token_budget must be positive".into()));
        }
        if self.overlap.num >= self.overlap.den {
            return Err(CorpusError::InvalidPolicy(format!(
                "overlap {} must be below 1",
                self.overlap
            )));
        }
        if self.stride() == 0 {
            return Err(CorpusError::InvalidPolicy(format!(
                "budget {} with overlap {} gives a zero stride",
                self.token_budget, self.overlap
            )));
        }
        estimator_for(&self.estimator_id)?;
        Ok(())
    }

    /// Window advance in tokens: floor(budget * (1 - overlap)), computed in
    /// integer arithmetic.
    pub fn stride(&self) -> usize {
        let budget = self.token_budget as u64;
        let num = self.overlap.num as u64;
        let den = self.overlap.den as u64;
        (budget * (den - num) / den) as usize
    }

    /// Tokens shared between consecutive windows.
    pub fn overlap_tokens(&self) -> usize {
        self.token_budget - self.stride()
    }
}

/// Pluggable token counter. Chunk boundaries are expressed in this
/// estimator's token indices, so swapping estimators re-chunks consistently.
pub trait TokenEstimator: Send + Sync {
    fn id(&self) -> &'static str;
    /// Byte spans of the tokens of `text`, in order.
    fn token_spans(&self, text: &str) -> Vec<Span>;
    fn estimate(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }
}

pub const WHITESPACE_ESTIMATOR_ID: &str = "whitespace-words";

/// Counts maximal non-whitespace runs. Crude next to a BPE vocabulary but
/// stable across model vendors, which matters more for reproducible corpus
/// slicing.
pub struct WhitespaceEstimator;

impl TokenEstimator for WhitespaceEstimator {
    fn id(&self) -> &'static str {
        WHITESPACE_ESTIMATOR_ID
    }

    fn token_spans(&self, text: &str) -> Vec<Span> {
        tokenize::token_spans(text)
    }

    fn estimate(&self, text: &str) -> usize {
        tokenize::token_count(text)
    }
}

static WHITESPACE: WhitespaceEstimator = WhitespaceEstimator;

/// Registry lookup for `ChunkingPolicy::estimator_id`.
pub fn estimator_for(id: &str) -> Result<&'static dyn TokenEstimator, CorpusError> {
    match id {
        WHITESPACE_ESTIMATOR_ID => Ok(&WHITESPACE),
        other => Err(CorpusError::UnknownEstimator(other.to_string())),
    }
}

/// Token count of `text` under the policy's estimator.
pub fn estimate_tokens(text: &str, policy: &ChunkingPolicy) -> Result<usize, CorpusError> {
    Ok(estimator_for(&policy.estimator_id)?.estimate(text))
}

/// One harvested article.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    /// Where the text came from (journal, preprint server, ...).
    pub source_tag: String,
}

/// A contiguous token window of one document. `token_start..token_end` are
/// indices into the estimator's token sequence; `text` is the exact slice of
/// the body between the first and last token byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextChunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub token_start: usize,
    pub token_end: usize,
    pub text: String,
}

impl TextChunk {
    pub fn token_len(&self) -> usize {
        self.token_end - self.token_start
    }
}

/// Slice `doc` into overlapping windows.
///
/// Window starts advance by `policy.stride()`; every window holds at most
/// `token_budget` tokens; the run stops after the first window whose end
/// reaches the last token, so every token of the body is covered exactly
/// once per window that sees it and the final window may be short.
pub fn chunk_document(
    doc: &DocumentRecord,
    policy: &ChunkingPolicy,
) -> Result<Vec<TextChunk>, CorpusError> {
    policy.validate()?;
    let estimator = estimator_for(&policy.estimator_id)?;
    let spans = estimator.token_spans(&doc.body);
    let total = spans.len();
    if total == 0 {
        return Err(CorpusError::EmptyDocument { doc_id: doc.doc_id.clone() });
    }

    let stride = policy.stride();
    let mut chunks = Vec::with_capacity(total / stride + 1);
    let mut start = 0usize;
    loop {
        let end = (start + policy.token_budget).min(total);
        let byte_start = spans[start].0;
        let byte_end = spans[end - 1].1;
        chunks.push(TextChunk {
            doc_id: doc.doc_id.clone(),
            chunk_index: chunks.len(),
            token_start: start,
            token_end: end,
            text: doc.body[byte_start..byte_end].to_string(),
        });
        if end == total {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

/// Manifest line describing where one document lives on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub title: String,
    pub source_tag: String,
    /// Body file, absolute or relative to the manifest's directory.
    pub path: PathBuf,
}

/// Parse a JSONL manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut entries = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            CorpusError::Malformed { path: path.to_path_buf(), line: idx + 1, source: e }
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Load every document named by the manifest. Duplicate ids are rejected so
/// chunk provenance stays unambiguous.
pub fn load_documents(manifest_path: &Path) -> Result<Vec<DocumentRecord>, CorpusError> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = std::collections::HashSet::new();
    let mut docs = Vec::with_capacity(entries.len());
    for entry in entries {
        if !seen.insert(entry.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId { doc_id: entry.doc_id });
        }
        let path = if entry.path.is_absolute() { entry.path.clone() } else { base.join(&entry.path) };
        let body = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        docs.push(DocumentRecord {
            doc_id: entry.doc_id,
            title: entry.title,
            body,
            source_tag: entry.source_tag,
        });
    }
    Ok(docs)
}

/// Write chunks as JSONL, one chunk per line.
pub fn write_chunks(path: &Path, chunks: &[TextChunk]) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for chunk in chunks {
        let line = serde_json::to_string(chunk).expect("chunk serializes");
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Read chunks written by [`write_chunks`].
pub fn read_chunks(path: &Path) -> Result<Vec<TextChunk>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut chunks = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let chunk: TextChunk = serde_json::from_str(&line).map_err(|e| {
            CorpusError::Malformed { path: path.to_path_buf(), line: idx + 1, source: e }
        })?;
        chunks.push(chunk);
    }
    Ok(chunks)
}
