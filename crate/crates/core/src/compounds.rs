//! Candidate compound library: parsing, CAS registry validation and the
//! seeded group partition that feeds the screening tournament.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("library file is missing required column {0:?}")]
    MissingColumn(&'static str),
    #[error("line {line}: empty {column} field")]
    EmptyField { line: u64, column: &'static str },
    #[error("line {line}: invalid CAS number {value:?}")]
    InvalidCas { line: u64, value: String },
    #[error("line {line}: category {value:?} is not in the configured set")]
    UnknownCategory { line: u64, value: String },
    #[error("line {line}: duplicate CAS number {value}")]
    DuplicateCas { line: u64, value: String },
    #[error("group size {got} is too small; selecting up to 3 must strictly shrink a group, so 4 is the floor")]
    GroupSizeTooSmall { got: usize },
    #[error("compound library is empty")]
    EmptyLibrary,
    #[error("invalid category set: {0}")]
    InvalidCategories(String),
}

/// One catalog entry. `cas` is kept exactly as written; use
/// [`normalize_cas`] when comparing entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compound {
    pub name: String,
    pub cas: String,
    pub category: String,
}

/// Digits of a CAS string, everything else dropped. Two spellings of the
/// same registry number ("50-00-0", "50 - 00 - 0") normalize identically.
pub fn normalize_cas(cas: &str) -> String {
    cas.chars().filter(|c| c.is_ascii_digit()).collect()
}

/// True iff `cas` has the canonical `2-7 digits, 2 digits, 1 digit` shape
/// and its mod-10 check digit is consistent.
///
/// The check digit is the last digit of the weighted sum of all preceding
/// digits, taken right to left with weights 1, 2, 3, ...
pub fn validate_cas(cas: &str) -> bool {
    let parts: Vec<&str> = cas.split('-').collect();
    if parts.len() != 3 {
        return false;
    }
    let all_digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !(2..=7).contains(&parts[0].len())
        || parts[1].len() != 2
        || parts[2].len() != 1
        || !all_digits(parts[0])
        || !all_digits(parts[1])
        || !all_digits(parts[2])
    {
        return false;
    }
    let check = (parts[2].as_bytes()[0] - b'0') as u32;
    check_digit(parts[0], parts[1]) == check
}

fn check_digit(seg1: &str, seg2: &str) -> u32 {
    let sum: u32 = seg1
        .bytes()
        .chain(seg2.bytes())
        .rev()
        .enumerate()
        .map(|(i, b)| (i as u32 + 1) * (b - b'0') as u32)
        .sum();
    sum % 10
}

/// Format a registry body (first two segments, digits only, 4 to 9 of them)
/// into a full CAS string with the computed check digit. Handy for
/// synthesizing valid fixtures.
pub fn cas_with_check_digit(body: &str) -> Option<String> {
    if !(4..=9).contains(&body.len()) || !body.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let (seg1, seg2) = body.split_at(body.len() - 2);
    Some(format!("{seg1}-{seg2}-{}", check_digit(seg1, seg2)))
}

/// Allowed category labels for a library file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySet {
    labels: Vec<String>,
}

impl CategorySet {
    pub fn new(labels: Vec<String>) -> Result<Self, LibraryError> {
        if labels.is_empty() {
            return Err(LibraryError::InvalidCategories("label list is empty".into()));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(LibraryError::InvalidCategories("blank label".into()));
            }
            if !seen.insert(label.as_str()) {
                return Err(LibraryError::InvalidCategories(format!("duplicate label {label:?}")));
            }
        }
        Ok(CategorySet { labels })
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Shape of the library file on disk.
#[derive(Debug, Clone)]
pub struct LibraryFormat {
    /// Field delimiter; the vendor export is tab-separated.
    pub delimiter: u8,
    /// When set, every row's category must be one of these labels.
    pub categories: Option<CategorySet>,
}

impl Default for LibraryFormat {
    fn default() -> Self {
        LibraryFormat { delimiter: b'\t', categories: None }
    }
}

/// Parse a delimited library file with a `name`/`cas`/`category` header.
///
/// Every CAS number must pass [`validate_cas`] and be unique after
/// normalization; offending rows are reported with their 1-based file line.
pub fn parse_library(path: &Path, format: &LibraryFormat) -> Result<Vec<Compound>, LibraryError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;

    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() == 0 || (headers.len() == 1 && headers[0].trim().is_empty()) {
        // A zero-byte file has no header and no rows: an empty library.
        return Ok(Vec::new());
    }
    let col = |name: &'static str| -> Result<usize, LibraryError> {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or(LibraryError::MissingColumn(name))
    };
    let name_col = col("name")?;
    let cas_col = col("cas")?;
    let category_col = col("category")?;

    let mut seen: HashSet<String> = HashSet::new();
    let mut compounds = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize, column: &'static str| -> Result<String, LibraryError> {
            let value = record.get(idx).unwrap_or("").trim();
            if value.is_empty() {
                return Err(LibraryError::EmptyField { line, column });
            }
            Ok(value.to_string())
        };
        let name = field(name_col, "name")?;
        let cas = field(cas_col, "cas")?;
        let category = field(category_col, "category")?;

        if !validate_cas(&cas) {
            return Err(LibraryError::InvalidCas { line, value: cas });
        }
        if let Some(set) = &format.categories {
            if !set.contains(&category) {
                return Err(LibraryError::UnknownCategory { line, value: category });
            }
        }
        if !seen.insert(normalize_cas(&cas)) {
            return Err(LibraryError::DuplicateCas { line, value: cas });
        }
        compounds.push(Compound { name, cas, category });
    }
    Ok(compounds)
}

fn csv_err(path: &Path, e: csv::Error) -> LibraryError {
    match e.kind() {
        csv::ErrorKind::Io(_) => {
            if let csv::ErrorKind::Io(io) = e.into_kind() {
                LibraryError::Io { path: path.to_path_buf(), source: io }
            } else {
                unreachable!()
            }
        }
        _ => LibraryError::Csv { path: path.to_path_buf(), source: e },
    }
}

/// One screening group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompoundGroup {
    pub group_id: usize,
    pub members: Vec<Compound>,
}

/// Deal `compounds` into `ceil(n / group_size)` groups after a seeded
/// shuffle. Group sizes differ by at most one, ids run 0, 1, 2, ... and the
/// same seed always produces the same deal.
///
/// `group_size` below 4 is rejected: the tournament caps selections at 3
/// per group, and a smaller group could not shrink.
pub fn partition_groups(
    compounds: &[Compound],
    group_size: usize,
    seed: u64,
) -> Result<Vec<CompoundGroup>, LibraryError> {
    if group_size < 4 {
        return Err(LibraryError::GroupSizeTooSmall { got: group_size });
    }
    let n = compounds.len();
    if n == 0 {
        return Err(LibraryError::EmptyLibrary);
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let group_count = n.div_ceil(group_size);
    let base = n / group_count;
    let extra = n % group_count;

    let mut groups = Vec::with_capacity(group_count);
    let mut cursor = 0usize;
    for group_id in 0..group_count {
        let take = base + usize::from(group_id < extra);
        let members = order[cursor..cursor + take]
            .iter()
            .map(|&i| compounds[i].clone())
            .collect();
        groups.push(CompoundGroup { group_id, members });
        cursor += take;
    }
    debug_assert_eq!(cursor, n);
    Ok(groups)
}
