//! Tiered QA benchmark: query the model under test once per item, have a
//! judge model grade each answer against the reference on a [0, 1] scale,
//! and aggregate per-difficulty accuracies.
//!
//! Failed items are excluded from the mean but counted, so a partial
//! outage shows up in the report instead of silently skewing it.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::split_think;
use crate::gateway::{ChatRequest, Gateway, GatewayError, ModelParams};

#[derive(Debug, thiserror::Error)]
pub enum BenchmarkError {
    #[error("empty benchmark dataset")]
    EmptyDataset,
    #[error("no {tier} items in the dataset")]
    EmptyTier { tier: Difficulty },
    #[error("invalid item {item_id}: {message}")]
    InvalidItem { item_id: String, message: String },
    #[error("duplicate item id {item_id}")]
    DuplicateItem { item_id: String },
    #[error("judge reply for {item_id} has no score in [0, 1]: {reply:?}")]
    JudgeParseFailure { item_id: String, reply: String },
    #[error("duplicate verdict for item {item_id}")]
    DuplicateVerdict { item_id: String },
    #[error("verdict for unknown item {item_id}")]
    UnknownItem { item_id: String },
    #[error("invalid judge config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> BenchmarkError {
    BenchmarkError::Io { path: path.to_path_buf(), source }
}

// ==== items ===============================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub item_id: String,
    pub question: String,
    pub reference_answer: String,
    pub difficulty: Difficulty,
}

impl BenchmarkItem {
    pub fn validate(&self) -> Result<(), BenchmarkError> {
        for (field, value) in [
            ("item_id", &self.item_id),
            ("question", &self.question),
            ("reference_answer", &self.reference_answer),
        ] {
            if value.trim().is_empty() {
                return Err(BenchmarkError::InvalidItem {
                    item_id: self.item_id.clone(),
                    message: format!("{field} is empty"),
                });
            }
        }
        Ok(())
    }
}

/// Read a benchmark JSONL file, validating every item and rejecting
/// duplicate ids.
pub fn read_benchmark(path: &Path) -> Result<Vec<BenchmarkItem>, BenchmarkError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut items = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: BenchmarkItem = serde_json::from_str(&line).map_err(|e| {
            BenchmarkError::Malformed { path: path.to_path_buf(), line: idx + 1, message: e.to_string() }
        })?;
        item.validate()?;
        if !seen.insert(item.item_id.clone()) {
            return Err(BenchmarkError::DuplicateItem { item_id: item.item_id });
        }
        items.push(item);
    }
    Ok(items)
}

/// Fixture-writing counterpart of [`read_benchmark`].
pub fn write_benchmark(path: &Path, items: &[BenchmarkItem]) -> Result<(), BenchmarkError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("item serializes");
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

// ==== judging =============================================================

const DEFAULT_JUDGE_TEMPLATE: &str = "You are grading a candidate answer against a reference \
answer.\n\nQuestion:\n{question}\n\nReference answer:\n{reference}\n\nCandidate answer:\n\
{candidate}\n\nGrade how well the candidate matches the reference in substance, ignoring \
phrasing. Reply with a single decimal score between 0 and 1 first; a brief justification may \
follow.";

const PLACEHOLDERS: [&str; 3] = ["{question}", "{reference}", "{candidate}"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub params: ModelParams,
    /// Must mention `{question}`, `{reference}` and `{candidate}`.
    pub template: String,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig { params: ModelParams::default(), template: DEFAULT_JUDGE_TEMPLATE.into() }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<(), BenchmarkError> {
        for placeholder in PLACEHOLDERS {
            if !self.template.contains(placeholder) {
                return Err(BenchmarkError::InvalidConfig(format!(
                    "judge template lacks {placeholder}"
                )));
            }
        }
        Ok(())
    }
}

/// Single-pass placeholder expansion, so braces inside the substituted
/// values are never re-interpreted.
fn expand_template(template: &str, item: &BenchmarkItem, candidate: &str) -> String {
    let mut out = String::with_capacity(template.len() + candidate.len());
    let mut rest = template;
    while let Some((pos, which)) = PLACEHOLDERS
        .iter()
        .enumerate()
        .filter_map(|(i, p)| rest.find(p).map(|pos| (pos, i)))
        .min()
    {
        out.push_str(&rest[..pos]);
        out.push_str(match which {
            0 => &item.question,
            1 => &item.reference_answer,
            _ => candidate,
        });
        rest = &rest[pos + PLACEHOLDERS[which].len()..];
    }
    out.push_str(rest);
    out
}

pub fn render_judge_prompt(cfg: &JudgeConfig, item: &BenchmarkItem, candidate: &str) -> String {
    expand_template(&cfg.template, item, candidate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub item_id: String,
    /// In [0, 1].
    pub score: f64,
    pub judge_rationale: String,
}

static FIRST_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"-?(?:\d+(?:\.\d+)?|\.\d+)").expect("static regex"));

/// Pull the score out of a judge reply: think block discarded, then the
/// first decimal number must lie in [0, 1].
fn parse_judge_reply(item_id: &str, reply: &str) -> Result<(f64, String), BenchmarkError> {
    let failure = || BenchmarkError::JudgeParseFailure {
        item_id: item_id.to_string(),
        reply: reply.chars().take(120).collect(),
    };
    let answer = match split_think(reply) {
        Ok(split) => split.answer,
        Err(_) => return Err(failure()),
    };
    let score: f64 =
        FIRST_NUMBER.find(&answer).ok_or_else(failure)?.as_str().parse().map_err(|_| failure())?;
    if !(0.0..=1.0).contains(&score) {
        return Err(failure());
    }
    Ok((score, answer))
}

/// Ask the judge to grade one candidate answer.
pub fn score_item(
    item: &BenchmarkItem,
    candidate_answer: &str,
    judge_cfg: &JudgeConfig,
    gateway: &Gateway,
) -> Result<JudgeVerdict, BenchmarkError> {
    judge_cfg.validate()?;
    let prompt = render_judge_prompt(judge_cfg, item, candidate_answer);
    let response = gateway.complete_chat(&ChatRequest::single_user(&judge_cfg.params, &prompt))?;
    let (score, rationale) = parse_judge_reply(&item.item_id, &response.content)?;
    Ok(JudgeVerdict { item_id: item.item_id.clone(), score, judge_rationale: rationale })
}

// ==== aggregation =========================================================

/// Per-tier tallies. `accuracy` is absent when nothing in the tier scored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TierStats {
    pub scored: usize,
    pub failed: usize,
    pub accuracy: Option<f64>,
}

/// One item that produced no verdict, and at which stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierReport {
    pub model_id: String,
    pub easy: TierStats,
    pub medium: TierStats,
    pub hard: TierStats,
}

impl TierReport {
    pub fn tier(&self, difficulty: Difficulty) -> &TierStats {
        match difficulty {
            Difficulty::Easy => &self.easy,
            Difficulty::Medium => &self.medium,
            Difficulty::Hard => &self.hard,
        }
    }

    fn tier_mut(&mut self, difficulty: Difficulty) -> &mut TierStats {
        match difficulty {
            Difficulty::Easy => &mut self.easy,
            Difficulty::Medium => &mut self.medium,
            Difficulty::Hard => &mut self.hard,
        }
    }
}

/// Fold verdicts into a per-tier report. Items without a verdict count as
/// failed in their tier; accuracy = 100 × mean(scores in tier).
pub fn aggregate_tiers(
    model_id: &str,
    verdicts: &[JudgeVerdict],
    dataset: &[BenchmarkItem],
) -> Result<TierReport, BenchmarkError> {
    let known: HashSet<&str> = dataset.iter().map(|item| item.item_id.as_str()).collect();
    let mut by_item: HashMap<&str, f64> = HashMap::new();
    for verdict in verdicts {
        if !known.contains(verdict.item_id.as_str()) {
            return Err(BenchmarkError::UnknownItem { item_id: verdict.item_id.clone() });
        }
        if by_item.insert(verdict.item_id.as_str(), verdict.score).is_some() {
            return Err(BenchmarkError::DuplicateVerdict { item_id: verdict.item_id.clone() });
        }
    }

    let mut report = TierReport {
        model_id: model_id.to_string(),
        easy: TierStats::default(),
        medium: TierStats::default(),
        hard: TierStats::default(),
    };
    // Sums accumulate in dataset order regardless of verdict order, so the
    // aggregation is permutation-invariant down to the last float bit.
    let mut sums: HashMap<Difficulty, f64> = HashMap::new();
    for item in dataset {
        match by_item.get(item.item_id.as_str()) {
            Some(score) => {
                *sums.entry(item.difficulty).or_insert(0.0) += score;
                report.tier_mut(item.difficulty).scored += 1;
            }
            None => report.tier_mut(item.difficulty).failed += 1,
        }
    }
    for (tier, sum) in sums {
        let stats = report.tier_mut(tier);
        stats.accuracy = Some(100.0 * sum / stats.scored as f64);
    }
    Ok(report)
}

/// Run the full benchmark: one model call and one judge call per item,
/// both batched through the gateway. Per-item failures are returned
/// alongside the report rather than aborting the run.
pub fn evaluate_model(
    dataset: &[BenchmarkItem],
    model: &ModelParams,
    judge_cfg: &JudgeConfig,
    gateway: &Gateway,
) -> Result<(TierReport, Vec<ItemFailure>), BenchmarkError> {
    if dataset.is_empty() {
        return Err(BenchmarkError::EmptyDataset);
    }
    for tier in Difficulty::ALL {
        if !dataset.iter().any(|item| item.difficulty == tier) {
            return Err(BenchmarkError::EmptyTier { tier });
        }
    }
    let mut seen: HashSet<&str> = HashSet::new();
    for item in dataset {
        item.validate()?;
        if !seen.insert(item.item_id.as_str()) {
            return Err(BenchmarkError::DuplicateItem { item_id: item.item_id.clone() });
        }
    }
    judge_cfg.validate()?;

    let mut failures: Vec<ItemFailure> = Vec::new();
    let fail = |failures: &mut Vec<ItemFailure>, item: &BenchmarkItem, stage: &str, error: String| {
        failures.push(ItemFailure { item_id: item.item_id.clone(), stage: stage.to_string(), error });
    };

    // Stage 1: the model under test answers every question.
    let requests: Vec<ChatRequest> =
        dataset.iter().map(|item| ChatRequest::single_user(model, &item.question)).collect();
    let mut answered: Vec<(&BenchmarkItem, String)> = Vec::new();
    for (item, result) in dataset.iter().zip(gateway.complete_many(&requests)) {
        match result {
            Ok(response) => match split_think(&response.content) {
                Ok(split) => answered.push((item, split.answer)),
                Err(error) => fail(&mut failures, item, "model", error.to_string()),
            },
            Err(error) => fail(&mut failures, item, "model", error.to_string()),
        }
    }

    // Stage 2: the judge grades every answered item.
    let judge_requests: Vec<ChatRequest> = answered
        .iter()
        .map(|(item, answer)| {
            ChatRequest::single_user(&judge_cfg.params, &render_judge_prompt(judge_cfg, item, answer))
        })
        .collect();
    let mut verdicts: Vec<JudgeVerdict> = Vec::new();
    for ((item, _), result) in answered.iter().zip(gateway.complete_many(&judge_requests)) {
        match result {
            Ok(response) => match parse_judge_reply(&item.item_id, &response.content) {
                Ok((score, rationale)) => verdicts.push(JudgeVerdict {
                    item_id: item.item_id.clone(),
                    score,
                    judge_rationale: rationale,
                }),
                Err(error) => fail(&mut failures, item, "judge", error.to_string()),
            },
            Err(error) => fail(&mut failures, item, "judge", error.to_string()),
        }
    }

    let report = aggregate_tiers(&model.model_id, &verdicts, dataset)?;
    Ok((report, failures))
}

// ==== reference rows and export ===========================================

/// Published comparison row: per-tier accuracy for a named model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub model_id: &'static str,
    pub easy: f64,
    pub medium: f64,
    pub hard: f64,
}

/// Comparison metadata for report tables: the published per-tier
/// accuracies this harness's reports are laid out against.
pub fn reference_rows() -> [ReferenceRow; 5] {
    [
        ReferenceRow { model_id: "QwQ-32B", easy: 76.27, medium: 76.84, hard: 74.75 },
        ReferenceRow { model_id: "Doubao-seed-1.6-thinking", easy: 71.30, medium: 71.46, hard: 70.77 },
        ReferenceRow { model_id: "DeepSeek-R1", easy: 76.42, medium: 74.88, hard: 73.97 },
        ReferenceRow { model_id: "Gemini-2.5-flash-thinking", easy: 78.71, medium: 77.52, hard: 76.05 },
        ReferenceRow { model_id: "Perovskite-R1", easy: 86.92, medium: 85.06, hard: 84.63 },
    ]
}

/// One line of the tabular export.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub model_id: String,
    pub easy: Option<f64>,
    pub medium: Option<f64>,
    pub hard: Option<f64>,
}

impl From<&TierReport> for TableRow {
    fn from(report: &TierReport) -> Self {
        TableRow {
            model_id: report.model_id.clone(),
            easy: report.easy.accuracy,
            medium: report.medium.accuracy,
            hard: report.hard.accuracy,
        }
    }
}

impl From<&ReferenceRow> for TableRow {
    fn from(row: &ReferenceRow) -> Self {
        TableRow {
            model_id: row.model_id.to_string(),
            easy: Some(row.easy),
            medium: Some(row.medium),
            hard: Some(row.hard),
        }
    }
}

/// JSON report keyed by model id, then tier.
pub fn write_report_json(reports: &[TierReport], path: &Path) -> Result<(), BenchmarkError> {
    let mut table = serde_json::Map::new();
    for report in reports {
        let mut tiers = serde_json::Map::new();
        for difficulty in Difficulty::ALL {
            tiers.insert(
                difficulty.to_string(),
                serde_json::to_value(report.tier(difficulty)).expect("stats serialize"),
            );
        }
        table.insert(report.model_id.clone(), serde_json::Value::Object(tiers));
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(table))
        .expect("report serializes");
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Delimiter-separated accuracy table: header plus one row per model,
/// accuracies to two decimals, `-` for tiers with nothing scored.
pub fn write_table_dsv(rows: &[TableRow], delimiter: char, path: &Path) -> Result<(), BenchmarkError> {
    let cell = |value: Option<f64>| match value {
        Some(v) => format!("{v:.2}"),
        None => "-".to_string(),
    };
    let mut text = format!("model{delimiter}easy{delimiter}medium{delimiter}hard\n");
    for row in rows {
        text.push_str(&format!(
            "{}{delimiter}{}{delimiter}{}{delimiter}{}\n",
            row.model_id,
            cell(row.easy),
            cell(row.medium),
            cell(row.hard),
        ));
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}
