//! Instruction-dataset assembly: drive the generator model over chunks and
//! compound groups, split reasoning from answers, and export fine-tuning
//! artifacts.
//!
//! The think-tag convention is a serialization detail here: records store
//! cot and answer as separate fields and the tags are re-fused only when a
//! dataset file is written.

use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::compounds::CompoundGroup;
use crate::corpus::TextChunk;
use crate::gateway::{ChatRequest, Gateway, ModelParams};
use crate::prompts::{render_chunk_qa_prompt, render_compound_qa_prompt, PromptError, QaGenPromptSpec};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("reply opens a think block that never closes")]
    UnbalancedThinkTags,
    #[error("no {0} to generate from")]
    EmptyInput(&'static str),
    #[error("all {total} items failed; see the skip ledger")]
    AllItemsFailed { total: usize },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid override for {field}: {value}")]
    InvalidOverride { field: &'static str, value: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at {path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.to_path_buf(), source }
}

// ==== think-tag splitting =================================================

/// Result of cutting a model reply at the think tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThinkSplit {
    pub cot: String,
    pub answer: String,
    /// True when no think block was present and the whole reply became the
    /// answer; callers surface this as a warning.
    pub tags_missing: bool,
}

/// Cut `content` into chain-of-thought and final answer.
///
/// With both tags present in order, cot is the inner segment and answer is
/// everything after the closing tag, both trimmed. Without an opening tag
/// the whole reply is the answer (flagged). An opening tag that never
/// closes is an error; a stray closing tag without an opener is treated as
/// ordinary text.
pub fn split_think(content: &str) -> Result<ThinkSplit, DatasetError> {
    let Some(open) = content.find(THINK_OPEN) else {
        return Ok(ThinkSplit {
            cot: String::new(),
            answer: content.trim().to_string(),
            tags_missing: true,
        });
    };
    let inner_start = open + THINK_OPEN.len();
    let Some(close) = content[inner_start..].find(THINK_CLOSE) else {
        return Err(DatasetError::UnbalancedThinkTags);
    };
    let cot = content[inner_start..inner_start + close].trim().to_string();
    let answer = content[inner_start + close + THINK_CLOSE.len()..].trim().to_string();
    Ok(ThinkSplit { cot, answer, tags_missing: false })
}

// ==== records =============================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    PaperChunk,
    CompoundGroup,
}

/// Where a record's input came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Chunk { doc_id: String, chunk_index: usize },
    Group { group_id: usize },
}

impl Provenance {
    fn kind(&self) -> SourceKind {
        match self {
            Provenance::Chunk { .. } => SourceKind::PaperChunk,
            Provenance::Group { .. } => SourceKind::CompoundGroup,
        }
    }
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Chunk { doc_id, chunk_index } => write!(f, "{doc_id}#{chunk_index}"),
            Provenance::Group { group_id } => write!(f, "group#{group_id}"),
        }
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub record_id: String,
    pub source_kind: SourceKind,
    pub prompt: String,
    /// May be empty when the generator reply carried no think block.
    pub cot: String,
    pub answer: String,
    pub provenance: Provenance,
    /// Unix seconds at generation time.
    pub created_at: u64,
}

impl InstructionRecord {
    /// Validating constructor. Trims cot and answer; rejects an empty
    /// answer, provenance inconsistent with the source kind, and a cot
    /// containing the closing think tag (which would corrupt the fused
    /// export encoding).
    pub fn new(
        record_id: impl Into<String>,
        prompt: impl Into<String>,
        cot: impl Into<String>,
        answer: impl Into<String>,
        provenance: Provenance,
        created_at: u64,
    ) -> Result<Self, DatasetError> {
        let cot = cot.into().trim().to_string();
        let answer = answer.into().trim().to_string();
        if answer.is_empty() {
            return Err(DatasetError::InvalidRecord("answer is empty".into()));
        }
        if cot.contains(THINK_CLOSE) {
            return Err(DatasetError::InvalidRecord(
                "cot contains a closing think tag".into(),
            ));
        }
        Ok(InstructionRecord {
            record_id: record_id.into(),
            source_kind: provenance.kind(),
            prompt: prompt.into(),
            cot,
            answer,
            provenance,
            created_at,
        })
    }
}

/// Item that produced no record, and why.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipEntry {
    pub provenance: Provenance,
    pub error: String,
}

/// What a generation pass produced. Records plus skips always account for
/// every input item.
#[derive(Debug, Default)]
pub struct GenerationOutcome {
    pub records: Vec<InstructionRecord>,
    pub skips: Vec<SkipEntry>,
    pub warnings: Vec<String>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Generate one QA record per chunk via the gateway. Per-item failures
/// (gateway faults, unusable replies) become skip entries; the pass aborts
/// only when every item fails.
pub fn generate_chunk_qa(
    chunks: &[TextChunk],
    spec: &QaGenPromptSpec,
    params: &ModelParams,
    gateway: &Gateway,
) -> Result<GenerationOutcome, DatasetError> {
    if chunks.is_empty() {
        return Err(DatasetError::EmptyInput("chunks"));
    }
    let items: Vec<(String, Provenance, String)> = chunks
        .iter()
        .map(|chunk| {
            let prompt = render_chunk_qa_prompt(chunk, spec)?;
            let provenance = Provenance::Chunk {
                doc_id: chunk.doc_id.clone(),
                chunk_index: chunk.chunk_index,
            };
            Ok((format!("{}#{}", chunk.doc_id, chunk.chunk_index), provenance, prompt))
        })
        .collect::<Result<_, DatasetError>>()?;
    generate_items(items, params, gateway)
}

/// Compound-group counterpart of [`generate_chunk_qa`].
pub fn generate_compound_qa(
    groups: &[CompoundGroup],
    spec: &QaGenPromptSpec,
    params: &ModelParams,
    gateway: &Gateway,
) -> Result<GenerationOutcome, DatasetError> {
    if groups.is_empty() {
        return Err(DatasetError::EmptyInput("groups"));
    }
    let items: Vec<(String, Provenance, String)> = groups
        .iter()
        .map(|group| {
            let prompt = render_compound_qa_prompt(group, spec)?;
            let provenance = Provenance::Group { group_id: group.group_id };
            Ok((format!("group#{}", group.group_id), provenance, prompt))
        })
        .collect::<Result<_, DatasetError>>()?;
    generate_items(items, params, gateway)
}

fn generate_items(
    items: Vec<(String, Provenance, String)>,
    params: &ModelParams,
    gateway: &Gateway,
) -> Result<GenerationOutcome, DatasetError> {
    let total = items.len();
    let requests: Vec<ChatRequest> =
        items.iter().map(|(_, _, prompt)| ChatRequest::single_user(params, prompt)).collect();
    let created_at = now_unix();

    let mut outcome = GenerationOutcome::default();
    for ((record_id, provenance, prompt), result) in
        items.into_iter().zip(gateway.complete_many(&requests))
    {
        let skip = |error: String, skips: &mut Vec<SkipEntry>| {
            skips.push(SkipEntry { provenance: provenance.clone(), error });
        };
        let content = match result {
            Ok(response) => response.content,
            Err(error) => {
                skip(error.to_string(), &mut outcome.skips);
                continue;
            }
        };
        let split = match split_think(&content) {
            Ok(split) => split,
            Err(error) => {
                skip(error.to_string(), &mut outcome.skips);
                continue;
            }
        };
        if split.tags_missing {
            outcome.warnings.push(format!("{record_id}: reply has no think block"));
        }
        match InstructionRecord::new(
            record_id,
            prompt,
            split.cot,
            split.answer,
            provenance.clone(),
            created_at,
        ) {
            Ok(record) => outcome.records.push(record),
            Err(error) => skip(error.to_string(), &mut outcome.skips),
        }
    }

    debug_assert_eq!(outcome.records.len() + outcome.skips.len(), total);
    if outcome.records.is_empty() {
        return Err(DatasetError::AllItemsFailed { total });
    }
    Ok(outcome)
}

// ==== export / import =====================================================

/// On-disk dataset schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    /// `{"instruction", "input", "output"}` per line.
    InstructionTriplet,
    /// `{"messages": [user, assistant]}` per line.
    ChatMessages,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "instruction_triplet" => Ok(ExportFormat::InstructionTriplet),
            "chat_messages" => Ok(ExportFormat::ChatMessages),
            other => Err(format!("unknown export format {other:?}")),
        }
    }
}

fn fuse_output(cot: &str, answer: &str) -> String {
    format!("{THINK_OPEN}\n{cot}\n{THINK_CLOSE}\n{answer}")
}

#[derive(Serialize, Deserialize)]
struct TripletLine {
    instruction: String,
    input: String,
    output: String,
}

#[derive(Serialize, Deserialize)]
struct MessagesLine {
    messages: Vec<MessageLine>,
}

#[derive(Serialize, Deserialize)]
struct MessageLine {
    role: String,
    content: String,
}

/// Write `records` to `path` as JSONL in the chosen schema; returns the
/// line count. The model-visible reply is the fused think-tagged text in
/// both schemas, so either file trains the same behavior.
pub fn export_jsonl(
    records: &[InstructionRecord],
    format: ExportFormat,
    path: &Path,
) -> Result<usize, DatasetError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for record in records {
        let output = fuse_output(&record.cot, &record.answer);
        let line = match format {
            ExportFormat::InstructionTriplet => serde_json::to_string(&TripletLine {
                instruction: record.prompt.clone(),
                input: String::new(),
                output,
            }),
            ExportFormat::ChatMessages => serde_json::to_string(&MessagesLine {
                messages: vec![
                    MessageLine { role: "user".into(), content: record.prompt.clone() },
                    MessageLine { role: "assistant".into(), content: output },
                ],
            }),
        }
        .expect("record serializes");
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(records.len())
}

/// The prompt-visible fields of a dataset line, as read back from disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportedRecord {
    pub prompt: String,
    pub cot: String,
    pub answer: String,
}

/// Re-parse a file written by [`export_jsonl`].
pub fn import_jsonl(path: &Path, format: ExportFormat) -> Result<Vec<ImportedRecord>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let malformed = |line: usize, message: String| DatasetError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let (prompt, output) = match format {
            ExportFormat::InstructionTriplet => {
                let parsed: TripletLine =
                    serde_json::from_str(&line).map_err(|e| malformed(lineno, e.to_string()))?;
                (parsed.instruction, parsed.output)
            }
            ExportFormat::ChatMessages => {
                let parsed: MessagesLine =
                    serde_json::from_str(&line).map_err(|e| malformed(lineno, e.to_string()))?;
                if parsed.messages.len() != 2
                    || parsed.messages[0].role != "user"
                    || parsed.messages[1].role != "assistant"
                {
                    return Err(malformed(lineno, "expected a user/assistant message pair".into()));
                }
                let mut messages = parsed.messages;
                let assistant = messages.pop().expect("length checked").content;
                (messages.pop().expect("length checked").content, assistant)
            }
        };
        let split =
            split_think(&output).map_err(|e| malformed(lineno, e.to_string()))?;
        records.push(ImportedRecord { prompt, cot: split.cot, answer: split.answer });
    }
    Ok(records)
}

/// Persist skip entries as JSONL; returns the count written.
pub fn write_skip_ledger(path: &Path, skips: &[SkipEntry]) -> Result<usize, DatasetError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for entry in skips {
        let line = serde_json::to_string(entry).expect("skip entry serializes");
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(skips.len())
}

// ==== fine-tune manifest ==================================================

/// Hyperparameters handed to the external tuning framework. The defaults
/// are the configuration our production adapter was trained with; emitting
/// them as a flat key-value file keeps the contract toolchain-neutral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneManifest {
    pub base_model_id: String,
    pub adapter_rank: u32,
    pub adapter_alpha: u32,
    pub adapter_dropout: f64,
    pub precision: String,
    pub per_device_batch: u32,
    pub grad_accum_steps: u32,
    pub learning_rate: f64,
    pub schedule: String,
    pub warmup_fraction: f64,
    pub epochs: u32,
    pub fast_attention: bool,
}

impl Default for FinetuneManifest {
    fn default() -> Self {
        FinetuneManifest {
            base_model_id: "QwQ-32B".into(),
            adapter_rank: 16,
            adapter_alpha: 32,
            adapter_dropout: 0.1,
            precision: "bfloat16".into(),
            per_device_batch: 1,
            grad_accum_steps: 8,
            learning_rate: 1e-4,
            schedule: "cosine".into(),
            warmup_fraction: 0.05,
            epochs: 10,
            fast_attention: true,
        }
    }
}

impl FinetuneManifest {
    pub fn effective_batch(&self) -> u32 {
        self.per_device_batch * self.grad_accum_steps
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |field: &'static str, value: String| {
            Err(DatasetError::InvalidOverride { field, value })
        };
        for (field, value) in [
            ("adapter_rank", self.adapter_rank),
            ("adapter_alpha", self.adapter_alpha),
            ("per_device_batch", self.per_device_batch),
            ("grad_accum_steps", self.grad_accum_steps),
            ("epochs", self.epochs),
        ] {
            if value == 0 {
                return bad(field, value.to_string());
            }
        }
        for (field, value) in [
            ("adapter_dropout", self.adapter_dropout),
            ("learning_rate", self.learning_rate),
        ] {
            if !value.is_finite() || value <= 0.0 {
                return bad(field, value.to_string());
            }
        }
        if !self.warmup_fraction.is_finite()
            || self.warmup_fraction <= 0.0
            || self.warmup_fraction >= 1.0
        {
            return bad("warmup_fraction", self.warmup_fraction.to_string());
        }
        if self.base_model_id.is_empty() {
            return bad("base_model_id", "(empty)".into());
        }
        Ok(())
    }

    /// Flat `key = value` rendering, one field per line, declaration order.
    pub fn to_key_values(&self) -> String {
        format!(
            "base_model_id = {}\n\
             adapter_rank = {}\n\
             adapter_alpha = {}\n\
             adapter_dropout = {}\n\
             precision = {}\n\
             per_device_batch = {}\n\
             grad_accum_steps = {}\n\
             learning_rate = {}\n\
             schedule = {}\n\
             warmup_fraction = {}\n\
             epochs = {}\n\
             fast_attention = {}\n",
            self.base_model_id,
            self.adapter_rank,
            self.adapter_alpha,
            self.adapter_dropout,
            self.precision,
            self.per_device_batch,
            self.grad_accum_steps,
            self.learning_rate,
            self.schedule,
            self.warmup_fraction,
            self.epochs,
            self.fast_attention,
        )
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_key_values()).map_err(|e| io_err(path, e))
    }

    /// Parse the key-value rendering back; unknown keys are rejected so a
    /// drifted file fails loudly.
    pub fn parse_key_values(text: &str) -> Result<Self, DatasetError> {
        let mut manifest = FinetuneManifest::default();
        let invalid = |message: String| DatasetError::InvalidRecord(message);
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("manifest line without '=': {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_err = |e: &dyn std::fmt::Display| invalid(format!("{key}: {e}"));
            match key {
                "base_model_id" => manifest.base_model_id = value.to_string(),
                "adapter_rank" => manifest.adapter_rank = value.parse().map_err(|e| parse_err(&e))?,
                "adapter_alpha" => manifest.adapter_alpha = value.parse().map_err(|e| parse_err(&e))?,
                "adapter_dropout" => manifest.adapter_dropout = value.parse().map_err(|e| parse_err(&e))?,
                "precision" => manifest.precision = value.to_string(),
                "per_device_batch" => manifest.per_device_batch = value.parse().map_err(|e| parse_err(&e))?,
                "grad_accum_steps" => manifest.grad_accum_steps = value.parse().map_err(|e| parse_err(&e))?,
                "learning_rate" => manifest.learning_rate = value.parse().map_err(|e| parse_err(&e))?,
                "schedule" => manifest.schedule = value.to_string(),
                "warmup_fraction" => manifest.warmup_fraction = value.parse().map_err(|e| parse_err(&e))?,
                "epochs" => manifest.epochs = value.parse().map_err(|e| parse_err(&e))?,
                "fast_attention" => manifest.fast_attention = value.parse().map_err(|e| parse_err(&e))?,
                other => return Err(invalid(format!("unknown manifest key {other:?}"))),
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Field-wise overrides applied on top of the defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestOverrides {
    pub base_model_id: Option<String>,
    pub adapter_rank: Option<u32>,
    pub adapter_alpha: Option<u32>,
    pub adapter_dropout: Option<f64>,
    pub precision: Option<String>,
    pub per_device_batch: Option<u32>,
    pub grad_accum_steps: Option<u32>,
    pub learning_rate: Option<f64>,
    pub schedule: Option<String>,
    pub warmup_fraction: Option<f64>,
    pub epochs: Option<u32>,
    pub fast_attention: Option<bool>,
}

/// Defaults with `overrides` applied, validated.
pub fn emit_finetune_manifest(
    overrides: &ManifestOverrides,
) -> Result<FinetuneManifest, DatasetError> {
    let mut manifest = FinetuneManifest::default();
    macro_rules! apply {
        ($($field:ident),+ $(,)?) => {
            $(if let Some(value) = overrides.$field.clone() {
                manifest.$field = value;
            })+
        };
    }
    apply!(
        base_model_id,
        adapter_rank,
        adapter_alpha,
        adapter_dropout,
        precision,
        per_device_batch,
        grad_accum_steps,
        learning_rate,
        schedule,
        warmup_fraction,
        epochs,
        fast_attention,
    );
    manifest.validate()?;
    Ok(manifest)
}
