//! Iterative group-tournament over the compound library: partition the
//! survivors, prompt each group, parse the model's selections, pool and
//! deduplicate, repeat until the pool is small enough.
//!
//! Every run appends to a journal as it goes, so a crashed run can be
//! resumed without re-issuing the group calls that already produced a
//! parsed selection.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compounds::{normalize_cas, partition_groups, Compound, CompoundGroup, LibraryError};
use crate::dataset::split_think;
use crate::gateway::{ChatRequest, Gateway, GatewayError, ModelParams, ScriptedBackend};
use crate::prompts::{render_screening_prompt, PromptError, ScreeningPromptSpec};

#[derive(Debug, thiserror::Error)]
pub enum ScreeningError {
    #[error("invalid tournament config: {0}")]
    InvalidConfig(String),
    #[error("empty compound library")]
    EmptyLibrary,
    #[error("round {round} left the survivor pool at {survivors}, not strictly smaller")]
    RoundStalled { round: usize, survivors: usize },
    #[error("hit the {max_rounds}-round cap with {survivors} survivors above target")]
    MaxRoundsExceeded { max_rounds: usize, survivors: usize },
    #[error("journal {path} corrupt at line {line}: {message}")]
    JournalCorrupt { path: PathBuf, line: usize, message: String },
    #[error("journal was written by a different run: {field} digest differs")]
    ConfigMismatch { field: &'static str },
    #[error(transparent)]
    Library(#[from] LibraryError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> ScreeningError {
    ScreeningError::Io { path: path.to_path_buf(), source }
}

// ==== configuration =======================================================

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TournamentConfig {
    pub group_size: usize,
    /// Selection cap per group; selections past it are truncated.
    pub per_group_max: usize,
    /// The run stops once the pool is at or below this.
    pub target_count: usize,
    pub max_rounds: usize,
    /// Extra attempts granted to a group whose reply parses to nothing.
    pub retries_per_group: u32,
    pub seed: u64,
}

impl Default for TournamentConfig {
    fn default() -> Self {
        TournamentConfig {
            group_size: 20,
            per_group_max: 3,
            target_count: 10,
            max_rounds: 12,
            retries_per_group: 2,
            seed: 0,
        }
    }
}

impl TournamentConfig {
    pub fn with_target(target_count: usize) -> Self {
        TournamentConfig { target_count, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ScreeningError> {
        let invalid = |msg: &str| Err(ScreeningError::InvalidConfig(msg.to_string()));
        if self.per_group_max == 0 {
            return invalid("per_group_max must be positive");
        }
        if self.per_group_max >= self.group_size {
            return invalid("per_group_max must be smaller than group_size");
        }
        if self.target_count == 0 {
            return invalid("target_count must be positive");
        }
        if self.max_rounds == 0 {
            return invalid("max_rounds must be positive");
        }
        Ok(())
    }
}

// ==== selections ==========================================================

/// Which parsing pass produced a selection record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionVia {
    Braces,
    Fallback,
}

/// Outcome of parsing one group's reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub round: usize,
    pub group_id: usize,
    /// The answer segment the parser ran over.
    pub raw_text: String,
    /// Group members the reply selected, in appearance order, capped at
    /// per_group_max.
    pub matched: Vec<Compound>,
    /// Extracted items that resolved to no group member.
    pub unmatched: Vec<String>,
    pub via: SelectionVia,
}

/// Brace-enclosed segments, the format the prompt instructs.
static BRACE_SEGMENT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{[^{}]*\}").expect("static regex"));
/// `name (CAS: number)` anywhere in free text; digits may be spaced or
/// hyphenated. Models under test drift into this shape despite the brace
/// instruction, so it is the fallback pass.
static NAME_CAS_ITEM: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)([^\n(){}]{1,160}?)??\s*\(\s*CAS:\s*([0-9][0-9 \t-]*[0-9])\s*\)")
        .expect("static regex")
});
/// CAS-looking token inside one extracted segment.
static CAS_IN_SEGMENT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"CAS:\s*([0-9][0-9 \t-]*[0-9])").expect("static regex"));

fn clean_name(raw: &str) -> String {
    raw.trim().trim_start_matches(['-', '*', '>', ' ', '\t']).trim_end_matches([':', ',', ' ']).to_string()
}

/// Parse one reply against its group.
///
/// Primary pass: brace-enclosed segments containing "CAS:". Fallback pass
/// (only when the primary finds none): `name (CAS: number)` patterns in
/// the whole text. Items resolve to group members by normalized CAS first,
/// then by case-folded name; anything left over lands in `unmatched`. An
/// empty record is a valid outcome, not an error.
pub fn parse_selections(
    raw: &str,
    group: &CompoundGroup,
    per_group_max: usize,
) -> SelectionRecord {
    // Alloc-free digit comparison; replies spell CAS numbers with varying
    // separators. Group sizes are small enough that a scan per item beats
    // building lookup maps.
    fn cas_digits_eq(a: &str, b: &str) -> bool {
        a.bytes().filter(u8::is_ascii_digit).eq(b.bytes().filter(u8::is_ascii_digit))
    }
    let resolve = |name: &str, cas: &str| -> Option<&Compound> {
        group.members.iter().find(|m| cas_digits_eq(&m.cas, cas)).or_else(|| {
            let folded = name.to_lowercase();
            group.members.iter().find(|m| m.name.to_lowercase() == folded)
        })
    };

    // (name, cas) item candidates in appearance order.
    let mut items: Vec<(String, String)> = Vec::new();
    let mut via = SelectionVia::Braces;
    for segment in BRACE_SEGMENT.find_iter(raw) {
        let inner = &segment.as_str()[1..segment.as_str().len() - 1];
        if !inner.contains("CAS:") {
            continue;
        }
        let cas = CAS_IN_SEGMENT
            .captures(inner)
            .map(|c| c[1].to_string())
            .unwrap_or_default();
        let name = clean_name(inner.split('(').next().unwrap_or(""));
        items.push((name, cas));
    }
    if items.is_empty() {
        via = SelectionVia::Fallback;
        for captures in NAME_CAS_ITEM.captures_iter(raw) {
            let name = clean_name(captures.get(1).map_or("", |m| m.as_str()));
            items.push((name, captures[2].to_string()));
        }
    }

    let mut matched: Vec<Compound> = Vec::new();
    let mut unmatched: Vec<String> = Vec::new();
    for (name, cas) in items {
        match resolve(&name, &cas) {
            Some(compound) if !matched.iter().any(|m| cas_digits_eq(&m.cas, &compound.cas)) => {
                matched.push(compound.clone());
            }
            Some(_) => {} // duplicate selection of the same member
            None => unmatched.push(if name.is_empty() {
                format!("(CAS: {cas})")
            } else {
                format!("{name} (CAS: {cas})")
            }),
        }
    }
    if matched.len() > per_group_max {
        log::warn!(
            "group {}: {} selections, keeping the first {}",
            group.group_id,
            matched.len(),
            per_group_max
        );
        matched.truncate(per_group_max);
    }

    SelectionRecord { round: 0, group_id: group.group_id, raw_text: raw.to_string(), matched, unmatched, via }
}

// ==== journal =============================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JournalEventKind {
    RunStarted {
        config_digest: String,
        library_digest: String,
        spec_digest: String,
        library_size: usize,
    },
    RoundStarted {
        round: usize,
        survivor_count: usize,
        group_count: usize,
    },
    GroupPrompted {
        round: usize,
        group_id: usize,
        request_digest: String,
    },
    SelectionParsed {
        record: SelectionRecord,
    },
    RoundCompleted {
        round: usize,
        survivor_cas: Vec<String>,
    },
    RunFinished {
        rounds: usize,
        survivor_cas: Vec<String>,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunJournalEvent {
    pub sequence_no: u64,
    #[serde(flatten)]
    pub kind: JournalEventKind,
}

/// Append-only JSONL journal; the single writer of a run. Every event is
/// flushed before the call returns so a crash loses at most the event in
/// flight.
pub struct JournalWriter {
    path: PathBuf,
    out: std::io::BufWriter<std::fs::File>,
    next_seq: u64,
}

impl JournalWriter {
    /// Start a fresh journal, truncating whatever was at `path`.
    pub fn create(path: &Path) -> Result<Self, ScreeningError> {
        let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        Ok(JournalWriter { path: path.to_path_buf(), out: std::io::BufWriter::new(file), next_seq: 1 })
    }

    /// Continue an existing journal at the given sequence number.
    pub fn append_to(path: &Path, next_seq: u64) -> Result<Self, ScreeningError> {
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(JournalWriter { path: path.to_path_buf(), out: std::io::BufWriter::new(file), next_seq })
    }

    pub fn write(&mut self, kind: JournalEventKind) -> Result<u64, ScreeningError> {
        let event = RunJournalEvent { sequence_no: self.next_seq, kind };
        let line = serde_json::to_string(&event).expect("journal event serializes");
        writeln!(self.out, "{line}").map_err(|e| io_err(&self.path, e))?;
        self.out.flush().map_err(|e| io_err(&self.path, e))?;
        self.next_seq += 1;
        Ok(event.sequence_no)
    }
}

/// Read a journal back, enforcing strictly increasing sequence numbers.
pub fn read_journal(path: &Path) -> Result<Vec<RunJournalEvent>, ScreeningError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let corrupt = |line: usize, message: String| ScreeningError::JournalCorrupt {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut events: Vec<RunJournalEvent> = Vec::new();
    let mut last_seq = 0u64;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let event: RunJournalEvent =
            serde_json::from_str(&line).map_err(|e| corrupt(lineno, e.to_string()))?;
        if event.sequence_no <= last_seq {
            return Err(corrupt(
                lineno,
                format!("sequence_no {} after {}", event.sequence_no, last_seq),
            ));
        }
        last_seq = event.sequence_no;
        events.push(event);
    }
    Ok(events)
}

// ==== state ===============================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TournamentState {
    /// Completed rounds so far.
    pub round: usize,
    pub survivors: Vec<Compound>,
    pub history: Vec<SelectionRecord>,
    pub finished: bool,
    /// Terminal reason once finished ("target_reached" or
    /// "max_rounds_exceeded").
    pub reason: Option<String>,
}

impl TournamentState {
    fn fresh(library: &[Compound]) -> Self {
        TournamentState {
            round: 0,
            survivors: library.to_vec(),
            history: Vec::new(),
            finished: false,
            reason: None,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hex = String::with_capacity(64);
    for byte in Sha256::digest(bytes) {
        use std::fmt::Write;
        write!(hex, "{byte:02x}").expect("write to string");
    }
    hex
}

fn config_digest(config: &TournamentConfig) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

fn spec_digest(spec: &ScreeningPromptSpec) -> String {
    sha256_hex(serde_json::to_string(spec).expect("spec serializes").as_bytes())
}

fn library_digest(library: &[Compound]) -> String {
    let mut buf = String::new();
    for compound in library {
        buf.push_str(&compound.name);
        buf.push('\t');
        buf.push_str(&compound.cas);
        buf.push('\t');
        buf.push_str(&compound.category);
        buf.push('\n');
    }
    sha256_hex(buf.as_bytes())
}

/// Per-round partition seed: rounds reshuffle, but deterministically from
/// the run seed (splitmix finalizer). Public so external tooling can
/// reproduce a round's deal from the run seed alone.
pub fn round_seed(seed: u64, round: usize) -> u64 {
    let mut z = seed ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ==== engine ==============================================================

struct Engine<'a> {
    config: &'a TournamentConfig,
    spec: &'a ScreeningPromptSpec,
    params: &'a ModelParams,
    gateway: &'a Gateway,
    journal: JournalWriter,
}

impl Engine<'_> {
    /// Run rounds until the pool is small enough or the round cap is hit.
    /// `pending` carries selections already journaled for an in-progress
    /// round when resuming.
    fn run_to_completion(
        &mut self,
        state: &mut TournamentState,
        mut pending: Option<BTreeMap<usize, SelectionRecord>>,
    ) -> Result<(), ScreeningError> {
        loop {
            if state.survivors.len() <= self.config.target_count {
                return self.finish(state, "target_reached");
            }
            if state.round >= self.config.max_rounds {
                let (max_rounds, survivors) = (self.config.max_rounds, state.survivors.len());
                self.finish(state, "max_rounds_exceeded")?;
                return Err(ScreeningError::MaxRoundsExceeded { max_rounds, survivors });
            }
            let reuse = pending.take().unwrap_or_default();
            self.run_round(state, reuse)?;
        }
    }

    fn finish(&mut self, state: &mut TournamentState, reason: &str) -> Result<(), ScreeningError> {
        state.finished = true;
        state.reason = Some(reason.to_string());
        self.journal.write(JournalEventKind::RunFinished {
            rounds: state.round,
            survivor_cas: state.survivors.iter().map(|c| c.cas.clone()).collect(),
            reason: reason.to_string(),
        })?;
        Ok(())
    }

    /// Execute one round. Groups in `reuse` already have a journaled
    /// selection and are not prompted again.
    fn run_round(
        &mut self,
        state: &mut TournamentState,
        reuse: BTreeMap<usize, SelectionRecord>,
    ) -> Result<(), ScreeningError> {
        let round = state.round + 1;
        let groups = partition_groups(
            &state.survivors,
            self.config.group_size,
            round_seed(self.config.seed, round),
        )?;
        if reuse.is_empty() {
            self.journal.write(JournalEventKind::RoundStarted {
                round,
                survivor_count: state.survivors.len(),
                group_count: groups.len(),
            })?;
        }

        // Prompt every group that still needs a selection, in one batch.
        let mut requests: Vec<(usize, ChatRequest)> = Vec::new();
        for group in &groups {
            if reuse.contains_key(&group.group_id) {
                continue;
            }
            let prompt = render_screening_prompt(self.spec, group)?;
            let request = ChatRequest::single_user(self.params, &prompt);
            self.journal.write(JournalEventKind::GroupPrompted {
                round,
                group_id: group.group_id,
                request_digest: crate::gateway::canonical_digest(&request),
            })?;
            requests.push((group.group_id, request));
        }
        let batch: Vec<ChatRequest> = requests.iter().map(|(_, r)| r.clone()).collect();
        let results = self.gateway.complete_many(&batch);

        let prompted = requests.len();
        let mut parsed: BTreeMap<usize, SelectionRecord> = reuse;
        let mut any_reply = false;
        let mut last_error = String::new();
        for ((group_id, request), result) in requests.into_iter().zip(results) {
            let group = &groups[group_id_index(&groups, group_id)];
            let mut record = match result {
                Ok(response) => {
                    any_reply = true;
                    self.parse_reply(&response.content, group)
                }
                Err(error) => {
                    log::warn!("group {group_id}: {error}");
                    last_error = error.to_string();
                    empty_record(group)
                }
            };
            // Zero matches: spend the per-group retries, bypassing the
            // response cache so a cached dud is not replayed.
            let mut attempt = 0;
            while record.matched.is_empty() && attempt < self.config.retries_per_group {
                attempt += 1;
                match self.gateway.complete_chat_fresh(&request) {
                    Ok(response) => {
                        any_reply = true;
                        record = self.parse_reply(&response.content, group);
                    }
                    Err(error) => {
                        log::warn!("group {group_id} retry {attempt}: {error}");
                        last_error = error.to_string();
                    }
                }
            }
            record.round = round;
            self.journal.write(JournalEventKind::SelectionParsed { record: record.clone() })?;
            parsed.insert(group_id, record);
        }
        // A round where the backend never answered once is an outage, not
        // an empty selection.
        if prompted > 0 && !any_reply {
            return Err(ScreeningError::Gateway(GatewayError::BackendUnavailable {
                attempts: prompted as u32,
                last_error,
            }));
        }

        // Pool in group order, dedup by normalized CAS.
        let mut survivors: Vec<Compound> = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        for group in &groups {
            let record = &parsed[&group.group_id];
            for compound in &record.matched {
                if seen.insert(normalize_cas(&compound.cas)) {
                    survivors.push(compound.clone());
                }
            }
        }
        if survivors.len() >= state.survivors.len() {
            return Err(ScreeningError::RoundStalled { round, survivors: survivors.len() });
        }

        self.journal.write(JournalEventKind::RoundCompleted {
            round,
            survivor_cas: survivors.iter().map(|c| c.cas.clone()).collect(),
        })?;
        state.round = round;
        state.survivors = survivors;
        state.history.extend(parsed.into_values());
        Ok(())
    }

    fn parse_reply(&self, content: &str, group: &CompoundGroup) -> SelectionRecord {
        // Selections live in the answer segment; reasoning inside the think
        // block routinely name-drops candidates and must not count.
        match split_think(content) {
            Ok(split) => parse_selections(&split.answer, group, self.config.per_group_max),
            Err(_) => {
                log::warn!("group {}: unbalanced think tags in reply", group.group_id);
                empty_record(group)
            }
        }
    }
}

fn empty_record(group: &CompoundGroup) -> SelectionRecord {
    SelectionRecord {
        round: 0,
        group_id: group.group_id,
        raw_text: String::new(),
        matched: Vec::new(),
        unmatched: Vec::new(),
        via: SelectionVia::Fallback,
    }
}

fn group_id_index(groups: &[CompoundGroup], group_id: usize) -> usize {
    // Group ids are assigned densely from 0 in partition order.
    debug_assert_eq!(groups[group_id].group_id, group_id);
    group_id
}

/// Run a full tournament from scratch, journaling to `journal_path`
/// (truncating any previous journal there).
pub fn run_tournament(
    library: &[Compound],
    config: &TournamentConfig,
    spec: &ScreeningPromptSpec,
    params: &ModelParams,
    gateway: &Gateway,
    journal_path: &Path,
) -> Result<TournamentState, ScreeningError> {
    config.validate()?;
    if library.is_empty() {
        return Err(ScreeningError::EmptyLibrary);
    }
    let mut journal = JournalWriter::create(journal_path)?;
    journal.write(JournalEventKind::RunStarted {
        config_digest: config_digest(config),
        library_digest: library_digest(library),
        spec_digest: spec_digest(spec),
        library_size: library.len(),
    })?;
    let mut engine = Engine { config, spec, params, gateway, journal };
    let mut state = TournamentState::fresh(library);
    engine.run_to_completion(&mut state, None)?;
    Ok(state)
}

/// Reconstruct state from a journal and finish the run. Already-journaled
/// selections are reused as-is; only groups the journal never parsed get
/// prompted. An empty journal falls back to a fresh run.
pub fn resume_from_journal(
    journal_path: &Path,
    library: &[Compound],
    config: &TournamentConfig,
    spec: &ScreeningPromptSpec,
    params: &ModelParams,
    gateway: &Gateway,
) -> Result<TournamentState, ScreeningError> {
    config.validate()?;
    if library.is_empty() {
        return Err(ScreeningError::EmptyLibrary);
    }
    let events = match read_journal(journal_path) {
        Ok(events) => events,
        Err(ScreeningError::Io { ref source, .. })
            if source.kind() == std::io::ErrorKind::NotFound =>
        {
            Vec::new()
        }
        Err(other) => return Err(other),
    };
    if events.is_empty() {
        return run_tournament(library, config, spec, params, gateway, journal_path);
    }

    let corrupt = |message: &str| ScreeningError::JournalCorrupt {
        path: journal_path.to_path_buf(),
        line: 0,
        message: message.to_string(),
    };

    let mut state = TournamentState::fresh(library);
    let mut in_round: Option<(usize, BTreeMap<usize, SelectionRecord>)> = None;
    let last_seq = events.last().map(|e| e.sequence_no).unwrap_or(0);

    for (idx, event) in events.into_iter().enumerate() {
        match (idx, event.kind) {
            (0, JournalEventKind::RunStarted { config_digest: cd, library_digest: ld, spec_digest: sd, .. }) => {
                if cd != config_digest(config) {
                    return Err(ScreeningError::ConfigMismatch { field: "config" });
                }
                if ld != library_digest(library) {
                    return Err(ScreeningError::ConfigMismatch { field: "library" });
                }
                if sd != spec_digest(spec) {
                    return Err(ScreeningError::ConfigMismatch { field: "prompt_spec" });
                }
            }
            (0, _) => return Err(corrupt("journal does not begin with run_started")),
            (_, JournalEventKind::RunStarted { .. }) => {
                return Err(corrupt("run_started appears twice"))
            }
            (_, JournalEventKind::RoundStarted { round, .. }) => {
                if round != state.round + 1 || in_round.is_some() {
                    return Err(corrupt("round_started out of order"));
                }
                in_round = Some((round, BTreeMap::new()));
            }
            (_, JournalEventKind::GroupPrompted { .. }) => {}
            (_, JournalEventKind::SelectionParsed { record }) => {
                let Some((round, parsed)) = in_round.as_mut() else {
                    return Err(corrupt("selection_parsed outside a round"));
                };
                if record.round != *round {
                    return Err(corrupt("selection_parsed for the wrong round"));
                }
                parsed.insert(record.group_id, record);
            }
            (_, JournalEventKind::RoundCompleted { round, survivor_cas }) => {
                let Some((started, parsed)) = in_round.take() else {
                    return Err(corrupt("round_completed outside a round"));
                };
                if started != round {
                    return Err(corrupt("round_completed for the wrong round"));
                }
                let mut survivors: Vec<Compound> = Vec::new();
                let mut seen: HashSet<String> = HashSet::new();
                for record in parsed.values() {
                    for compound in &record.matched {
                        if seen.insert(normalize_cas(&compound.cas)) {
                            survivors.push(compound.clone());
                        }
                    }
                }
                let pooled: Vec<&String> = survivors.iter().map(|c| &c.cas).collect();
                if pooled.len() != survivor_cas.len()
                    || pooled.iter().zip(&survivor_cas).any(|(a, b)| *a != b)
                {
                    return Err(corrupt("round_completed survivors disagree with selections"));
                }
                state.round = round;
                state.survivors = survivors;
                state.history.extend(parsed.into_values());
            }
            (_, JournalEventKind::RunFinished { reason, .. }) => {
                state.finished = true;
                state.reason = Some(reason);
            }
        }
    }
    if state.finished {
        return Ok(state);
    }

    let journal = JournalWriter::append_to(journal_path, last_seq + 1)?;
    let mut engine = Engine { config, spec, params, gateway, journal };
    engine.run_to_completion(&mut state, in_round.map(|(_, parsed)| parsed))?;
    Ok(state)
}

// ==== report ==============================================================

#[derive(Serialize)]
struct ReportSurvivor<'a> {
    name: &'a str,
    cas: &'a str,
}

#[derive(Serialize)]
struct ReportSelection<'a> {
    group_id: usize,
    matched_cas: Vec<&'a str>,
    unmatched: usize,
    via: SelectionVia,
}

/// Final report: survivors in last-round selection order, round count, and
/// per-round selection summaries.
pub fn write_report(state: &TournamentState, path: &Path) -> Result<(), ScreeningError> {
    let mut selections_by_round: Vec<Vec<ReportSelection>> =
        (0..state.round).map(|_| Vec::new()).collect();
    for record in &state.history {
        selections_by_round[record.round - 1].push(ReportSelection {
            group_id: record.group_id,
            matched_cas: record.matched.iter().map(|c| c.cas.as_str()).collect(),
            unmatched: record.unmatched.len(),
            via: record.via,
        });
    }
    let report = serde_json::json!({
        "survivors": state
            .survivors
            .iter()
            .map(|c| ReportSurvivor { name: &c.name, cas: &c.cas })
            .collect::<Vec<_>>(),
        "rounds": state.round,
        "selections_by_round": selections_by_round,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

// ==== offline selector ====================================================

/// Deterministic mock selector: reads the candidate list back out of the
/// prompt and picks the first `per_group` entries, replying in the braced
/// format with a short think block. Drives offline simulations of the full
/// tournament.
pub fn simulation_backend(per_group: usize) -> ScriptedBackend {
    ScriptedBackend::new(move |req: &ChatRequest| {
        // Candidate lines render as "- {name} (CAS: {cas})"; echo the first
        // `per_group` of them back in braces without parsing the rest.
        // Instruction bullets share the "- " prefix but not the CAS suffix.
        let prompt = &req.messages[req.messages.len() - 1].content;
        let mut reply = String::from("<think>ranked by stated criteria</think>");
        let candidates = prompt
            .lines()
            .filter_map(|l| l.strip_prefix("- "))
            .filter(|l| l.ends_with(')') && l.contains(" (CAS: "));
        for line in candidates.take(per_group) {
            reply.push('{');
            reply.push_str(line);
            reply.push_str("} ");
        }
        Ok(reply.trim_end().to_string())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compounds::cas_with_check_digit;
    use crate::gateway::{BackendConfig, BackendKind, ChatBackend};
    use crate::prompts::parse_candidate_lines;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn synthetic_library(n: usize) -> Vec<Compound> {
        (0..n)
            .map(|i| Compound {
                name: format!("compound-{i:05}"),
                cas: cas_with_check_digit(&format!("{}", 10_000 + i)).unwrap(),
                category: "synthetic".into(),
            })
            .collect()
    }

    fn test_group(names_cas: &[(&str, &str)]) -> CompoundGroup {
        CompoundGroup {
            group_id: 0,
            members: names_cas
                .iter()
                .map(|(name, cas)| Compound {
                    name: name.to_string(),
                    cas: cas.to_string(),
                    category: "additive".into(),
                })
                .collect(),
        }
    }

    fn gateway_with(backend: Box<dyn ChatBackend>) -> Gateway {
        let cfg = BackendConfig {
            kind: BackendKind::Mock,
            endpoint: None,
            fixture_path: Some(PathBuf::from("unused")),
            max_retries: 0,
            backoff_base_ms: 1,
            parallelism: 4,
            cache_dir: None,
        };
        Gateway::with_backend(backend, &cfg).unwrap()
    }

    fn sim_gateway(per_group: usize) -> Gateway {
        gateway_with(Box::new(simulation_backend(per_group)))
    }

    // ---- parsing ----------------------------------------------------

    #[test]
    fn braces_parse_one_match() {
        let group = test_group(&[("Quinuclidine", "100-76-5"), ("Thiourea", "62-56-6")]);
        let record = parse_selections("{Quinuclidine (CAS: 100-76-5)}", &group, 3);
        assert_eq!(record.via, SelectionVia::Braces);
        assert_eq!(record.matched.len(), 1);
        assert_eq!(record.matched[0].name, "Quinuclidine");
        assert!(record.unmatched.is_empty());
    }

    #[test]
    fn fallback_parses_prose_selection_line() {
        let group = test_group(&[
            ("Dimethylphosphine oxide", "7211-39-4"),
            ("5-hydroxy-2-methylbenzoic acid", "578-22-3"),
            ("2-Methoxy-4-nitrophenol", "3251-56-7"),
            ("Thiourea", "62-56-6"),
        ]);
        let raw = "Dimethylphosphine oxide (CAS: 7211-39-4), 5-Hydroxy-2-Methyl-Benzoic Acid \
                   (CAS: 578-22-3), 2-Methoxy-4-nitrophenol (CAS: 3251-56-7) are selected as \
                   they are more likely to meet the criteria compared to others, with their \
                   functional groups potentially influencing crystallization, defect \
                   passivation, and energy-level alignment, and considering solubility and \
                   compatibility.";
        let record = parse_selections(raw, &group, 3);
        assert_eq!(record.via, SelectionVia::Fallback);
        let cas: Vec<&str> = record.matched.iter().map(|c| c.cas.as_str()).collect();
        assert_eq!(cas, ["7211-39-4", "578-22-3", "3251-56-7"]);
        assert!(record.unmatched.is_empty());
    }

    #[test]
    fn spaced_cas_digits_still_match() {
        let group = test_group(&[("Dimethylphosphine oxide", "7211-39-4")]);
        let record = parse_selections("pick: {Dimethylphosphine oxide (CAS: 7211 - 39 - 4)}", &group, 3);
        assert_eq!(record.matched.len(), 1);
        assert_eq!(record.via, SelectionVia::Braces);
    }

    #[test]
    fn refusal_parses_to_empty_record() {
        let group = test_group(&[("Thiourea", "62-56-6")]);
        let record = parse_selections("no compound satisfies all criteria", &group, 3);
        assert!(record.matched.is_empty());
        assert!(record.unmatched.is_empty());
    }

    #[test]
    fn matches_by_name_when_cas_is_wrong_and_truncates() {
        let group = test_group(&[
            ("Alpha", "50-00-0"),
            ("Beta", "62-56-6"),
            ("Gamma", "100-76-5"),
            ("Delta", "57-13-6"),
        ]);
        // Wrong CAS resolves by case-folded name; fifth item is an outsider.
        let raw = "{alpha (CAS: 99-99-9)} {Beta (CAS: 62-56-6)} {Gamma (CAS: 100-76-5)} \
                   {Delta (CAS: 57-13-6)} {Omega (CAS: 64-17-5)}";
        let record = parse_selections(raw, &group, 3);
        assert_eq!(record.via, SelectionVia::Braces);
        let names: Vec<&str> = record.matched.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["Alpha", "Beta", "Gamma"], "truncated in appearance order");
        assert_eq!(record.unmatched, vec!["Omega (CAS: 64-17-5)".to_string()]);
    }

    #[test]
    fn braces_suppress_fallback_and_duplicates_collapse() {
        let group = test_group(&[("Alpha", "50-00-0"), ("Beta", "62-56-6")]);
        let raw = "{Alpha (CAS: 50-00-0)} {Alpha (CAS: 50-00-0)} and also Beta (CAS: 62-56-6)";
        let record = parse_selections(raw, &group, 3);
        assert_eq!(record.via, SelectionVia::Braces);
        assert_eq!(record.matched.len(), 1, "outside-brace mention must not count");
        assert_eq!(record.matched[0].name, "Alpha");
    }

    // ---- journal ----------------------------------------------------

    #[test]
    fn journal_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.journal");
        let mut writer = JournalWriter::create(&path).unwrap();
        writer
            .write(JournalEventKind::RoundStarted { round: 1, survivor_count: 40, group_count: 2 })
            .unwrap();
        writer
            .write(JournalEventKind::RoundCompleted { round: 1, survivor_cas: vec!["50-00-0".into()] })
            .unwrap();
        let events = read_journal(&path).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].sequence_no, 1);
        assert_eq!(events[1].sequence_no, 2);

        // Decreasing sequence numbers are corruption.
        let mut lines: Vec<String> =
            std::fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
        lines.swap(0, 1);
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(read_journal(&path), Err(ScreeningError::JournalCorrupt { .. })));

        std::fs::write(&path, "not json\n").unwrap();
        assert!(matches!(read_journal(&path), Err(ScreeningError::JournalCorrupt { .. })));
    }

    // ---- rounds and termination --------------------------------------

    #[test]
    fn forty_survivors_shrink_to_six_then_three() {
        let dir = tempfile::tempdir().unwrap();
        let library = synthetic_library(40);
        let config = TournamentConfig { target_count: 5, seed: 7, ..Default::default() };
        let state = run_tournament(
            &library,
            &config,
            &ScreeningPromptSpec::default(),
            &ModelParams::default(),
            &sim_gateway(3),
            &dir.path().join("run.journal"),
        )
        .unwrap();
        // Round 1: 2 groups of 20 yield 6; round 2: one group yields 3.
        assert!(state.finished);
        assert_eq!(state.round, 2);
        assert_eq!(state.survivors.len(), 3);
        assert_eq!(state.reason.as_deref(), Some("target_reached"));
        let round1: Vec<_> = state.history.iter().filter(|r| r.round == 1).collect();
        assert_eq!(round1.len(), 2);
        assert_eq!(round1.iter().map(|r| r.matched.len()).sum::<usize>(), 6);
    }

    #[test]
    fn four_hundred_compounds_terminate_quickly() {
        let dir = tempfile::tempdir().unwrap();
        let library = synthetic_library(400);
        let config = TournamentConfig { target_count: 5, seed: 11, ..Default::default() };
        let state = run_tournament(
            &library,
            &config,
            &ScreeningPromptSpec::default(),
            &ModelParams::default(),
            &sim_gateway(3),
            &dir.path().join("run.journal"),
        )
        .unwrap();
        assert!(state.finished);
        assert!(state.round <= 4, "took {} rounds", state.round);
        assert!(state.survivors.len() <= 5);
        // Survivor-count bound per round: matched ≤ 3 per group.
        for record in &state.history {
            assert!(record.matched.len() <= config.per_group_max);
        }
    }

    #[test]
    fn tiny_library_finishes_in_zero_rounds() {
        let dir = tempfile::tempdir().unwrap();
        let library = synthetic_library(4);
        let config = TournamentConfig { target_count: 10, ..Default::default() };
        let state = run_tournament(
            &library,
            &config,
            &ScreeningPromptSpec::default(),
            &ModelParams::default(),
            &sim_gateway(3),
            &dir.path().join("run.journal"),
        )
        .unwrap();
        assert!(state.finished);
        assert_eq!(state.round, 0);
        assert_eq!(state.survivors.len(), 4);
    }

    #[test]
    fn selecting_everything_stalls_the_round() {
        let dir = tempfile::tempdir().unwrap();
        let library = synthetic_library(3);
        let config =
            TournamentConfig { target_count: 1, retries_per_group: 0, seed: 3, ..Default::default() };
        let result = run_tournament(
            &library,
            &config,
            &ScreeningPromptSpec::default(),
            &ModelParams::default(),
            &sim_gateway(3),
            &dir.path().join("run.journal"),
        );
        assert!(matches!(result, Err(ScreeningError::RoundStalled { round: 1, survivors: 3 })));
    }

    #[test]
    fn garbage_replies_consume_retries_then_succeed() {
        let calls = Arc::new(AtomicUsize::new(0));
        let seen = calls.clone();
        let backend = ScriptedBackend::new(move |req: &ChatRequest| {
            let n = seen.fetch_add(1, Ordering::SeqCst);
            if n == 0 {
                Ok("<think>hmm</think>nothing convincing here".into())
            } else {
                let (name, cas) = parse_candidate_lines(&req.messages[0].content)
                    .into_iter()
                    .next()
                    .unwrap();
                Ok(format!("<think>ok</think>{{{name} (CAS: {cas})}}"))
            }
        });
        let dir = tempfile::tempdir().unwrap();
        let library = synthetic_library(8);
        let config = TournamentConfig {
            group_size: 8,
            per_group_max: 3,
            target_count: 1,
            retries_per_group: 2,
            seed: 1,
            ..Default::default()
        };
        let state = run_tournament(
            &library,
            &config,
            &ScreeningPromptSpec::default(),
            &ModelParams::default(),
            &gateway_with(Box::new(backend)),
            &dir.path().join("run.journal"),
        )
        .unwrap();
        assert!(state.finished);
        assert_eq!(state.survivors.len(), 1);
        assert_eq!(calls.load(Ordering::SeqCst), 2, "one dud, one retry");
    }

    #[test]
    fn max_rounds_cap_is_an_error_and_is_journaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.journal");
        let library = synthetic_library(400);
        let config =
            TournamentConfig { target_count: 5, max_rounds: 1, seed: 2, ..Default::default() };
        let result = run_tournament(
            &library,
            &config,
            &ScreeningPromptSpec::default(),
            &ModelParams::default(),
            &sim_gateway(3),
            &path,
        );
        assert!(matches!(result, Err(ScreeningError::MaxRoundsExceeded { max_rounds: 1, .. })));
        let events = read_journal(&path).unwrap();
        assert!(matches!(
            events.last().unwrap().kind,
            JournalEventKind::RunFinished { ref reason, .. } if reason == "max_rounds_exceeded"
        ));
    }

    // ---- resume -------------------------------------------------------

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let library = synthetic_library(120);
        let config = TournamentConfig { target_count: 5, seed: 17, ..Default::default() };
        let spec = ScreeningPromptSpec::default();
        let params = ModelParams::default();

        let full_path = dir.path().join("full.journal");
        let full = run_tournament(&library, &config, &spec, &params, &sim_gateway(3), &full_path)
            .unwrap();
        let journal_lines: Vec<String> =
            std::fs::read_to_string(&full_path).unwrap().lines().map(String::from).collect();

        // Truncate at a spread of event boundaries and resume each.
        for cut in (0..journal_lines.len()).step_by(3).chain([journal_lines.len() - 1]) {
            let path = dir.path().join(format!("cut-{cut}.journal"));
            std::fs::write(&path, journal_lines[..cut].join("\n")).unwrap();
            let resumed =
                resume_from_journal(&path, &library, &config, &spec, &params, &sim_gateway(3))
                    .unwrap();
            assert_eq!(resumed.survivors, full.survivors, "cut at event {cut}");
            assert_eq!(resumed.round, full.round, "cut at event {cut}");
            assert!(resumed.finished);
        }
    }

    #[test]
    fn resume_skips_already_parsed_groups() {
        let dir = tempfile::tempdir().unwrap();
        let library = synthetic_library(60);
        let config = TournamentConfig { target_count: 3, seed: 9, ..Default::default() };
        let spec = ScreeningPromptSpec::default();
        let params = ModelParams::default();
        let path = dir.path().join("run.journal");

        run_tournament(&library, &config, &spec, &params, &sim_gateway(3), &path).unwrap();
        let lines: Vec<String> =
            std::fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
        // Cut right after round 1's first two selections: run_started,
        // round_started, 3 group_prompted, 2 selection_parsed.
        let parsed_before_cut = 2;
        let cut = 2 + 3 + parsed_before_cut;
        std::fs::write(&path, lines[..cut].join("\n")).unwrap();

        let calls = Arc::new(AtomicUsize::new(0));
        let seen = calls.clone();
        let counting = ScriptedBackend::new(move |req: &ChatRequest| {
            seen.fetch_add(1, Ordering::SeqCst);
            let picks: Vec<String> = parse_candidate_lines(&req.messages[0].content)
                .into_iter()
                .take(3)
                .map(|(name, cas)| format!("{{{name} (CAS: {cas})}}"))
                .collect();
            Ok(format!("<think>t</think>{}", picks.join(" ")))
        });
        let resumed = resume_from_journal(
            &path,
            &library,
            &config,
            &spec,
            &params,
            &gateway_with(Box::new(counting)),
        )
        .unwrap();
        assert!(resumed.finished);
        // Round 1 has 3 groups, 2 already parsed: 1 remaining call, plus
        // round 2's single group (9 survivors -> 1 group).
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn resume_on_missing_or_empty_journal_is_a_fresh_run() {
        let dir = tempfile::tempdir().unwrap();
        let library = synthetic_library(40);
        let config = TournamentConfig { target_count: 5, seed: 7, ..Default::default() };
        let spec = ScreeningPromptSpec::default();
        let params = ModelParams::default();

        let missing = dir.path().join("missing.journal");
        let resumed =
            resume_from_journal(&missing, &library, &config, &spec, &params, &sim_gateway(3))
                .unwrap();
        assert!(resumed.finished);
        assert!(missing.exists(), "fresh journal written");
        let events = read_journal(&missing).unwrap();
        assert!(matches!(events[0].kind, JournalEventKind::RunStarted { .. }));
    }

    #[test]
    fn resume_rejects_a_different_config_or_library() {
        let dir = tempfile::tempdir().unwrap();
        let library = synthetic_library(40);
        let config = TournamentConfig { target_count: 5, seed: 7, ..Default::default() };
        let spec = ScreeningPromptSpec::default();
        let params = ModelParams::default();
        let path = dir.path().join("run.journal");
        run_tournament(&library, &config, &spec, &params, &sim_gateway(3), &path).unwrap();

        let reseeded = TournamentConfig { seed: 8, ..config.clone() };
        assert!(matches!(
            resume_from_journal(&path, &library, &reseeded, &spec, &params, &sim_gateway(3)),
            Err(ScreeningError::ConfigMismatch { field: "config" })
        ));
        let other_library = synthetic_library(41);
        assert!(matches!(
            resume_from_journal(&path, &other_library, &config, &spec, &params, &sim_gateway(3)),
            Err(ScreeningError::ConfigMismatch { field: "library" })
        ));
    }

    #[test]
    fn identical_inputs_give_identical_survivors() {
        let dir = tempfile::tempdir().unwrap();
        let library = synthetic_library(120);
        let config = TournamentConfig { target_count: 5, seed: 21, ..Default::default() };
        let run = |name: &str| {
            run_tournament(
                &library,
                &config,
                &ScreeningPromptSpec::default(),
                &ModelParams::default(),
                &sim_gateway(3),
                &dir.path().join(name),
            )
            .unwrap()
        };
        let a = run("a.journal");
        let b = run("b.journal");
        assert_eq!(a.survivors, b.survivors);
        assert_eq!(a.round, b.round);
    }

    #[test]
    fn report_shape() {
        let dir = tempfile::tempdir().unwrap();
        let library = synthetic_library(40);
        let config = TournamentConfig { target_count: 5, seed: 7, ..Default::default() };
        let state = run_tournament(
            &library,
            &config,
            &ScreeningPromptSpec::default(),
            &ModelParams::default(),
            &sim_gateway(3),
            &dir.path().join("run.journal"),
        )
        .unwrap();
        let report_path = dir.path().join("report.json");
        write_report(&state, &report_path).unwrap();
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
        assert_eq!(report["rounds"], 2);
        assert_eq!(report["survivors"].as_array().unwrap().len(), 3);
        assert!(report["survivors"][0]["name"].is_string());
        assert!(report["survivors"][0]["cas"].is_string());
        assert_eq!(report["selections_by_round"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TournamentConfig::default().validate().is_ok());
        let bad = TournamentConfig { per_group_max: 20, group_size: 20, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ScreeningError::InvalidConfig(_))));
        let bad = TournamentConfig { target_count: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
