//! One function per subcommand.
//!
//! Each returns the JSON payload of its run summary; `main` merges in the
//! status and timing metadata and writes the summary file. Output artifacts
//! carry no wall-clock values, so a rerun with the same config and fixtures
//! reproduces them byte for byte.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use pskit_core::analytics::{
    compute_tfidf, term_frequencies, tsne_embed, write_embedding, write_term_frequencies,
};
use pskit_core::benchmark::{
    evaluate_model, read_benchmark, reference_rows, write_report_json, write_table_dsv, TableRow,
};
use pskit_core::compounds::{parse_library, partition_groups, LibraryFormat};
use pskit_core::corpus::{chunk_document, load_documents, read_chunks, write_chunks, TextChunk};
use pskit_core::dataset::{
    emit_finetune_manifest, export_jsonl, generate_chunk_qa, generate_compound_qa, import_jsonl,
    write_skip_ledger, ExportFormat,
};
use pskit_core::gateway::Gateway;
use pskit_core::prompts::{QaGenPromptSpec, ScreeningPromptSpec};
use pskit_core::screening::{resume_from_journal, write_report};

use crate::config::RunConfig;
use crate::CliError;

/// Row count of the term frequency table.
const TOP_TERMS: usize = 50;

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(format!("{key} is required for this command")))
}

fn gateway(config: &RunConfig) -> Result<Gateway, CliError> {
    Ok(Gateway::new(&config.effective_backend()?)?)
}

// ==== chunk ===============================================================

pub fn chunk(config: &RunConfig) -> Result<Value, CliError> {
    let manifest = require(&config.paths.corpus_manifest, "paths.corpus_manifest")?;
    let docs = load_documents(manifest)?;
    let mut chunks: Vec<TextChunk> = Vec::new();
    let mut per_doc = Vec::with_capacity(docs.len());
    for doc in &docs {
        let doc_chunks = chunk_document(doc, &config.chunking)?;
        println!("{}: {} chunks", doc.doc_id, doc_chunks.len());
        per_doc.push(json!({"doc_id": doc.doc_id, "chunks": doc_chunks.len()}));
        chunks.extend(doc_chunks);
    }
    let store = config.paths.chunk_store();
    write_chunks(&store, &chunks)?;
    Ok(json!({
        "counts": {"documents": docs.len(), "chunks": chunks.len(), "per_doc": per_doc},
        "outputs": {"chunks": store},
    }))
}

// ==== dataset =============================================================

pub fn dataset(config: &RunConfig) -> Result<Value, CliError> {
    let store = config.paths.chunk_store();
    if !store.exists() {
        return Err(CliError::Config(format!(
            "chunk store not found: {} (run `pskit chunk` first or set paths.chunks)",
            store.display()
        )));
    }
    let chunks = read_chunks(&store)?;
    let spec = match &config.paths.qa_prompt {
        Some(path) => QaGenPromptSpec::load(path)?,
        None => QaGenPromptSpec::chunk_default(),
    };
    let gateway = gateway(config)?;
    let mut outcome = generate_chunk_qa(&chunks, &spec, &config.model, &gateway)?;
    let chunk_records = outcome.records.len();

    // Group questions come in only when a library is configured. A loaded
    // qa spec is chunk-shaped, so groups always use the built-in group spec.
    let mut group_records = 0;
    if let Some(library_path) = &config.paths.library {
        let library = parse_library(library_path, &LibraryFormat::default())?;
        let groups =
            partition_groups(&library, config.tournament.group_size, config.tournament.seed)?;
        let group_outcome = generate_compound_qa(
            &groups,
            &QaGenPromptSpec::compound_default(),
            &config.model,
            &gateway,
        )?;
        group_records = group_outcome.records.len();
        outcome.records.extend(group_outcome.records);
        outcome.skips.extend(group_outcome.skips);
        outcome.warnings.extend(group_outcome.warnings);
    }
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }

    let triplets = config.paths.dataset_store();
    let messages = config.paths.out_dir.join("dataset_messages.jsonl");
    let skips = config.paths.out_dir.join("dataset_skips.jsonl");
    export_jsonl(&outcome.records, ExportFormat::InstructionTriplet, &triplets)?;
    export_jsonl(&outcome.records, ExportFormat::ChatMessages, &messages)?;
    write_skip_ledger(&skips, &outcome.skips)?;
    Ok(json!({
        "counts": {
            "records": outcome.records.len(),
            "chunk_records": chunk_records,
            "group_records": group_records,
            "skips": outcome.skips.len(),
        },
        "outputs": {"triplets": triplets, "messages": messages, "skips": skips},
    }))
}

// ==== screen ==============================================================

pub fn screen(config: &RunConfig) -> Result<Value, CliError> {
    let library_path = require(&config.paths.library, "paths.library")?;
    let library = parse_library(library_path, &LibraryFormat::default())?;
    let spec = match &config.paths.screening_prompt {
        Some(path) => ScreeningPromptSpec::load(path)?,
        None => ScreeningPromptSpec::default(),
    };
    let gateway = gateway(config)?;
    let journal = config.paths.out_dir.join("screen_journal.jsonl");
    // A leftover journal is a crashed (or already finished) run: resume it.
    // Fresh runs start fresh because resume falls back on an absent journal.
    let state = resume_from_journal(
        &journal,
        &library,
        &config.tournament,
        &spec,
        &config.model,
        &gateway,
    )?;
    let report = config.paths.out_dir.join("screen_report.json");
    write_report(&state, &report)?;
    let survivors: Vec<Value> =
        state.survivors.iter().map(|c| json!({"name": c.name, "cas": c.cas})).collect();
    Ok(json!({
        "counts": {
            "library": library.len(),
            "survivors": state.survivors.len(),
            "rounds": state.round,
        },
        "survivors": survivors,
        "finished": state.finished,
        "reason": state.reason,
        "outputs": {"journal": journal, "report": report},
    }))
}

// ==== bench ===============================================================

pub fn bench(config: &RunConfig) -> Result<Value, CliError> {
    let dataset_path = require(&config.paths.benchmark, "paths.benchmark")?;
    let items = read_benchmark(dataset_path)?;
    let gateway = gateway(config)?;
    let (report, failures) = evaluate_model(&items, &config.model, &config.judge, &gateway)?;
    for failure in &failures {
        eprintln!("warning: item {} failed at {}: {}", failure.item_id, failure.stage, failure.error);
    }
    let report_path = config.paths.out_dir.join("bench_report.json");
    write_report_json(std::slice::from_ref(&report), &report_path)?;
    let mut rows: Vec<TableRow> = reference_rows().iter().map(TableRow::from).collect();
    rows.push(TableRow::from(&report));
    let table_path = config.paths.out_dir.join("bench_table.tsv");
    write_table_dsv(&rows, '\t', &table_path)?;
    Ok(json!({
        "counts": {"items": items.len(), "failures": failures.len()},
        "accuracy": {
            "easy": report.easy.accuracy,
            "medium": report.medium.accuracy,
            "hard": report.hard.accuracy,
        },
        "outputs": {"report": report_path, "table": table_path},
    }))
}

// ==== analytics ===========================================================

pub fn analytics(config: &RunConfig) -> Result<Value, CliError> {
    let dataset_path = config.paths.dataset_store();
    if !dataset_path.exists() {
        return Err(CliError::Config(format!(
            "dataset export not found: {} (run `pskit dataset` first or set paths.dataset)",
            dataset_path.display()
        )));
    }
    let records = import_jsonl(&dataset_path, ExportFormat::InstructionTriplet)?;
    let texts: Vec<String> =
        records.iter().map(|r| format!("{}\n{}\n{}", r.prompt, r.cot, r.answer)).collect();
    let stopwords: HashSet<String> = match &config.paths.stopwords {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|source| CliError::Io { path: path.clone(), source })?
            .lines()
            .map(str::trim)
            .filter(|line| !line.is_empty())
            .map(str::to_lowercase)
            .collect(),
        None => HashSet::new(),
    };

    let table = term_frequencies(&texts, &stopwords, TOP_TERMS);
    let terms_path = config.paths.out_dir.join("term_frequencies.tsv");
    write_term_frequencies(&table, '\t', &terms_path)?;

    let tfidf = compute_tfidf(&texts)?;
    let embedding = tsne_embed(&tfidf, &config.embedding)?;
    let ids: Vec<String> = (0..records.len()).map(|i| format!("record-{i:05}")).collect();
    let embedding_path = config.paths.out_dir.join("embedding.tsv");
    write_embedding(&ids, &embedding, '\t', &embedding_path)?;
    Ok(json!({
        "counts": {"records": records.len(), "terms": table.len()},
        "kl": {"initial": embedding.initial_kl, "final": embedding.final_kl},
        "outputs": {"terms": terms_path, "embedding": embedding_path},
    }))
}

// ==== manifest ============================================================

pub fn manifest(config: &RunConfig) -> Result<Value, CliError> {
    let manifest = emit_finetune_manifest(&config.manifest_overrides)?;
    let path = config.paths.out_dir.join("finetune_manifest.txt");
    manifest.write(&path)?;
    Ok(json!({
        "manifest": {
            "base_model_id": manifest.base_model_id,
            "adapter_rank": manifest.adapter_rank,
            "epochs": manifest.epochs,
        },
        "outputs": {"manifest": path},
    }))
}
