//! End-to-end runs of the `pskit` binary against temp-dir configs.
//!
//! Every test drives the compiled binary through `CARGO_BIN_EXE_pskit`,
//! builds its inputs (and, for gateway-backed commands, its reply fixtures)
//! on the fly, and reads the run summary back like any scripted caller
//! would.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use pskit_core::benchmark::{render_judge_prompt, BenchmarkItem, Difficulty, JudgeConfig};
use pskit_core::compounds::{cas_with_check_digit, parse_library, partition_groups, LibraryFormat};
use pskit_core::corpus::read_chunks;
use pskit_core::dataset::FinetuneManifest;
use pskit_core::gateway::{canonical_digest, write_fixture, ChatRequest, ModelParams};
use pskit_core::prompts::{
    render_chunk_qa_prompt, render_screening_prompt, QaGenPromptSpec, ScreeningPromptSpec,
};
use pskit_core::screening::round_seed;

// ==== harness =============================================================

fn pskit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pskit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary spawns")
}

fn assert_ok(output: &Output) {
    assert!(
        output.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()))
}

fn line_count(path: &Path) -> usize {
    std::fs::read_to_string(path).expect("readable").lines().count()
}

/// Writes one body file per entry plus the manifest naming them all.
fn write_docs(dir: &Path, bodies: &[String]) -> PathBuf {
    let docs = dir.join("docs");
    std::fs::create_dir_all(&docs).unwrap();
    let manifest = dir.join("manifest.jsonl");
    let mut lines = String::new();
    for (i, body) in bodies.iter().enumerate() {
        let doc_id = format!("doc-{i:04}");
        std::fs::write(docs.join(format!("{doc_id}.txt")), body).unwrap();
        lines.push_str(
            &serde_json::json!({
                "doc_id": doc_id,
                "title": format!("Synthetic article {i}"),
                "source_tag": "synthetic",
                "path": format!("docs/{doc_id}.txt"),
            })
            .to_string(),
        );
        lines.push('\n');
    }
    std::fs::write(&manifest, lines).unwrap();
    manifest
}

/// Synthetic corpus with word counts taken from `lengths`.
fn write_corpus(dir: &Path, lengths: &[usize]) -> PathBuf {
    let longest = lengths.iter().copied().max().unwrap_or(0);
    let mut base = String::with_capacity(longest * 8);
    let mut starts = Vec::with_capacity(longest + 1);
    for i in 0..longest {
        starts.push(base.len());
        base.push_str(&format!("word{:03} ", i % 97));
    }
    starts.push(base.len());
    let bodies: Vec<String> =
        lengths.iter().map(|&len| base[..starts[len]].trim_end().to_string()).collect();
    write_docs(dir, &bodies)
}

// ==== chunk ===============================================================

#[test]
fn chunk_three_doc_fixture_counts() {
    let dir = TempDir::new().unwrap();
    write_corpus(dir.path(), &[1500, 6000, 2501]);
    std::fs::write(
        dir.path().join("run.toml"),
        "[paths]\ncorpus_manifest = \"manifest.jsonl\"\nout_dir = \"unused\"\n\n\
         [backend]\nkind = \"mock\"\n",
    )
    .unwrap();

    // --out overrides the configured directory.
    let output = pskit(dir.path(), &["chunk", "--config", "run.toml", "--out", "out"]);
    assert_ok(&output);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("doc-0000: 1 chunks"), "per-doc counts on stdout: {stdout}");
    assert!(stdout.contains("doc-0001: 3 chunks"));
    assert!(stdout.contains("doc-0002: 2 chunks"));

    let summary = read_json(&dir.path().join("out/summary_chunk.json"));
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["counts"]["documents"], 3);
    assert_eq!(summary["counts"]["chunks"], 6);
    assert!(!dir.path().join("unused").exists(), "--out did not take effect");
    assert_eq!(line_count(&dir.path().join("out/chunks.jsonl")), 6);
}

#[test]
fn chunk_rerun_is_byte_stable() {
    let dir = TempDir::new().unwrap();
    write_corpus(dir.path(), &[1500, 6000, 2501]);
    std::fs::write(
        dir.path().join("run.toml"),
        "[paths]\ncorpus_manifest = \"manifest.jsonl\"\nout_dir = \"out\"\n\n\
         [backend]\nkind = \"mock\"\n",
    )
    .unwrap();

    assert_ok(&pskit(dir.path(), &["chunk", "--config", "run.toml"]));
    let chunks_first = std::fs::read(dir.path().join("out/chunks.jsonl")).unwrap();
    let mut summary_first = read_json(&dir.path().join("out/summary_chunk.json"));

    assert_ok(&pskit(dir.path(), &["chunk", "--config", "run.toml"]));
    let chunks_second = std::fs::read(dir.path().join("out/chunks.jsonl")).unwrap();
    let mut summary_second = read_json(&dir.path().join("out/summary_chunk.json"));

    assert_eq!(chunks_first, chunks_second, "chunk store must be byte-stable across reruns");
    // Wall-clock values live only under `metadata`; everything else repeats.
    summary_first.as_object_mut().unwrap().remove("metadata");
    summary_second.as_object_mut().unwrap().remove("metadata");
    assert_eq!(summary_first, summary_second);
}

#[test]
fn chunk_missing_manifest_is_a_path_error() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "[paths]\ncorpus_manifest = \"absent.jsonl\"\nout_dir = \"out\"\n\n\
         [backend]\nkind = \"mock\"\n",
    )
    .unwrap();

    let output = pskit(dir.path(), &["chunk", "--config", "run.toml"]);
    assert!(!output.status.success());
    let stderr = stderr_of(&output);
    assert!(stderr.contains("error[config]"), "categorized error line: {stderr}");
    assert!(stderr.contains("absent.jsonl"), "names the missing path: {stderr}");
}

#[test]
fn chunk_corpus_at_scale_lands_in_expected_range() {
    // 1,232 articles of roughly ten thousand words each: the default
    // policy should cut them into a few thousand windows overall.
    let dir = TempDir::new().unwrap();
    let lengths: Vec<usize> = (0..1232).map(|i| 9_700 + (i * 89) % 601).collect();
    write_corpus(dir.path(), &lengths);
    std::fs::write(
        dir.path().join("run.toml"),
        "[paths]\ncorpus_manifest = \"manifest.jsonl\"\nout_dir = \"out\"\n\n\
         [backend]\nkind = \"mock\"\n",
    )
    .unwrap();

    let output = pskit(dir.path(), &["chunk", "--config", "run.toml"]);
    assert_ok(&output);
    let summary = read_json(&dir.path().join("out/summary_chunk.json"));
    assert_eq!(summary["counts"]["documents"], 1232);
    let chunks = summary["counts"]["chunks"].as_u64().unwrap();
    assert!(
        (5_000..=7_000).contains(&chunks),
        "total chunks {chunks} outside the expected range"
    );
}

// ==== screen ==============================================================

#[test]
fn screen_mock_fixture_selects_survivors() {
    let dir = TempDir::new().unwrap();
    let mut library_tsv = String::from("name\tcas\tcategory\n");
    for i in 0..8 {
        let cas = cas_with_check_digit(&format!("{}", 5000 + i)).unwrap();
        library_tsv.push_str(&format!("Additive {i}\t{cas}\tcandidate\n"));
    }
    std::fs::write(dir.path().join("library.tsv"), library_tsv).unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "[paths]\nlibrary = \"library.tsv\"\nfixtures = \"replies.jsonl\"\nout_dir = \"out\"\n\n\
         [backend]\nkind = \"mock\"\n\n\
         [tournament]\ngroup_size = 4\nper_group_max = 2\ntarget_count = 4\nseed = 999\n",
    )
    .unwrap();

    // Script one reply per round-1 group, each electing its first two
    // members. The deal is reproduced from the run seed, which the --seed
    // flag below overrides to 7.
    let library = parse_library(&dir.path().join("library.tsv"), &LibraryFormat::default()).unwrap();
    let groups = partition_groups(&library, 4, round_seed(7, 1)).unwrap();
    let spec = ScreeningPromptSpec::default();
    let params = ModelParams::default();
    let mut entries = Vec::new();
    let mut expected: Vec<(String, String)> = Vec::new();
    for group in &groups {
        let prompt = render_screening_prompt(&spec, group).unwrap();
        let request = ChatRequest::single_user(&params, prompt);
        let picks = &group.members[..2];
        let reply = format!(
            "<think>weighing the group.</think>{{{} (CAS: {})}}{{{} (CAS: {})}}",
            picks[0].name, picks[0].cas, picks[1].name, picks[1].cas,
        );
        entries.push((canonical_digest(&request), reply));
        expected.extend(picks.iter().map(|c| (c.name.clone(), c.cas.clone())));
    }
    write_fixture(&dir.path().join("replies.jsonl"), entries).unwrap();

    let output = pskit(dir.path(), &["screen", "--config", "run.toml", "--seed", "7"]);
    assert_ok(&output);
    let summary = read_json(&dir.path().join("out/summary_screen.json"));
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["finished"], true);
    assert_eq!(summary["reason"], "target_reached");
    assert_eq!(summary["counts"]["rounds"], 1);
    let survivors: Vec<(String, String)> = summary["survivors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| {
            (s["name"].as_str().unwrap().to_string(), s["cas"].as_str().unwrap().to_string())
        })
        .collect();
    assert_eq!(survivors, expected);

    let report = std::fs::read(dir.path().join("out/screen_report.json")).unwrap();
    assert!(!report.is_empty());

    // Rerunning resumes the finished journal without prompting anything
    // and rewrites the same report.
    let rerun = pskit(dir.path(), &["screen", "--config", "run.toml", "--seed", "7"]);
    assert_ok(&rerun);
    let report_rerun = std::fs::read(dir.path().join("out/screen_report.json")).unwrap();
    assert_eq!(report, report_rerun);
}

// ==== bench ===============================================================

fn benchmark_items() -> Vec<BenchmarkItem> {
    let item = |id: &str, question: &str, reference: &str, difficulty| BenchmarkItem {
        item_id: id.into(),
        question: question.into(),
        reference_answer: reference.into(),
        difficulty,
    };
    vec![
        item("e1", "Which halide additive passivates grain boundaries?", "Chloride", Difficulty::Easy),
        item("m1", "Why do bulky cations slow crystallization?", "Steric hindrance", Difficulty::Medium),
        item("h1", "How does a Lewis base additive shift defect formation energy?", "Coordination to Pb", Difficulty::Hard),
    ]
}

#[test]
fn bench_scores_with_fixture_judge() {
    let dir = TempDir::new().unwrap();
    let items = benchmark_items();
    let mut dataset = String::new();
    for item in &items {
        dataset.push_str(&serde_json::to_string(item).unwrap());
        dataset.push('\n');
    }
    std::fs::write(dir.path().join("bench.jsonl"), dataset).unwrap();

    // One model reply and one full-credit judge verdict per item.
    let params = ModelParams::default();
    let judge = JudgeConfig::default();
    let mut entries = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let model_request = ChatRequest::single_user(&params, &item.question);
        let answer = format!("Candidate answer {i}");
        entries.push((
            canonical_digest(&model_request),
            format!("<think>recalling the mechanism.</think>{answer}"),
        ));
        let judge_request =
            ChatRequest::single_user(&judge.params, render_judge_prompt(&judge, item, &answer));
        entries.push((canonical_digest(&judge_request), "1".to_string()));
    }
    write_fixture(&dir.path().join("replies.jsonl"), entries).unwrap();

    std::fs::write(
        dir.path().join("run.toml"),
        "[paths]\nbenchmark = \"bench.jsonl\"\nfixtures = \"replies.jsonl\"\nout_dir = \"out\"\n\n\
         [backend]\nkind = \"mock\"\n",
    )
    .unwrap();

    let output = pskit(dir.path(), &["bench", "--config", "run.toml"]);
    assert_ok(&output);
    let summary = read_json(&dir.path().join("out/summary_bench.json"));
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["counts"]["items"], 3);
    assert_eq!(summary["counts"]["failures"], 0);
    for tier in ["easy", "medium", "hard"] {
        assert_eq!(summary["accuracy"][tier], 100.0, "tier {tier}");
    }
    // Table: header, five reference rows, one evaluated row.
    assert_eq!(line_count(&dir.path().join("out/bench_table.tsv")), 7);
    assert!(dir.path().join("out/bench_report.json").exists());
}

#[test]
fn bench_missing_tier_is_categorized() {
    let dir = TempDir::new().unwrap();
    let easy_only: Vec<BenchmarkItem> =
        benchmark_items().into_iter().filter(|i| i.difficulty == Difficulty::Easy).collect();
    let mut dataset = String::new();
    for item in &easy_only {
        dataset.push_str(&serde_json::to_string(item).unwrap());
        dataset.push('\n');
    }
    std::fs::write(dir.path().join("bench.jsonl"), dataset).unwrap();
    std::fs::write(dir.path().join("replies.jsonl"), "").unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "[paths]\nbenchmark = \"bench.jsonl\"\nfixtures = \"replies.jsonl\"\nout_dir = \"out\"\n\n\
         [backend]\nkind = \"mock\"\n",
    )
    .unwrap();

    let output = pskit(dir.path(), &["bench", "--config", "run.toml"]);
    assert!(!output.status.success());
    let stderr = stderr_of(&output);
    assert!(stderr.contains("error[benchmark]"), "categorized error line: {stderr}");
    assert!(stderr.contains("no medium items"), "names the empty tier: {stderr}");

    // The failed run still leaves a machine-readable summary.
    let summary = read_json(&dir.path().join("out/summary_bench.json"));
    assert_eq!(summary["status"], "error");
    assert_eq!(summary["category"], "benchmark");
}

// ==== dataset + analytics =================================================

#[test]
fn dataset_then_analytics_offline_pipeline() {
    let dir = TempDir::new().unwrap();
    // Four topic families of four documents each: family vocabulary binds
    // rows within a family, repeat counts vary distances within it. The
    // embedding's bandwidth search needs that spread; a corpus of pairwise
    // equidistant rows would pin every conditional perplexity at n - 1.
    let bodies: Vec<String> = (0..16)
        .map(|i| {
            let family = i / 4;
            format!(
                "{}topic{i:02} mechanism{i:02} additive study notes",
                format!("family{family} lattice{family} solvent{family} ").repeat(4 + i % 4),
            )
        })
        .collect();
    write_docs(dir.path(), &bodies);
    std::fs::write(dir.path().join("replies.jsonl"), "").unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "[paths]\ncorpus_manifest = \"manifest.jsonl\"\nfixtures = \"replies.jsonl\"\n\
         out_dir = \"out\"\n\n\
         [backend]\nkind = \"http\"\nendpoint = \"http://127.0.0.1:9\"\n\n\
         [embedding]\nperplexity = 3.0\niterations = 300\nseed = 11\n",
    )
    .unwrap();

    assert_ok(&pskit(dir.path(), &["chunk", "--config", "run.toml"]));
    let chunks = read_chunks(&dir.path().join("out/chunks.jsonl")).unwrap();
    assert_eq!(chunks.len(), 16, "one window per short document");

    // Fixture replies answer each chunk's generation prompt.
    let spec = QaGenPromptSpec::chunk_default();
    let params = ModelParams::default();
    let entries: Vec<(String, String)> = chunks
        .iter()
        .enumerate()
        .map(|(i, chunk)| {
            let prompt = render_chunk_qa_prompt(chunk, &spec).unwrap();
            let request = ChatRequest::single_user(&params, prompt);
            let reply = format!(
                "<think>the passage centers on topic{i:02}.</think>\
                 Q: What role does topic{i:02} play?\nA: It acts through mechanism{i:02}."
            );
            (canonical_digest(&request), reply)
        })
        .collect();
    write_fixture(&dir.path().join("replies.jsonl"), entries).unwrap();

    // --backend flips the configured http backend over to the fixtures.
    let output = pskit(dir.path(), &["dataset", "--config", "run.toml", "--backend", "mock"]);
    assert_ok(&output);
    let summary = read_json(&dir.path().join("out/summary_dataset.json"));
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["counts"]["records"], 16);
    assert_eq!(summary["counts"]["chunk_records"], 16);
    assert_eq!(summary["counts"]["group_records"], 0);
    assert_eq!(summary["counts"]["skips"], 0);
    assert_eq!(line_count(&dir.path().join("out/dataset_triplets.jsonl")), 16);
    assert_eq!(line_count(&dir.path().join("out/dataset_messages.jsonl")), 16);

    let output = pskit(dir.path(), &["analytics", "--config", "run.toml"]);
    assert_ok(&output);
    let summary = read_json(&dir.path().join("out/summary_analytics.json"));
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["counts"]["records"], 16);
    let initial = summary["kl"]["initial"].as_f64().unwrap();
    let final_kl = summary["kl"]["final"].as_f64().unwrap();
    assert!(final_kl < initial, "descent should improve KL: {final_kl} vs {initial}");
    // Header plus one embedded point per record.
    assert_eq!(line_count(&dir.path().join("out/embedding.tsv")), 17);
    assert!(line_count(&dir.path().join("out/term_frequencies.tsv")) > 1);
}

// ==== manifest ============================================================

#[test]
fn manifest_emits_defaults() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "[paths]\nout_dir = \"out\"\n\n[backend]\nkind = \"mock\"\n",
    )
    .unwrap();

    let output = pskit(dir.path(), &["manifest", "--config", "run.toml"]);
    assert_ok(&output);
    let text = std::fs::read_to_string(dir.path().join("out/finetune_manifest.txt")).unwrap();
    let manifest = FinetuneManifest::parse_key_values(&text).unwrap();
    assert_eq!(manifest, FinetuneManifest::default());

    let summary = read_json(&dir.path().join("out/summary_manifest.json"));
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["manifest"]["epochs"], 10);
}
