//! Run configuration: one TOML file drives every subcommand.
//!
//! Only `[paths]` and `[backend]` are mandatory sections, and within them
//! only `paths.out_dir` and `backend.kind`; everything else defaults to the
//! library defaults so a minimal config stays minimal. Input paths that are
//! set must exist at load time. Pipeline intermediates (the chunk store, the
//! exported dataset) are exempt: they are outputs of one stage and inputs of
//! the next, so the consuming command checks them instead.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pskit_core::analytics::EmbeddingConfig;
use pskit_core::benchmark::JudgeConfig;
use pskit_core::corpus::ChunkingPolicy;
use pskit_core::dataset::ManifestOverrides;
use pskit_core::gateway::{BackendConfig, BackendKind, ModelParams};
use pskit_core::screening::TournamentConfig;

use crate::CliError;

// ==== paths ===============================================================

/// Input and output locations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// JSONL manifest naming the corpus documents (`chunk`).
    pub corpus_manifest: Option<PathBuf>,
    /// Delimited compound library with a name/cas/category header
    /// (`screen`, and `dataset` group generation).
    pub library: Option<PathBuf>,
    /// Screening prompt spec, TOML; the built-in spec when absent.
    pub screening_prompt: Option<PathBuf>,
    /// Chunk question-generation prompt spec, TOML; built-in when absent.
    pub qa_prompt: Option<PathBuf>,
    /// Tiered benchmark dataset, JSONL (`bench`).
    pub benchmark: Option<PathBuf>,
    /// Reply fixtures for the mock backend; `backend.fixture_path` wins
    /// when both are set.
    pub fixtures: Option<PathBuf>,
    /// Chunk store consumed by `dataset`; defaults to the `chunk` output
    /// location under `out_dir`.
    pub chunks: Option<PathBuf>,
    /// Dataset export consumed by `analytics`; defaults to the `dataset`
    /// triplet output location under `out_dir`.
    pub dataset: Option<PathBuf>,
    /// Newline-separated stopword list for term statistics.
    pub stopwords: Option<PathBuf>,
    /// Every command writes its outputs and summary here.
    pub out_dir: PathBuf,
}

impl PathsConfig {
    pub fn chunk_store(&self) -> PathBuf {
        self.chunks.clone().unwrap_or_else(|| self.out_dir.join("chunks.jsonl"))
    }

    pub fn dataset_store(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join("dataset_triplets.jsonl"))
    }
}

// ==== run config ==========================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub chunking: ChunkingPolicy,
    #[serde(default)]
    pub tournament: TournamentConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    /// Decoding knobs for the model driven by `dataset`, `screen` and
    /// `bench`.
    #[serde(default)]
    pub model: ModelParams,
    /// Judge model and rubric for `bench`; built-in rubric by default.
    #[serde(default)]
    pub judge: JudgeConfig,
    /// Field overrides applied by `manifest`.
    #[serde(default)]
    pub manifest_overrides: ManifestOverrides,
    /// When set, replaces the tournament and embedding seeds so one knob
    /// drives every seeded choice. The `--seed` flag sets this.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    /// Parse `path` and enforce the load-time invariants: named input
    /// files exist, sub-configs are self-consistent.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = config.seed {
            config.apply_seed(seed);
        }
        config.validate()?;
        Ok(config)
    }

    /// Flag overrides, applied after load so they win over the file.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        backend: Option<BackendKind>,
        out: Option<PathBuf>,
    ) {
        if let Some(seed) = seed {
            self.seed = Some(seed);
            self.apply_seed(seed);
        }
        if let Some(kind) = backend {
            self.backend.kind = kind;
        }
        if let Some(out) = out {
            self.paths.out_dir = out;
        }
    }

    fn apply_seed(&mut self, seed: u64) {
        self.tournament.seed = seed;
        self.embedding.seed = seed;
    }

    /// Backend config with the `paths.fixtures` fallback folded in and the
    /// kind-specific requirements checked.
    pub fn effective_backend(&self) -> Result<BackendConfig, CliError> {
        let mut backend = self.backend.clone();
        if backend.fixture_path.is_none() {
            backend.fixture_path = self.paths.fixtures.clone();
        }
        match backend.kind {
            BackendKind::Mock if backend.fixture_path.is_none() => {
                Err(CliError::Config(
                    "mock backend needs backend.fixture_path or paths.fixtures".into(),
                ))
            }
            BackendKind::Http if backend.endpoint.is_none() => {
                Err(CliError::Config("http backend needs backend.endpoint".into()))
            }
            _ => Ok(backend),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        let named_inputs = [
            ("paths.corpus_manifest", &self.paths.corpus_manifest),
            ("paths.library", &self.paths.library),
            ("paths.screening_prompt", &self.paths.screening_prompt),
            ("paths.qa_prompt", &self.paths.qa_prompt),
            ("paths.benchmark", &self.paths.benchmark),
            ("paths.fixtures", &self.paths.fixtures),
            ("paths.stopwords", &self.paths.stopwords),
        ];
        for (key, path) in named_inputs {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(CliError::Config(format!(
                        "{key} does not exist: {}",
                        path.display()
                    )));
                }
            }
        }
        self.chunking.validate()?;
        self.tournament.validate()?;
        self.judge.validate()?;
        Ok(())
    }
}
