//! Run configuration: TOML file, then `FEWSHOT_IE_*` environment variables,
//! then command-line flags, each layer overriding the one before.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use fewshot_ie::backend::{API_KEY_ENV, ENDPOINT_ENV};
use fewshot_ie::corpus::{DEFAULT_POOL_SIZE, DEFAULT_TEST_CAP};
use fewshot_ie::Task;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const ENV_PREFIX: &str = "FEWSHOT_IE_";
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];
pub const DEFAULT_MODEL: &str = "text-davinci-003";

/// Bad or contradictory settings. Mapped to exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Record,
    Replay,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    #[default]
    Knn,
    Random,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s.to_ascii_lowercase().as_str() {
        "ner" => Ok(Task::Ner),
        "re" => Ok(Task::Re),
        other => Err(format!("unknown task '{other}' (expected ner or re)")),
    }
}

/// One layer of settings; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Dataset directory (manifest.json + train/dev/test.jsonl).
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Prompt grid TOML.
    #[arg(long, global = true)]
    pub grid: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendMode>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// BPE vocabulary name; defaults to the model's.
    #[arg(long, global = true)]
    pub tokenizer: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub retrieval: Option<RetrievalMode>,
    /// `hashing[:dim]`, `file:<path>` or an http(s) embeddings URL.
    #[arg(long, global = true)]
    pub embeddings: Option<String>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    pub pool_size: Option<usize>,
    #[arg(long, global = true)]
    pub cap: Option<usize>,
    /// Seed of the stratified test sample.
    #[arg(long, global = true)]
    pub test_seed: Option<u64>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Use this grid config instead of the one selected by LOOCV.
    #[arg(long, global = true)]
    pub config_id: Option<String>,
    #[arg(long, global = true)]
    pub logit_bias: Option<bool>,
    #[arg(long, global = true)]
    pub calibration: Option<bool>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),*) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f.clone(); } )*
    };
}

impl Settings {
    fn overlay(&mut self, top: &Settings) {
        overlay!(
            self, top, dataset, task, grid, backend, model, endpoint, tokenizer, retrieval, embeddings, seeds,
            pool_size, cap, test_seed, cache_dir, out, threads, config_id, logit_bias, calibration
        );
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&raw).map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))
    }

    /// Reads `FEWSHOT_IE_<FIELD>` variables. Each value is tried as a
    /// string, number, boolean and comma list, in that order.
    pub fn from_env(env: &BTreeMap<String, String>) -> anyhow::Result<Self> {
        let Value::Object(fields) = serde_json::to_value(Settings::default())? else {
            unreachable!("settings serialize to an object")
        };
        let mut merged = Settings::default();
        for field in fields.keys() {
            let var = format!("{ENV_PREFIX}{}", field.to_ascii_uppercase());
            let Some(raw) = env.get(&var) else { continue };
            let mut candidates = vec![Value::String(raw.clone())];
            if let Ok(n) = raw.parse::<u64>() {
                candidates.push(n.into());
            }
            if let Ok(b) = raw.parse::<bool>() {
                candidates.push(b.into());
            }
            let list: Result<Vec<u64>, _> = raw.split(',').map(|s| s.trim().parse::<u64>()).collect();
            if let Ok(list) = list {
                candidates.push(list.into());
            }
            let parsed = candidates.into_iter().find_map(|v| {
                serde_json::from_value::<Settings>(serde_json::json!({ field.as_str(): v })).ok()
            });
            match parsed {
                Some(layer) => merged.overlay(&layer),
                None => return Err(config_err(format!("cannot parse {var}='{raw}'"))),
            }
        }
        Ok(merged)
    }
}

/// Fully resolved settings, echoed into every run manifest. The API key is
/// never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub task: Option<Task>,
    pub grid: Option<PathBuf>,
    pub backend: Option<BackendMode>,
    pub model: String,
    pub endpoint: Option<String>,
    pub tokenizer: Option<String>,
    pub retrieval: RetrievalMode,
    pub embeddings: String,
    pub seeds: Vec<u64>,
    pub pool_size: usize,
    pub cap: usize,
    pub test_seed: u64,
    pub cache_dir: PathBuf,
    pub out: PathBuf,
    pub threads: usize,
    pub config_id: Option<String>,
    pub logit_bias: bool,
    pub calibration: bool,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub api_key_set: bool,
}

/// Resolves file < env < flags over the defaults and checks the result.
pub fn load_config(
    file: Option<&Path>,
    env: &BTreeMap<String, String>,
    flags: &Settings,
) -> anyhow::Result<RunConfig> {
    let mut s = match file {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    s.overlay(&Settings::from_env(env)?);
    s.overlay(flags);
    let api_key = env.get(API_KEY_ENV).filter(|k| !k.trim().is_empty()).cloned();
    let cfg = RunConfig {
        dataset: s.dataset,
        task: s.task,
        grid: s.grid,
        backend: s.backend,
        model: s.model.unwrap_or_else(|| DEFAULT_MODEL.into()),
        endpoint: s.endpoint.or_else(|| env.get(ENDPOINT_ENV).cloned()),
        tokenizer: s.tokenizer,
        retrieval: s.retrieval.unwrap_or_default(),
        embeddings: s.embeddings.unwrap_or_else(|| "hashing".into()),
        seeds: s.seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
        pool_size: s.pool_size.unwrap_or(DEFAULT_POOL_SIZE),
        cap: s.cap.unwrap_or(DEFAULT_TEST_CAP),
        test_seed: s.test_seed.unwrap_or(0),
        cache_dir: s.cache_dir.unwrap_or_else(|| "cache".into()),
        out: s.out.unwrap_or_else(|| "runs".into()),
        threads: s.threads.unwrap_or(4),
        config_id: s.config_id,
        logit_bias: s.logit_bias.unwrap_or(true),
        calibration: s.calibration.unwrap_or(true),
        api_key_set: api_key.is_some(),
        api_key,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        if self.pool_size == 0 || self.cap == 0 || self.threads == 0 {
            return Err(config_err("pool size, cap and threads must be positive"));
        }
        match self.backend {
            Some(BackendMode::Replay) if !self.cache_dir.is_dir() => Err(config_err(format!(
                "replay mode needs an existing cache, {} does not exist",
                self.cache_dir.display()
            ))),
            Some(BackendMode::Live | BackendMode::Record) if self.api_key.is_none() => Err(config_err(format!(
                "live and record modes need an API key in {API_KEY_ENV}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn require_dataset(&self) -> anyhow::Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| config_err("--dataset is required for this command"))
    }

    pub fn require_grid(&self) -> anyhow::Result<&Path> {
        self.grid.as_deref().ok_or_else(|| config_err("--grid is required for this command"))
    }

    pub fn require_backend(&self) -> anyhow::Result<BackendMode> {
        self.backend
            .ok_or_else(|| config_err("--backend is required for this command (live, record, replay or oracle)"))
    }

    pub fn require_task(&self) -> anyhow::Result<Task> {
        self.task.ok_or_else(|| config_err("--task is required for this command"))
    }
}
