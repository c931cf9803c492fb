//! Shared state of one command: resolved config, lazily loaded dataset,
//! grid and backend, and the artifacts written so far.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use fewshot_ie::backend::{
    BpeTokenizer, CacheKey, CachedBackend, CompletionBackend, LiveBackend, LiveConfig, OracleBackend, ReplayStore, Tokenizer,
    DEFAULT_ENDPOINT,
};
use fewshot_ie::corpus::{
    load_split, read_manifest, sample_train_pool, split_digest, stratified_test_sample, AccessLog, SplitPart,
};
use fewshot_ie::evalkit::TextTable;
use fewshot_ie::prompt::load_grid;
use fewshot_ie::protocol::{select_config, SelectionReport, Subsample};
use fewshot_ie::retrieval::{Embedder, EmbeddingProvider, HashingEmbedder, HttpEmbeddingProvider, PrecomputedEmbeddings};
use fewshot_ie::text::sha256_hex;
use fewshot_ie::{DatasetSplit, Engine, EngineOptions, Example, PromptGrid, Retrieval, Task, Template, TrainPool};
use serde::Serialize;

use crate::config::{config_err, BackendMode, RetrievalMode, RunConfig};
use crate::manifest::{write_manifest, RunManifest};

pub struct Session {
    pub cfg: RunConfig,
    pub command: &'static str,
    access: Arc<AccessLog>,
    split: Option<Arc<DatasetSplit>>,
    dataset_digest: Option<String>,
    /// Every record of the dataset, read before the access log is attached.
    oracle_examples: Vec<Example>,
    grid: Option<(Arc<PromptGrid>, String)>,
    backend: Option<Arc<dyn CompletionBackend>>,
    cached: Option<Arc<CachedBackend>>,
    /// Cache keys touched by helper sessions of this command.
    absorbed: BTreeSet<CacheKey>,
    embedder: Option<Arc<Embedder>>,
    artifacts: Vec<String>,
}

impl Session {
    pub fn new(cfg: RunConfig, command: &'static str) -> Self {
        Self {
            cfg,
            command,
            access: AccessLog::new(),
            split: None,
            dataset_digest: None,
            oracle_examples: Vec::new(),
            grid: None,
            backend: None,
            cached: None,
            absorbed: BTreeSet::new(),
            embedder: None,
            artifacts: Vec::new(),
        }
    }

    pub fn out(&self) -> &Path {
        &self.cfg.out
    }

    pub fn task(&mut self) -> Result<Task> {
        if let Some(t) = self.cfg.task {
            return Ok(t);
        }
        let dir = self.cfg.require_dataset()?;
        let task = read_manifest(dir).map_err(|e| config_err(e.to_string()))?.task;
        self.cfg.task = Some(task);
        Ok(task)
    }

    pub fn split(&mut self) -> Result<Arc<DatasetSplit>> {
        if let Some(s) = &self.split {
            return Ok(s.clone());
        }
        let task = self.task()?;
        let dir = self.cfg.require_dataset()?.to_path_buf();
        let split = load_split(&dir, task).with_context(|| format!("loading dataset {}", dir.display()))?;
        for w in split.warnings() {
            log::warn!("{w}");
        }
        self.dataset_digest = Some(split_digest(&split));
        if self.cfg.backend == Some(BackendMode::Oracle) {
            self.oracle_examples = SplitPart::ALL.iter().flat_map(|p| split.part(*p).to_vec()).collect();
        }
        let split = Arc::new(split.with_access_log(self.access.clone()));
        self.split = Some(split.clone());
        Ok(split)
    }

    pub fn grid(&mut self) -> Result<Arc<PromptGrid>> {
        if let Some((g, _)) = &self.grid {
            return Ok(g.clone());
        }
        let path = self.cfg.require_grid()?.to_path_buf();
        let raw = fs::read(&path).with_context(|| format!("reading grid {}", path.display()))?;
        let grid = load_grid(&path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let split = self.split()?;
        if grid.task != split.task() {
            return Err(config_err(format!(
                "grid {} is for {:?} but the dataset is {:?}",
                path.display(),
                grid.task,
                split.task()
            )));
        }
        if let Some(labels) = split.labels() {
            grid.check_labels(labels)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        }
        let grid = Arc::new(grid);
        self.grid = Some((grid.clone(), sha256_hex(&raw)));
        Ok(grid)
    }

    fn tokenizer(&self) -> Result<Box<dyn Tokenizer>> {
        let tok = match &self.cfg.tokenizer {
            Some(name) => BpeTokenizer::by_name(name),
            None => BpeTokenizer::for_model(&self.cfg.model),
        }
        .map_err(|e| config_err(e.to_string()))?;
        Ok(Box::new(tok))
    }

    fn live(&self) -> Result<Arc<dyn CompletionBackend>> {
        let key = self
            .cfg
            .api_key
            .clone()
            .ok_or_else(|| config_err(format!("{} is not set", fewshot_ie::backend::API_KEY_ENV)))?;
        let endpoint = self.cfg.endpoint.clone().unwrap_or_else(|| DEFAULT_ENDPOINT.into());
        let config = LiveConfig {
            max_in_flight: self.cfg.threads,
            ..LiveConfig::new(endpoint, key)
        };
        Ok(Arc::new(LiveBackend::new(config, self.tokenizer()?)?))
    }

    pub fn backend(&mut self) -> Result<Arc<dyn CompletionBackend>> {
        if let Some(b) = &self.backend {
            return Ok(b.clone());
        }
        let backend: Arc<dyn CompletionBackend> = match self.cfg.require_backend()? {
            BackendMode::Oracle => {
                let grid = self.grid()?;
                Arc::new(OracleBackend::new(&grid.templates(), self.oracle_examples.iter())?)
            }
            BackendMode::Live => self.live()?,
            BackendMode::Record => {
                let store = Arc::new(ReplayStore::open(&self.cfg.cache_dir)?);
                let cached = Arc::new(CachedBackend::record(self.live()?, store));
                self.cached = Some(cached.clone());
                cached
            }
            BackendMode::Replay => {
                let store = Arc::new(ReplayStore::open_existing(&self.cfg.cache_dir)?);
                let cached = Arc::new(CachedBackend::replay(store, self.tokenizer()?));
                self.cached = Some(cached.clone());
                cached
            }
        };
        self.backend = Some(backend.clone());
        Ok(backend)
    }

    fn embedder(&mut self) -> Result<Arc<Embedder>> {
        if let Some(e) = &self.embedder {
            return Ok(e.clone());
        }
        let spec = self.cfg.embeddings.as_str();
        let provider: Box<dyn EmbeddingProvider> = match spec.split_once(':') {
            None if spec == "hashing" => Box::new(HashingEmbedder::new(256)),
            Some(("hashing", dim)) => {
                let dim: usize = dim
                    .parse()
                    .ok()
                    .filter(|d| *d > 0)
                    .ok_or_else(|| config_err(format!("bad hashing dimension in '{spec}'")))?;
                Box::new(HashingEmbedder::new(dim))
            }
            Some(("file", path)) => Box::new(PrecomputedEmbeddings::load(Path::new(path))?),
            Some(("http", _)) | Some(("https", _)) => {
                Box::new(HttpEmbeddingProvider::new(spec, None, self.cfg.api_key.clone()))
            }
            _ => {
                return Err(config_err(format!(
                    "unknown embeddings '{spec}' (use hashing[:dim], file:<path> or an http(s) URL)"
                )))
            }
        };
        let e = Arc::new(Embedder::new(provider));
        self.embedder = Some(e.clone());
        Ok(e)
    }

    pub fn engine(&mut self, seed: u64) -> Result<Engine> {
        let backend = self.backend()?;
        let split = self.split()?;
        let retrieval = match self.cfg.retrieval {
            RetrievalMode::Knn => Retrieval::Knn(self.embedder()?),
            RetrievalMode::Random => Retrieval::Random { seed },
        };
        let options = EngineOptions {
            model_id: self.cfg.model.clone(),
            logit_bias: self.cfg.logit_bias,
            calibration: self.cfg.calibration,
            threads: self.cfg.threads,
            ..EngineOptions::default()
        };
        Ok(Engine::new(backend, retrieval, options)?.with_labels(split.labels().cloned()))
    }

    pub fn pool(&mut self, seed: u64) -> Result<TrainPool> {
        let split = self.split()?;
        let balanced = split.task() == Task::Re;
        Ok(sample_train_pool(&split, self.cfg.pool_size, seed, balanced)?)
    }

    pub fn test_sample(&mut self) -> Result<Vec<Example>> {
        let split = self.split()?;
        Ok(stratified_test_sample(&split, self.cfg.cap, self.cfg.test_seed))
    }

    pub fn selection_path(&self, seed: u64) -> PathBuf {
        self.out().join(format!("selection-seed{seed}.json"))
    }

    pub fn run_selection(
        &mut self,
        engine: &Engine,
        pool: &TrainPool,
        subsample: Option<usize>,
    ) -> Result<SelectionReport> {
        let grid = self.grid()?;
        let sub = subsample.map(|size| Subsample { size, seed: pool.seed });
        let report = select_config(engine, &grid, pool, sub)?;
        self.write_json(&format!("selection-seed{}.json", pool.seed), &report)?;
        Ok(report)
    }

    /// The explicit `config_id`, else the selection already on disk for this
    /// pool, else a fresh selection.
    pub fn template_for(&mut self, engine: &Engine, pool: &TrainPool) -> Result<Template> {
        let grid = self.grid()?;
        let id = match &self.cfg.config_id {
            Some(id) => id.clone(),
            None => {
                let path = self.selection_path(pool.seed);
                let stored: Option<SelectionReport> = fs::read_to_string(&path)
                    .ok()
                    .and_then(|raw| serde_json::from_str(&raw).ok())
                    .filter(|r: &SelectionReport| r.pool_digest == pool.digest());
                match stored {
                    Some(r) => r.chosen_config,
                    None => self.run_selection(engine, pool, None)?.chosen_config,
                }
            }
        };
        let config = grid
            .config(&id)
            .ok_or_else(|| config_err(format!("config '{id}' is not in the grid")))?;
        Ok(grid.template(config))
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write_text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    pub fn write_text(&mut self, name: &str, body: &str) -> Result<()> {
        fs::create_dir_all(self.out()).with_context(|| format!("creating {}", self.out().display()))?;
        let path = self.out().join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        self.note_artifact(name);
        Ok(())
    }

    pub fn note_artifact(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    /// Prints the table and stores it as text next to the JSON record.
    pub fn emit_table(&mut self, name: &str, table: &TextTable) -> Result<()> {
        println!("{table}");
        self.write_text(name, &format!("{table}\n"))
    }

    pub fn touched_keys(&self) -> Option<BTreeSet<CacheKey>> {
        let own = self.cached.as_ref().map(|c| c.touched_keys());
        match (own, self.absorbed.is_empty()) {
            (None, true) => None,
            (own, _) => {
                let mut keys = own.unwrap_or_default();
                keys.extend(self.absorbed.iter().cloned());
                Some(keys)
            }
        }
    }

    pub fn absorb_cache(&mut self, other: &Session) {
        if let Some(keys) = other.touched_keys() {
            self.absorbed.extend(keys);
        }
    }

    pub fn finish(self) -> Result<()> {
        let touched = self.touched_keys();
        let mut manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config: &self.cfg,
            dataset_digest: self.dataset_digest.clone(),
            grid_digest: self.grid.as_ref().map(|(_, d)| d.clone()),
            cache_digest: touched.as_ref().map(|keys| {
                let joined: Vec<&str> = keys.iter().map(CacheKey::as_str).collect();
                sha256_hex(joined.join("\n").as_bytes())
            }),
            cache_entries: 0,
            split_access: {
                let mut seen = Vec::new();
                for e in self.access.events() {
                    if !seen.contains(&e) {
                        seen.push(e);
                    }
                }
                seen
            },
            artifacts: self.artifacts.clone(),
        };
        let path = write_manifest(&self.cfg.out, &mut manifest, touched.as_ref())?;
        log::info!("wrote {}", path.display());
        Ok(())
    }
}
