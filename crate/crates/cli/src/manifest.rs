use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fewshot_ie::backend::CacheKey;
use fewshot_ie::corpus::SplitPart;
use serde::Serialize;

use crate::config::RunConfig;

/// Written next to the artifacts of every command that touches a dataset or
/// backend. Together with the cache it is enough to replay the run.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub tool_version: &'static str,
    pub config: &'a RunConfig,
    pub dataset_digest: Option<String>,
    pub grid_digest: Option<String>,
    pub cache_digest: Option<String>,
    pub cache_entries: usize,
    /// Distinct split parts read by the command, in first-read order.
    pub split_access: Vec<SplitPart>,
    pub artifacts: Vec<String>,
}

pub const CACHE_KEYS_SUFFIX: &str = "cache-keys.txt";

/// Writes `<command>-manifest.json` and, when a cache was used,
/// `<command>-cache-keys.txt`.
pub fn write_manifest(
    out: &Path,
    manifest: &mut RunManifest<'_>,
    touched: Option<&BTreeSet<CacheKey>>,
) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if let Some(keys) = touched {
        let name = format!("{}-{CACHE_KEYS_SUFFIX}", manifest.command);
        let body: String = keys.iter().map(|k| format!("{}\n", k.as_str())).collect();
        fs::write(out.join(&name), body)?;
        manifest.artifacts.push(name);
        manifest.cache_entries = keys.len();
    }
    let path = out.join(format!("{}-manifest.json", manifest.command));
    fs::write(&path, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(path)
}

/// Cache keys listed by every `*-cache-keys.txt` in `run_dir`.
pub fn read_touched_keys(run_dir: &Path) -> anyhow::Result<BTreeSet<String>> {
    let mut keys = BTreeSet::new();
    for entry in fs::read_dir(run_dir).with_context(|| format!("reading {}", run_dir.display()))? {
        let path = entry?.path();
        if path.to_string_lossy().ends_with(CACHE_KEYS_SUFFIX) {
            for line in fs::read_to_string(&path)?.lines() {
                if !line.trim().is_empty() {
                    keys.insert(line.trim().to_string());
                }
            }
        }
    }
    Ok(keys)
}
