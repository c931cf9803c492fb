//! Command-line front end. [`dispatch`] parses arguments, resolves the run
//! configuration and maps outcomes to exit statuses: 0 on success, 1 when a
//! pipeline step fails, 2 for usage and configuration errors.

mod commands;
pub mod config;
mod kbcmd;
pub mod manifest;
mod session;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fewshot_ie::kb::{EntityKey, Query};

pub use config::{load_config, BackendMode, ConfigError, RetrievalMode, RunConfig, Settings};
use session::Session;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fewshot-ie", version, about = "Few-shot in-context NER and relation extraction")]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split sizes and null-example shares of a dataset.
    Stats,
    /// Draw the per-seed training pools and the capped test sample.
    Sample,
    /// Choose a grid config per seed by leave-one-out scoring on the pool.
    SelectConfig {
        /// Score only this many pool examples per config.
        #[arg(long)]
        subsample: Option<usize>,
    },
    /// Predict the test sample with the selected config for every seed.
    Extract,
    /// Score prediction files against the test sample.
    Evaluate {
        /// Directory holding predictions-seed<N>.jsonl (default: --out).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Remove the task component and kNN retrieval one at a time.
    Ablate {
        /// Seed for random shot selection in arms without kNN (default: the pool seed).
        #[arg(long)]
        random_seed: Option<u64>,
    },
    /// Null-token probability with two versus three shots.
    NullStudy {
        #[arg(long, default_value_t = 5)]
        draws: usize,
    },
    /// Score with and without entity-free sentences.
    ModifiedRun,
    /// Score external baseline prediction files next to in-context runs.
    Compare {
        /// NAME=PATH of a baseline prediction file; repeatable.
        #[arg(long = "baseline", required = true)]
        baselines: Vec<String>,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Knowledge-base commands.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Replay-cache maintenance.
    #[command(subcommand)]
    Cache(CacheCommand),
}

#[derive(Debug, Args)]
struct KbDir {
    /// Knowledge-base directory (default: <out>/kb).
    #[arg(long)]
    kb_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum KbCommand {
    /// Extract entities and relations from text files into the KB.
    Build {
        /// A .txt file or directory of them, one sentence per line.
        #[arg(long)]
        documents: PathBuf,
        /// KB spec (TOML): domain, NER components, optional RE component.
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        dir: KbDir,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        timestamp: Option<String>,
    },
    /// Merge normalized duplicates, count conflicts, promote corroborated records.
    Verify {
        #[command(flatten)]
        dir: KbDir,
        #[arg(long, default_value_t = kbcmd::DEFAULT_MIN_DOCS)]
        min_docs: usize,
    },
    Query {
        #[command(flatten)]
        dir: KbDir,
        #[arg(long, group = "q")]
        prefix: Option<String>,
        #[arg(long = "type", group = "q")]
        entity_type: Option<String>,
        /// TYPE:SURFACE
        #[arg(long, group = "q")]
        neighbors: Option<String>,
        #[arg(long, group = "q")]
        label: Option<String>,
    },
    Export {
        #[command(flatten)]
        dir: KbDir,
        #[arg(long)]
        file: PathBuf,
    },
    Import {
        #[command(flatten)]
        dir: KbDir,
        #[arg(long)]
        file: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum CacheCommand {
    Ls,
    /// Delete entries not used by any of the given run directories.
    Gc {
        #[arg(long = "keep-run")]
        keep_runs: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Stats => "stats",
            Command::Sample => "sample",
            Command::SelectConfig { .. } => "select-config",
            Command::Extract => "extract",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::NullStudy { .. } => "null-study",
            Command::ModifiedRun => "modified-run",
            Command::Compare { .. } => "compare",
            Command::Kb(KbCommand::Build { .. }) => "kb-build",
            Command::Kb(KbCommand::Verify { .. }) => "kb-verify",
            Command::Kb(KbCommand::Query { .. }) => "kb-query",
            Command::Kb(KbCommand::Export { .. }) => "kb-export",
            Command::Kb(KbCommand::Import { .. }) => "kb-import",
            Command::Cache(_) => "cache",
        }
    }
}

/// Runs one command with the process environment.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    dispatch_with_env(argv, &std::env::vars().collect())
}

/// Runs one command with an explicit environment map.
pub fn dispatch_with_env<I, T>(argv: I, env: &BTreeMap<String, String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, env) {
        Ok(()) => EXIT_OK,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn run(cli: Cli, env: &BTreeMap<String, String>) -> anyhow::Result<()> {
    let cfg = load_config(cli.config.as_deref(), env, &cli.settings)?;
    let name = cli.command.name();
    let kb_dir = |d: KbDir, cfg: &RunConfig| d.kb_dir.unwrap_or_else(|| cfg.out.join("kb"));
    let mut s = Session::new(cfg, name);
    match cli.command {
        Command::Stats => commands::stats(&mut s)?,
        Command::Sample => commands::sample(&mut s)?,
        Command::SelectConfig { subsample } => commands::select(&mut s, subsample)?,
        Command::Extract => commands::extract(&mut s)?,
        Command::Evaluate { predictions } => commands::evaluate(&mut s, predictions)?,
        Command::Ablate { random_seed } => commands::ablate(&mut s, random_seed)?,
        Command::NullStudy { draws } => commands::null_study(&mut s, draws)?,
        Command::ModifiedRun => commands::modified_run(&mut s)?,
        Command::Compare { baselines, predictions } => commands::compare(&mut s, &baselines, predictions)?,
        Command::Kb(kb) => match kb {
            KbCommand::Build {
                documents,
                spec,
                dir,
                run_id,
                timestamp,
            } => {
                let dir = kb_dir(dir, &s.cfg);
                kbcmd::build(
                    &mut s,
                    kbcmd::BuildArgs {
                        documents: &documents,
                        spec: &spec,
                        kb_dir: &dir,
                        run_id,
                        timestamp,
                    },
                )?
            }
            KbCommand::Verify { dir, min_docs } => {
                let dir = kb_dir(dir, &s.cfg);
                kbcmd::verify(&mut s, &dir, min_docs)?
            }
            KbCommand::Query {
                dir,
                prefix,
                entity_type,
                neighbors,
                label,
            } => {
                let dir = kb_dir(dir, &s.cfg);
                let q = match (prefix, entity_type, neighbors, label) {
                    (Some(p), ..) => Query::Prefix(p),
                    (_, Some(t), ..) => Query::ByType(t),
                    (_, _, Some(n), _) => Query::Neighbors(parse_key(&n)?),
                    (.., Some(l)) => Query::RelationsByLabel(l),
                    _ => {
                        return Err(config::config_err(
                            "kb query needs one of --prefix, --type, --neighbors or --label",
                        ))
                    }
                };
                kbcmd::query(&mut s, &dir, q)?
            }
            KbCommand::Export { dir, file } => {
                kbcmd::export(&kb_dir(dir, &s.cfg), &file)?;
                return Ok(());
            }
            KbCommand::Import { dir, file } => {
                kbcmd::import(&kb_dir(dir, &s.cfg), &file)?;
                return Ok(());
            }
        },
        Command::Cache(c) => {
            match c {
                CacheCommand::Ls => kbcmd::cache_ls(&s.cfg.cache_dir)?,
                CacheCommand::Gc { keep_runs } => kbcmd::cache_gc(&s.cfg.cache_dir, &keep_runs)?,
            }
            return Ok(());
        }
    }
    s.finish()
}

fn parse_key(raw: &str) -> anyhow::Result<EntityKey> {
    kbcmd::parse_entity_key(raw)
}
