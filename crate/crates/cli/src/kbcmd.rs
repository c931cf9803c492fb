use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use fewshot_ie::backend::ReplayStore;
use fewshot_ie::evalkit::TextTable;
use fewshot_ie::kb::{
    build_kb, load_documents, EngineExtractor, EntityKey, KbEntity, KbRelation, KbScope, KbStore, NerComponent,
    Query, QueryResult, ReComponent, DEFAULT_MIN_DOCUMENTS,
};
use fewshot_ie::Task;
use serde::{Deserialize, Serialize};

use crate::config::config_err;
use crate::manifest::read_touched_keys;
use crate::session::Session;

/// A component of a KB build spec: which dataset supplies shots, with which
/// grid config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    #[serde(default)]
    pub entity_type: Option<String>,
    pub dataset: PathBuf,
    pub grid: PathBuf,
    pub config_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbSpec {
    pub domain: String,
    /// Defaults to the RE dataset's non-null labels.
    #[serde(default)]
    pub relation_labels: Vec<String>,
    pub ner: Vec<ComponentSpec>,
    #[serde(default)]
    pub re: Option<ComponentSpec>,
}

impl KbSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        toml::from_str(&raw).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }
}

fn now_secs() -> String {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
        .to_string()
}

fn sub_session(s: &Session, spec: &ComponentSpec, task: Task) -> Session {
    let mut cfg = s.cfg.clone();
    cfg.dataset = Some(spec.dataset.clone());
    cfg.grid = Some(spec.grid.clone());
    cfg.config_id = Some(spec.config_id.clone());
    cfg.task = Some(task);
    Session::new(cfg, s.command)
}

pub struct BuildArgs<'a> {
    pub documents: &'a Path,
    pub spec: &'a Path,
    pub kb_dir: &'a Path,
    pub run_id: Option<String>,
    pub timestamp: Option<String>,
}

pub fn build(s: &mut Session, args: BuildArgs<'_>) -> Result<()> {
    let spec = KbSpec::load(args.spec)?;
    if spec.ner.is_empty() {
        return Err(config_err("the KB spec needs at least one [[ner]] component"));
    }
    let seed = s.cfg.seeds[0];
    let mut subs = Vec::new();
    let mut ner = Vec::new();
    for c in &spec.ner {
        let entity_type = c
            .entity_type
            .clone()
            .ok_or_else(|| config_err("every [[ner]] component needs an entity_type"))?;
        let mut sub = sub_session(s, c, Task::Ner);
        let engine = sub.engine(seed)?;
        let pool = sub.pool(seed)?;
        let template = sub.template_for(&engine, &pool)?;
        ner.push(NerComponent {
            entity_type,
            engine,
            template,
            shots: pool.examples,
        });
        subs.push(sub);
    }
    let mut relation_labels = spec.relation_labels.clone();
    let re = match &spec.re {
        Some(c) => {
            let mut sub = sub_session(s, c, Task::Re);
            let engine = sub.engine(seed)?;
            let pool = sub.pool(seed)?;
            let template = sub.template_for(&engine, &pool)?;
            if relation_labels.is_empty() {
                let labels = engine.labels().ok_or_else(|| config_err("RE dataset has no label set"))?;
                relation_labels = labels
                    .names()
                    .iter()
                    .filter(|n| n.as_str() != labels.null_name())
                    .cloned()
                    .collect();
            }
            subs.push(sub);
            Some(ReComponent {
                engine,
                template,
                shots: pool.examples,
            })
        }
        None => None,
    };
    let entity_types: Vec<String> = ner.iter().map(|c| c.entity_type.clone()).collect();
    let scope = KbScope::new(spec.domain.clone(), entity_types, relation_labels)
        .map_err(|e| config_err(e.to_string()))?;
    let documents = load_documents(args.documents)?;
    let run_id = args.run_id.unwrap_or_else(|| format!("run-{}", now_secs()));
    let timestamp = args.timestamp.unwrap_or_else(now_secs);
    let extractor = EngineExtractor { ner, re };
    let report = build_kb(&documents, &scope, &extractor, &run_id, &timestamp)?;

    let store = KbStore::open(args.kb_dir, Some(scope.clone()))?;
    if store.read().scope != scope {
        return Err(config_err(format!(
            "{} holds a knowledge base with a different scope",
            args.kb_dir.display()
        )));
    }
    store.apply_records(&report.records)?;
    for sub in &subs {
        s.absorb_cache(sub);
    }

    let kb = store.read();
    let mut t = TextTable::new(&["Documents", "Sentences", "Failures", "Entities", "Relations"]);
    t.push(vec![
        documents.len().to_string(),
        report.sentences.to_string(),
        report.failures.len().to_string(),
        kb.entities.len().to_string(),
        kb.relations.len().to_string(),
    ]);
    drop(kb);
    #[derive(Serialize)]
    struct Out<'a> {
        run_id: &'a str,
        timestamp: &'a str,
        sentences: usize,
        failures: &'a [fewshot_ie::kb::SentenceFailure],
        records: usize,
    }
    s.write_json(
        "kb-build.json",
        &Out {
            run_id: &run_id,
            timestamp: &timestamp,
            sentences: report.sentences,
            failures: &report.failures,
            records: report.records.len(),
        },
    )?;
    s.emit_table("kb-build.txt", &t)?;
    if !report.failures.is_empty() {
        eprintln!("{} sentence(s) failed; see kb-build.json", report.failures.len());
    }
    Ok(())
}

pub fn verify(s: &mut Session, kb_dir: &Path, min_docs: usize) -> Result<()> {
    let store = open_existing(kb_dir)?;
    let report = store.verify(min_docs.max(1), &now_secs())?;
    let mut t = TextTable::new(&["Merged", "Conflicts", "Promoted"]);
    t.push(vec![report.merged.to_string(), report.conflicts.to_string(), report.promoted.to_string()]);
    s.write_json("kb-verify.json", &report)?;
    s.emit_table("kb-verify.txt", &t)
}

fn open_existing(kb_dir: &Path) -> Result<KbStore> {
    if !kb_dir.join("snapshot.jsonl").exists() {
        return Err(config_err(format!("no knowledge base at {}", kb_dir.display())));
    }
    Ok(KbStore::open(kb_dir, None)?)
}

pub fn parse_entity_key(raw: &str) -> Result<EntityKey> {
    let (t, surface) = raw
        .split_once(':')
        .ok_or_else(|| config_err(format!("entity keys look like TYPE:SURFACE, got '{raw}'")))?;
    Ok(EntityKey::new(surface, t))
}

fn docs(p: &[fewshot_ie::kb::Provenance]) -> usize {
    p.iter().map(|x| x.document_id.as_str()).collect::<BTreeSet<_>>().len()
}

fn entity_table(es: &[KbEntity]) -> TextTable {
    let mut t = TextTable::new(&["Entity", "Type", "Status", "Docs", "Surfaces"]);
    for e in es {
        t.push(vec![
            e.key.surface.clone(),
            e.key.entity_type.clone(),
            format!("{:?}", e.status).to_lowercase(),
            docs(&e.provenance).to_string(),
            e.surfaces.iter().cloned().collect::<Vec<_>>().join(" | "),
        ]);
    }
    t
}

fn relation_table(rs: &[KbRelation]) -> TextTable {
    let mut t = TextTable::new(&["Subject", "Label", "Object", "Status", "Docs"]);
    for r in rs {
        t.push(vec![
            r.subject.to_string(),
            r.label.clone(),
            r.object.to_string(),
            format!("{:?}", r.status).to_lowercase(),
            docs(&r.provenance).to_string(),
        ]);
    }
    t
}

pub fn query(s: &mut Session, kb_dir: &Path, q: Query) -> Result<()> {
    let store = open_existing(kb_dir)?;
    let result = store.query(&q).map_err(|e| config_err(e.to_string()))?;
    let table = match &result {
        QueryResult::Entities(es) => entity_table(es),
        QueryResult::Relations(rs) => relation_table(rs),
    };
    #[derive(Serialize)]
    struct Out<'a> {
        query: &'a Query,
        result: &'a QueryResult,
    }
    s.write_json("kb-query.json", &Out { query: &q, result: &result })?;
    s.emit_table("kb-query.txt", &table)?;
    println!("{} result(s)", result.len());
    Ok(())
}

pub fn export(kb_dir: &Path, file: &Path) -> Result<()> {
    let store = open_existing(kb_dir)?;
    store.export(file)?;
    let kb = store.read();
    println!(
        "exported {} entities and {} relations to {}",
        kb.entities.len(),
        kb.relations.len(),
        file.display()
    );
    Ok(())
}

pub fn import(kb_dir: &Path, file: &Path) -> Result<()> {
    let store = KbStore::import(kb_dir, file).with_context(|| format!("importing {}", file.display()))?;
    let kb = store.read();
    println!(
        "imported {} entities and {} relations into {}",
        kb.entities.len(),
        kb.relations.len(),
        kb_dir.display()
    );
    Ok(())
}

pub const DEFAULT_MIN_DOCS: usize = DEFAULT_MIN_DOCUMENTS;

pub fn cache_ls(cache_dir: &Path) -> Result<()> {
    let store = ReplayStore::open_existing(cache_dir).map_err(|e| config_err(e.to_string()))?;
    let mut t = TextTable::new(&["Key", "Model", "Prompt chars", "Completion"]);
    for key in store.keys()? {
        if let Some(entry) = store.get(&key)? {
            let completion: String = entry.response.text.chars().take(40).collect();
            t.push(vec![
                key.as_str()[..16].to_string(),
                entry.request.model_id.clone(),
                entry.request.prompt_text.chars().count().to_string(),
                format!("{completion:?}"),
            ]);
        }
    }
    println!("{t}");
    println!("{} entries in {}", store.len()?, cache_dir.display());
    Ok(())
}

pub fn cache_gc(cache_dir: &Path, keep_runs: &[PathBuf]) -> Result<()> {
    if keep_runs.is_empty() {
        return Err(config_err("cache gc needs at least one --keep-run directory"));
    }
    let store = ReplayStore::open_existing(cache_dir).map_err(|e| config_err(e.to_string()))?;
    let mut wanted = BTreeSet::new();
    for dir in keep_runs {
        wanted.extend(read_touched_keys(dir)?);
    }
    let keep = store
        .keys()?
        .into_iter()
        .filter(|k| wanted.contains(k.as_str()))
        .collect();
    let removed = store.retain(&keep)?;
    println!("kept {}, removed {removed} entries", keep.len());
    Ok(())
}
