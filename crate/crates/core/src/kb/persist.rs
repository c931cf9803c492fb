use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock, RwLockReadGuard};

use serde::{Deserialize, Serialize};

use super::{
    EntityKey, KbEntity, KbError, KbRelation, KbScope, KnowledgeBase, Provenance, Query, QueryResult,
    RelationKey, VerifyReport,
};

pub const SNAPSHOT_VERSION: &str = "fewshot-ie-kb/1";
const SNAPSHOT_FILE: &str = "snapshot.jsonl";
const LOG_FILE: &str = "log.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum SnapshotRecord {
    Header { version: String, scope: KbScope },
    Entity(KbEntity),
    Relation(KbRelation),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> KbError {
    KbError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_snapshot(kb: &KnowledgeBase, out: &mut impl Write) -> std::io::Result<()> {
    let header = SnapshotRecord::Header {
        version: SNAPSHOT_VERSION.to_string(),
        scope: kb.scope.clone(),
    };
    let line = |r: &SnapshotRecord| serde_json::to_string(r).map_err(std::io::Error::other);
    writeln!(out, "{}", line(&header)?)?;
    for e in kb.entities.values() {
        writeln!(out, "{}", line(&SnapshotRecord::Entity(e.clone()))?)?;
    }
    for r in kb.relations.values() {
        writeln!(out, "{}", line(&SnapshotRecord::Relation(r.clone()))?)?;
    }
    Ok(())
}

/// Writes the snapshot atomically (temp file, then rename).
pub fn export_kb(kb: &KnowledgeBase, path: &Path) -> Result<(), KbError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write_snapshot(kb, &mut w).map_err(|e| io_err(path, e))?;
        w.flush().map_err(|e| io_err(path, e))?;
    }
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn import_kb(path: &Path) -> Result<KnowledgeBase, KbError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let corrupt = |line: usize, message: String| KbError::Corrupt { line: line + 1, message };
    let (_, first) = lines.next().ok_or_else(|| corrupt(0, "missing header".into()))?;
    let first = first.map_err(|e| io_err(path, e))?;
    let mut kb = match serde_json::from_str::<SnapshotRecord>(&first) {
        Ok(SnapshotRecord::Header { version, scope }) => {
            if version != SNAPSHOT_VERSION {
                return Err(KbError::Version {
                    found: version,
                    expected: SNAPSHOT_VERSION.into(),
                });
            }
            scope.validate()?;
            KnowledgeBase::new(scope)
        }
        Ok(_) => return Err(corrupt(0, "first record is not a header".into())),
        Err(e) => {
            // Report a version mismatch even if the rest of the header changed shape.
            let version = serde_json::from_str::<serde_json::Value>(&first)
                .ok()
                .and_then(|v| v.get("version").and_then(|s| s.as_str()).map(str::to_string));
            return match version {
                Some(v) if v != SNAPSHOT_VERSION => Err(KbError::Version {
                    found: v,
                    expected: SNAPSHOT_VERSION.into(),
                }),
                _ => Err(corrupt(0, e.to_string())),
            };
        }
    };
    let mut seen_relation = false;
    for (i, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SnapshotRecord>(&line).map_err(|e| corrupt(i, e.to_string()))? {
            SnapshotRecord::Header { .. } => return Err(corrupt(i, "duplicate header".into())),
            SnapshotRecord::Entity(e) => {
                if seen_relation {
                    return Err(corrupt(i, "entity record after relation records".into()));
                }
                if e.provenance.is_empty() {
                    return Err(corrupt(i, format!("entity {} has no provenance", e.key)));
                }
                if !kb.scope.entity_types.contains(&e.key.entity_type) {
                    return Err(corrupt(i, format!("entity type '{}' outside scope", e.key.entity_type)));
                }
                kb.entities.insert(e.key.clone(), e);
            }
            SnapshotRecord::Relation(r) => {
                seen_relation = true;
                if !kb.entities.contains_key(&r.subject) || !kb.entities.contains_key(&r.object) {
                    return Err(corrupt(i, format!("dangling relation {} -> {}", r.subject, r.object)));
                }
                if !kb.scope.relation_labels.contains(&r.label) {
                    return Err(corrupt(i, format!("relation label '{}' outside scope", r.label)));
                }
                kb.relations.insert(r.key(), r);
            }
        }
    }
    Ok(kb)
}

/// One line of the append log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LogRecord {
    Entity {
        timestamp: String,
        surface: String,
        entity_type: String,
        provenance: Provenance,
    },
    Relation {
        timestamp: String,
        subject: EntityKey,
        object: EntityKey,
        label: String,
        provenance: Provenance,
    },
    Verify {
        timestamp: String,
        min_documents: usize,
    },
}

impl LogRecord {
    /// The checks `apply` would fail on, without mutating.
    fn precheck(&self, kb: &KnowledgeBase) -> Result<(), KbError> {
        match self {
            LogRecord::Entity { surface, entity_type, .. } => {
                if !kb.scope.entity_types.contains(entity_type) {
                    return Err(KbError::TypeOutOfScope(entity_type.clone()));
                }
                if surface.trim().is_empty() {
                    return Err(KbError::EmptySurface);
                }
            }
            LogRecord::Relation { subject, object, label, .. } => {
                if !kb.scope.relation_labels.contains(label) {
                    return Err(KbError::LabelOutOfScope(label.clone()));
                }
                for k in [subject, object] {
                    if !kb.entities.contains_key(k) {
                        return Err(KbError::UnknownEntity(k.clone()));
                    }
                }
            }
            LogRecord::Verify { .. } => {}
        }
        Ok(())
    }

    pub(super) fn apply(&self, kb: &mut KnowledgeBase) -> Result<(), KbError> {
        match self {
            LogRecord::Entity {
                surface,
                entity_type,
                provenance,
                ..
            } => kb.upsert_entity(surface, entity_type, provenance.clone()).map(drop),
            LogRecord::Relation {
                subject,
                object,
                label,
                provenance,
                ..
            } => kb.upsert_relation(subject, object, label, provenance.clone()).map(drop),
            LogRecord::Verify { min_documents, .. } => {
                kb.verify(*min_documents);
                Ok(())
            }
        }
    }
}

/// A directory holding a snapshot and an append log. Mutations go through
/// one writer and are logged before they are applied in memory; readers
/// share the in-memory state.
pub struct KbStore {
    dir: PathBuf,
    kb: RwLock<KnowledgeBase>,
    log: Mutex<File>,
}

impl KbStore {
    /// Opens `dir`, creating an empty KB with `scope` if no snapshot exists.
    /// A partially written final log line is ignored.
    pub fn open(dir: &Path, scope: Option<KbScope>) -> Result<Self, KbError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let snapshot = dir.join(SNAPSHOT_FILE);
        let mut kb = if snapshot.exists() {
            import_kb(&snapshot)?
        } else {
            let scope = scope.ok_or_else(|| io_err(&snapshot, "no snapshot and no scope given"))?;
            scope.validate()?;
            let kb = KnowledgeBase::new(scope);
            export_kb(&kb, &snapshot)?;
            kb
        };
        let log_path = dir.join(LOG_FILE);
        if log_path.exists() {
            let text = fs::read_to_string(&log_path).map_err(|e| io_err(&log_path, e))?;
            let lines: Vec<&str> = text.lines().collect();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: LogRecord = match serde_json::from_str(line) {
                    Ok(r) => r,
                    Err(e) if i + 1 == lines.len() && !text.ends_with('\n') => {
                        log::warn!("dropping truncated final log line: {e}");
                        let keep = text.len() - line.len();
                        fs::write(&log_path, &text[..keep]).map_err(|e| io_err(&log_path, e))?;
                        break;
                    }
                    Err(e) => return Err(KbError::Corrupt { line: i + 1, message: e.to_string() }),
                };
                record.apply(&mut kb)?;
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| io_err(&log_path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            kb: RwLock::new(kb),
            log: Mutex::new(log),
        })
    }

    /// Seeds a directory that has no knowledge base yet from a snapshot file.
    pub fn import(dir: &Path, snapshot: &Path) -> Result<Self, KbError> {
        let target = dir.join(SNAPSHOT_FILE);
        if target.exists() {
            return Err(io_err(&target, "a knowledge base already exists here"));
        }
        let kb = import_kb(snapshot)?;
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        export_kb(&kb, &target)?;
        Self::open(dir, None)
    }

    pub fn export(&self, path: &Path) -> Result<(), KbError> {
        export_kb(&self.read(), path)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn read(&self) -> RwLockReadGuard<'_, KnowledgeBase> {
        self.kb.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn query(&self, q: &Query) -> Result<QueryResult, KbError> {
        self.read().query(q)
    }

    /// Validates against the current state, then logs and applies.
    fn commit<T>(
        &self,
        record: LogRecord,
        apply: impl FnOnce(&mut KnowledgeBase) -> Result<T, KbError>,
    ) -> Result<T, KbError> {
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        let mut kb = self.kb.write().unwrap_or_else(|e| e.into_inner());
        record.precheck(&kb)?;
        let line = serde_json::to_string(&record).map_err(|e| io_err(&self.dir, e))?;
        let log_path = self.dir.join(LOG_FILE);
        writeln!(log, "{line}").map_err(|e| io_err(&log_path, e))?;
        log.flush().map_err(|e| io_err(&log_path, e))?;
        apply(&mut kb)
    }

    pub fn upsert_entity(&self, surface: &str, entity_type: &str, provenance: Provenance) -> Result<EntityKey, KbError> {
        let record = LogRecord::Entity {
            timestamp: provenance.timestamp.clone(),
            surface: surface.to_string(),
            entity_type: entity_type.to_string(),
            provenance: provenance.clone(),
        };
        self.commit(record, |kb| kb.upsert_entity(surface, entity_type, provenance))
    }

    pub fn upsert_relation(
        &self,
        subject: &EntityKey,
        object: &EntityKey,
        label: &str,
        provenance: Provenance,
    ) -> Result<RelationKey, KbError> {
        let record = LogRecord::Relation {
            timestamp: provenance.timestamp.clone(),
            subject: subject.clone(),
            object: object.clone(),
            label: label.to_string(),
            provenance: provenance.clone(),
        };
        self.commit(record, |kb| kb.upsert_relation(subject, object, label, provenance))
    }

    pub fn verify(&self, min_documents: usize, timestamp: &str) -> Result<VerifyReport, KbError> {
        let record = LogRecord::Verify {
            timestamp: timestamp.to_string(),
            min_documents,
        };
        self.commit(record, |kb| Ok(kb.verify(min_documents)))
    }

    /// Logs and applies records in order, stopping at the first error.
    pub fn apply_records(&self, records: &[LogRecord]) -> Result<(), KbError> {
        for r in records {
            self.commit(r.clone(), |kb| r.apply(kb))?;
        }
        Ok(())
    }

    /// Rewrites the snapshot from memory and truncates the log.
    pub fn compact(&self) -> Result<(), KbError> {
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        let kb = self.read();
        export_kb(&kb, &self.dir.join(SNAPSHOT_FILE))?;
        let log_path = self.dir.join(LOG_FILE);
        File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
        *log = OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| io_err(&log_path, e))?;
        Ok(())
    }
}
