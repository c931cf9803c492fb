use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EntityKey, KbError, KbScope, KnowledgeBase, LogRecord, Provenance};
use crate::corpus::{Example, Mention, NerExample, ReExample};
use crate::pipeline::Engine;
use crate::prompt::Template;
use crate::text::normalize_ws;

/// A pre-fetched, sentence-segmented text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<String>,
}

/// Reads one `.txt` file or every `.txt` file in a directory (sorted by
/// name). One sentence per non-blank line; the file stem is the document id.
pub fn load_documents(path: &Path) -> Result<Vec<Document>, KbError> {
    let io = |p: &Path, e: std::io::Error| KbError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    let files = if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| io(f, e))?;
            Ok(Document {
                id: f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                sentences: text
                    .lines()
                    .map(normalize_ws)
                    .filter(|l| !l.is_empty())
                    .collect(),
            })
        })
        .collect()
}

/// What the KB builder needs from an extraction pipeline.
pub trait Extractor: Sync {
    /// (surface, entity type) pairs found in the sentence.
    fn entities(&self, id: &str, sentence: &str) -> Result<Vec<(String, String)>, String>;
    /// The relation label for an ordered pair, `None` for the null label.
    fn relation(&self, id: &str, sentence: &str, subject: &Mention, object: &Mention) -> Result<Option<String>, String>;
}

/// NER for one entity type: its own engine, config and shot source.
pub struct NerComponent {
    pub entity_type: String,
    pub engine: Engine,
    pub template: Template,
    pub shots: Vec<Example>,
}

pub struct ReComponent {
    pub engine: Engine,
    pub template: Template,
    pub shots: Vec<Example>,
}

/// Adapts configured engines to [`Extractor`].
pub struct EngineExtractor {
    pub ner: Vec<NerComponent>,
    pub re: Option<ReComponent>,
}

impl Extractor for EngineExtractor {
    fn entities(&self, id: &str, sentence: &str) -> Result<Vec<(String, String)>, String> {
        let mut out = Vec::new();
        for c in &self.ner {
            let test = Example::Ner(NerExample::new(id, sentence, &[] as &[&str], c.entity_type.clone())?);
            let p = c.engine.predict(&c.template, &c.shots, &test).map_err(|e| e.to_string())?;
            for s in p.entities().unwrap_or_default() {
                out.push((s.clone(), c.entity_type.clone()));
            }
        }
        Ok(out)
    }

    fn relation(&self, id: &str, sentence: &str, subject: &Mention, object: &Mention) -> Result<Option<String>, String> {
        let Some(re) = &self.re else {
            return Ok(None);
        };
        let labels = re.engine.labels().ok_or("RE engine has no label set")?;
        let test = Example::Re(ReExample::new(
            id,
            sentence,
            subject.clone(),
            object.clone(),
            labels.null_name(),
        )?);
        let p = re.engine.predict(&re.template, &re.shots, &test).map_err(|e| e.to_string())?;
        Ok(p.label().filter(|l| *l != labels.null_name()).map(str::to_string))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceFailure {
    pub document_id: String,
    pub sentence_index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub kb: KnowledgeBase,
    /// Upserts in application order, for the append log.
    pub records: Vec<LogRecord>,
    pub sentences: usize,
    pub failures: Vec<SentenceFailure>,
}

struct SentenceOutput {
    entities: Vec<(String, String)>,
    relations: Vec<(usize, usize, String)>,
}

fn extract_sentence(extractor: &dyn Extractor, id: &str, sentence: &str) -> Result<SentenceOutput, String> {
    let mut entities: Vec<(String, String)> = Vec::new();
    for (s, t) in extractor.entities(id, sentence)? {
        let key = EntityKey::new(&s, &t);
        if !entities.iter().any(|(s2, t2)| EntityKey::new(s2, t2) == key) {
            entities.push((s, t));
        }
    }
    let mut relations = Vec::new();
    for i in 0..entities.len() {
        for j in 0..entities.len() {
            if i == j {
                continue;
            }
            let (Some(subj), Some(obj)) = (
                Mention::locate(sentence, &entities[i].0),
                Mention::locate(sentence, &entities[j].0),
            ) else {
                continue;
            };
            let pair_id = format!("{id}:{i}-{j}");
            if let Some(label) = extractor.relation(&pair_id, sentence, &subj, &obj)? {
                relations.push((i, j, label));
            }
        }
    }
    Ok(SentenceOutput { entities, relations })
}

/// Extracts every sentence (in parallel on the rayon pool), then upserts the
/// results in document and sentence order. A sentence whose extraction or
/// upsert fails is recorded and skipped.
pub fn build_kb(
    documents: &[Document],
    scope: &KbScope,
    extractor: &dyn Extractor,
    run_id: &str,
    timestamp: &str,
) -> Result<BuildReport, KbError> {
    scope.validate()?;
    let jobs: Vec<(&str, usize, &str)> = documents
        .iter()
        .flat_map(|d| d.sentences.iter().enumerate().map(move |(i, s)| (d.id.as_str(), i, s.as_str())))
        .collect();
    let outputs: Vec<Result<SentenceOutput, String>> = jobs
        .par_iter()
        .map(|(doc, i, s)| extract_sentence(extractor, &format!("{doc}#{i}"), s))
        .collect();

    let mut kb = KnowledgeBase::new(scope.clone());
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((doc, idx, _), out) in jobs.iter().zip(outputs) {
        let provenance = Provenance {
            document_id: doc.to_string(),
            sentence_index: *idx,
            run_id: run_id.to_string(),
            timestamp: timestamp.to_string(),
        };
        let result = out.and_then(|out| {
            // Validate the sentence on its own so a failure leaves the KB untouched.
            let mut trial = KnowledgeBase::new(scope.clone());
            let mut staged = Vec::new();
            let mut keys = Vec::new();
            for (surface, t) in &out.entities {
                keys.push(trial.upsert_entity(surface, t, provenance.clone()).map_err(|e| e.to_string())?);
                staged.push(LogRecord::Entity {
                    timestamp: timestamp.to_string(),
                    surface: surface.clone(),
                    entity_type: t.clone(),
                    provenance: provenance.clone(),
                });
            }
            for (i, j, label) in &out.relations {
                trial
                    .upsert_relation(&keys[*i], &keys[*j], label, provenance.clone())
                    .map_err(|e| e.to_string())?;
                staged.push(LogRecord::Relation {
                    timestamp: timestamp.to_string(),
                    subject: keys[*i].clone(),
                    object: keys[*j].clone(),
                    label: label.clone(),
                    provenance: provenance.clone(),
                });
            }
            Ok(staged)
        });
        match result {
            Ok(staged) => {
                for r in &staged {
                    r.apply(&mut kb)?;
                }
                records.extend(staged);
            }
            Err(message) => {
                log::warn!("{doc}#{idx}: extraction failed: {message}");
                failures.push(SentenceFailure {
                    document_id: doc.to_string(),
                    sentence_index: *idx,
                    message,
                });
            }
        }
    }
    Ok(BuildReport {
        kb,
        records,
        sentences: jobs.len(),
        failures,
    })
}
