//! Dataset records, loading, statistics and sampling.
//!
//! A dataset directory holds a `manifest.json` plus `train.jsonl`,
//! `dev.jsonl` and `test.jsonl`, one flat JSON record per line:
//!
//! ```text
//! NER: {"id": "...", "text": "...", "entities": ["surface", ...]}
//! RE:  {"id": "...", "text": "...", "subj": {"surface": "...", "start": 0, "end": 4},
//!       "obj": {...}, "label": "..."}
//! ```
//!
//! Offsets are 0-based, half-open char offsets over the whitespace-normalized
//! text. The manifest declares `name`, `task`, and for RE the `null_label`
//! (optionally the ordered `labels`); NER manifests may set `entity_type`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{char_slice, normalize_key, normalize_ws, sha256_hex};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_POOL_SIZE: usize = 100;
pub const DEFAULT_TEST_CAP: usize = 1000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: malformed record: {message}")]
    Malformed {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: record {id} rejected: {reason}")]
    InvalidRecord {
        file: PathBuf,
        line: usize,
        id: String,
        reason: String,
    },
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("dataset is {found} but {expected} was requested")]
    TaskMismatch { expected: Task, found: Task },
    #[error("example id {0} appears more than once across splits")]
    DuplicateId(String),
    #[error("invalid label set: {0}")]
    Labels(String),
    #[error("requested {requested} examples but only {available} are available")]
    Insufficient { requested: usize, available: usize },
    #[error("label {label} has {available} training examples, balanced pool needs {needed}")]
    InsufficientForBalance {
        label: String,
        needed: usize,
        available: usize,
    },
    #[error("operation requires a {expected} split")]
    WrongTask { expected: Task },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ner,
    Re,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ner => "ner",
            Task::Re => "re",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ner" => Ok(Task::Ner),
            "re" => Ok(Task::Re),
            other => Err(format!("unknown task '{other}' (expected 'ner' or 're')")),
        }
    }
}

/// One sentence with its gold entity surfaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerExample {
    pub id: String,
    pub text: String,
    pub gold_entities: Vec<String>,
    pub entity_type: String,
}

impl NerExample {
    /// Builds a validated example: text and surfaces are whitespace-normalized,
    /// surfaces are deduplicated case-insensitively and must occur in the text.
    pub fn new(
        id: impl Into<String>,
        text: &str,
        entities: &[impl AsRef<str>],
        entity_type: impl Into<String>,
    ) -> Result<Self, String> {
        let text = normalize_ws(text);
        let mut seen = HashSet::new();
        let mut gold_entities = Vec::new();
        for surface in entities {
            let surface = normalize_ws(surface.as_ref());
            if surface.is_empty() {
                return Err("empty entity surface".into());
            }
            if !text.contains(&surface) {
                return Err(format!("gold surface '{surface}' not found in sentence"));
            }
            if seen.insert(normalize_key(&surface)) {
                gold_entities.push(surface);
            }
        }
        Ok(Self {
            id: id.into(),
            text,
            gold_entities,
            entity_type: entity_type.into(),
        })
    }

    pub fn is_null(&self) -> bool {
        self.gold_entities.is_empty()
    }
}

/// An entity mention inside an RE sentence, with char offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

impl Mention {
    /// Locates the first occurrence of `surface` in `text`.
    pub fn locate(text: &str, surface: &str) -> Option<Self> {
        let start = crate::text::find_char_offset(text, surface)?;
        Some(Self {
            surface: surface.to_string(),
            start,
            end: start + surface.chars().count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReExample {
    pub id: String,
    pub text: String,
    pub subject: Mention,
    pub object: Mention,
    pub gold_label: String,
}

impl ReExample {
    pub fn new(
        id: impl Into<String>,
        text: &str,
        subject: Mention,
        object: Mention,
        gold_label: impl Into<String>,
    ) -> Result<Self, String> {
        let text = normalize_ws(text);
        for (role, m) in [("subject", &subject), ("object", &object)] {
            match char_slice(&text, m.start, m.end) {
                None => return Err(format!("{role} span {}..{} out of bounds", m.start, m.end)),
                Some(s) if s != m.surface => {
                    return Err(format!(
                        "{role} span {}..{} is '{s}', expected '{}'",
                        m.start, m.end, m.surface
                    ))
                }
                Some(_) => {}
            }
        }
        Ok(Self {
            id: id.into(),
            text,
            subject,
            object,
            gold_label: gold_label.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Example {
    Ner(NerExample),
    Re(ReExample),
}

impl Example {
    pub fn id(&self) -> &str {
        match self {
            Example::Ner(e) => &e.id,
            Example::Re(e) => &e.id,
        }
    }

    pub fn text(&self) -> &str {
        match self {
            Example::Ner(e) => &e.text,
            Example::Re(e) => &e.text,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Example::Ner(_) => Task::Ner,
            Example::Re(_) => Task::Re,
        }
    }

    pub fn as_ner(&self) -> Option<&NerExample> {
        match self {
            Example::Ner(e) => Some(e),
            Example::Re(_) => None,
        }
    }

    pub fn as_re(&self) -> Option<&ReExample> {
        match self {
            Example::Re(e) => Some(e),
            Example::Ner(_) => None,
        }
    }

    /// True for entity-free NER sentences and null-labelled RE instances.
    pub fn is_null(&self, labels: Option<&LabelSet>) -> bool {
        match self {
            Example::Ner(e) => e.is_null(),
            Example::Re(e) => labels.is_some_and(|l| l.null_name() == e.gold_label),
        }
    }
}

/// Ordered relation label set with one designated null label. Label ids are
/// positions in this list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
    null: usize,
}

impl LabelSet {
    pub fn new(names: Vec<String>, null_label: &str) -> Result<Self, CorpusError> {
        if names.is_empty() {
            return Err(CorpusError::Labels("label set is empty".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(CorpusError::Labels(format!("duplicate label '{n}'")));
            }
        }
        let null = names
            .iter()
            .position(|n| n == null_label)
            .ok_or_else(|| CorpusError::Labels(format!("null label '{null_label}' not in label set")))?;
        Ok(Self { names, null })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn null_id(&self) -> usize {
        self.null
    }

    pub fn null_name(&self) -> &str {
        &self.names[self.null]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Dev,
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 3] = [SplitPart::Train, SplitPart::Dev, SplitPart::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            SplitPart::Train => "train.jsonl",
            SplitPart::Dev => "dev.jsonl",
            SplitPart::Test => "test.jsonl",
        }
    }
}

impl fmt::Display for SplitPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitPart::Train => "train",
            SplitPart::Dev => "dev",
            SplitPart::Test => "test",
        })
    }
}

/// Records which split parts were read. Attach one to a split to audit that
/// a procedure only touched the parts it is allowed to.
#[derive(Debug, Default)]
pub struct AccessLog {
    events: Mutex<Vec<SplitPart>>,
}

impl AccessLog {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn record(&self, part: SplitPart) {
        self.events.lock().unwrap().push(part);
    }

    pub fn events(&self) -> Vec<SplitPart> {
        self.events.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.events.lock().unwrap().clear();
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    task: Task,
    name: String,
    entity_type: Option<String>,
    train: Vec<Example>,
    dev: Vec<Example>,
    test: Vec<Example>,
    labels: Option<LabelSet>,
    warnings: Vec<String>,
    access_log: Option<Arc<AccessLog>>,
}

impl PartialEq for DatasetSplit {
    fn eq(&self, other: &Self) -> bool {
        self.task == other.task
            && self.name == other.name
            && self.entity_type == other.entity_type
            && self.train == other.train
            && self.dev == other.dev
            && self.test == other.test
            && self.labels == other.labels
    }
}

impl DatasetSplit {
    /// Assembles a split from already-validated examples, checking task
    /// consistency, id disjointness and (for RE) label membership.
    pub fn from_parts(
        task: Task,
        name: impl Into<String>,
        train: Vec<Example>,
        dev: Vec<Example>,
        test: Vec<Example>,
        labels: Option<LabelSet>,
    ) -> Result<Self, CorpusError> {
        if task == Task::Re && labels.is_none() {
            return Err(CorpusError::Labels("RE split requires a label set".into()));
        }
        let mut ids = HashSet::new();
        let mut entity_type = None;
        for ex in train.iter().chain(&dev).chain(&test) {
            if ex.task() != task {
                return Err(CorpusError::TaskMismatch {
                    expected: task,
                    found: ex.task(),
                });
            }
            if !ids.insert(ex.id().to_string()) {
                return Err(CorpusError::DuplicateId(ex.id().to_string()));
            }
            match ex {
                Example::Re(re) => {
                    let labels = labels.as_ref().expect("checked above");
                    if labels.id(&re.gold_label).is_none() {
                        return Err(CorpusError::Labels(format!(
                            "example {} has label '{}' outside the label set",
                            re.id, re.gold_label
                        )));
                    }
                }
                Example::Ner(ner) => {
                    entity_type.get_or_insert_with(|| ner.entity_type.clone());
                }
            }
        }
        Ok(Self {
            task,
            name: name.into(),
            entity_type,
            train,
            dev,
            test,
            labels,
            warnings: Vec::new(),
            access_log: None,
        })
    }

    pub fn with_access_log(mut self, log: Arc<AccessLog>) -> Self {
        self.access_log = Some(log);
        self
    }

    fn log(&self, part: SplitPart) {
        if let Some(log) = &self.access_log {
            log.record(part);
        }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn entity_type(&self) -> Option<&str> {
        self.entity_type.as_deref()
    }

    pub fn labels(&self) -> Option<&LabelSet> {
        self.labels.as_ref()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn train(&self) -> &[Example] {
        self.log(SplitPart::Train);
        &self.train
    }

    pub fn dev(&self) -> &[Example] {
        self.log(SplitPart::Dev);
        &self.dev
    }

    pub fn test(&self) -> &[Example] {
        self.log(SplitPart::Test);
        &self.test
    }

    pub fn part(&self, part: SplitPart) -> &[Example] {
        match part {
            SplitPart::Train => self.train(),
            SplitPart::Dev => self.dev(),
            SplitPart::Test => self.test(),
        }
    }

    fn warn(&mut self, message: String) {
        log::warn!("{}: {message}", self.name);
        self.warnings.push(message);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub null_label: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NerRecord {
    id: String,
    text: String,
    entities: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MentionRecord {
    surface: String,
    start: usize,
    end: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReRecord {
    id: String,
    text: String,
    subj: MentionRecord,
    obj: MentionRecord,
    label: String,
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CorpusError> {
    let path = dir.join(MANIFEST_FILE);
    let raw = read_file(&path)?;
    let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| CorpusError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    if manifest.task == Task::Re && manifest.null_label.is_none() {
        return Err(CorpusError::Manifest {
            path,
            message: "RE manifests must declare null_label".into(),
        });
    }
    Ok(manifest)
}

fn parse_part(
    path: &Path,
    raw: &str,
    manifest: &Manifest,
) -> Result<Vec<(usize, Example)>, CorpusError> {
    let entity_type = manifest.entity_type.clone().unwrap_or_else(|| "entity".into());
    let mut out = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        let malformed = |message: String| CorpusError::Malformed {
            file: path.to_path_buf(),
            line: line_no,
            message,
        };
        if line.trim().is_empty() {
            return Err(malformed("empty line".into()));
        }
        let example = match manifest.task {
            Task::Ner => {
                let rec: NerRecord =
                    serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
                NerExample::new(rec.id.clone(), &rec.text, &rec.entities, entity_type.clone())
                    .map(Example::Ner)
                    .map_err(|reason| CorpusError::InvalidRecord {
                        file: path.to_path_buf(),
                        line: line_no,
                        id: rec.id,
                        reason,
                    })?
            }
            Task::Re => {
                let rec: ReRecord =
                    serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
                let subject = Mention {
                    surface: rec.subj.surface,
                    start: rec.subj.start,
                    end: rec.subj.end,
                };
                let object = Mention {
                    surface: rec.obj.surface,
                    start: rec.obj.start,
                    end: rec.obj.end,
                };
                ReExample::new(rec.id.clone(), &rec.text, subject, object, rec.label)
                    .map(Example::Re)
                    .map_err(|reason| CorpusError::InvalidRecord {
                        file: path.to_path_buf(),
                        line: line_no,
                        id: rec.id,
                        reason,
                    })?
            }
        };
        out.push((line_no, example));
    }
    Ok(out)
}

/// Loads a dataset directory in the canonical record format.
pub fn load_split(dir: &Path, task: Task) -> Result<DatasetSplit, CorpusError> {
    let manifest = read_manifest(dir)?;
    if manifest.task != task {
        return Err(CorpusError::TaskMismatch {
            expected: task,
            found: manifest.task,
        });
    }

    let mut parts: Vec<Vec<(usize, Example)>> = Vec::with_capacity(3);
    let mut warnings = Vec::new();
    for part in SplitPart::ALL {
        let path = dir.join(part.file_name());
        let raw = read_file(&path)?;
        let examples = parse_part(&path, &raw, &manifest)?;
        if examples.is_empty() {
            warnings.push(format!("{} is empty", part.file_name()));
        }
        parts.push(examples);
    }

    let labels = match task {
        Task::Ner => None,
        Task::Re => {
            let null = manifest.null_label.clone().expect("validated in read_manifest");
            let names = match &manifest.labels {
                Some(declared) => declared.clone(),
                None => {
                    let mut names: Vec<String> = parts
                        .iter()
                        .flatten()
                        .filter_map(|(_, e)| e.as_re().map(|r| r.gold_label.clone()))
                        .chain(std::iter::once(null.clone()))
                        .collect();
                    names.sort();
                    names.dedup();
                    names
                }
            };
            let labels = LabelSet::new(names, &null)?;
            for (part, examples) in SplitPart::ALL.iter().zip(&parts) {
                for (line, ex) in examples {
                    let re = ex.as_re().expect("RE task");
                    if labels.id(&re.gold_label).is_none() {
                        return Err(CorpusError::InvalidRecord {
                            file: dir.join(part.file_name()),
                            line: *line,
                            id: re.id.clone(),
                            reason: format!("label '{}' is not declared", re.gold_label),
                        });
                    }
                }
            }
            Some(labels)
        }
    };

    let mut it = parts
        .into_iter()
        .map(|p| p.into_iter().map(|(_, e)| e).collect::<Vec<_>>());
    let (train, dev, test) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    let mut split = DatasetSplit::from_parts(task, manifest.name, train, dev, test, labels)?;
    if manifest.entity_type.is_some() {
        split.entity_type = manifest.entity_type;
    }
    for w in warnings {
        split.warn(w);
    }
    Ok(split)
}

/// Serializes one example as a canonical record line (no trailing newline).
pub fn example_to_record(example: &Example) -> String {
    match example {
        Example::Ner(e) => serde_json::to_string(&NerRecord {
            id: e.id.clone(),
            text: e.text.clone(),
            entities: e.gold_entities.clone(),
        }),
        Example::Re(e) => serde_json::to_string(&ReRecord {
            id: e.id.clone(),
            text: e.text.clone(),
            subj: MentionRecord {
                surface: e.subject.surface.clone(),
                start: e.subject.start,
                end: e.subject.end,
            },
            obj: MentionRecord {
                surface: e.object.surface.clone(),
                start: e.object.start,
                end: e.object.end,
            },
            label: e.gold_label.clone(),
        }),
    }
    .expect("records always serialize")
}

pub fn write_records(path: &Path, examples: &[Example]) -> Result<(), CorpusError> {
    let mut body = String::new();
    for ex in examples {
        body.push_str(&example_to_record(ex));
        body.push('\n');
    }
    fs::write(path, body).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a split back out in the canonical layout.
pub fn export_split(split: &DatasetSplit, dir: &Path) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let manifest = Manifest {
        name: split.name.clone(),
        task: split.task,
        entity_type: split.entity_type.clone(),
        labels: split.labels.as_ref().map(|l| l.names.clone()),
        null_label: split.labels.as_ref().map(|l| l.null_name().to_string()),
    };
    let mut body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    body.push('\n');
    fs::write(dir.join(MANIFEST_FILE), body).map_err(io)?;
    for (part, examples) in [
        (SplitPart::Train, &split.train),
        (SplitPart::Dev, &split.dev),
        (SplitPart::Test, &split.test),
    ] {
        write_records(&dir.join(part.file_name()), examples)?;
    }
    Ok(())
}

/// SHA-256 over the canonical records of every part.
pub fn split_digest(split: &DatasetSplit) -> String {
    let mut buf = format!("{}\n{}\n", split.name, split.task);
    for examples in [&split.train, &split.dev, &split.test] {
        for ex in examples {
            buf.push_str(&example_to_record(ex));
            buf.push('\n');
        }
        buf.push_str("--\n");
    }
    sha256_hex(buf.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartStats {
    pub part: SplitPart,
    pub examples: usize,
    pub null_examples: usize,
    pub null_fraction: f64,
    /// Per-label counts (RE only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub label_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub task: Task,
    pub parts: Vec<PartStats>,
}

impl DatasetStats {
    pub fn counts(&self) -> (usize, usize, usize) {
        let get = |p| {
            self.parts
                .iter()
                .find(|s| s.part == p)
                .map_or(0, |s| s.examples)
        };
        (get(SplitPart::Train), get(SplitPart::Dev), get(SplitPart::Test))
    }
}

pub fn compute_stats(split: &DatasetSplit) -> DatasetStats {
    let labels = split.labels();
    let parts = SplitPart::ALL
        .iter()
        .map(|&part| {
            let examples = split.part(part);
            let null_examples = examples.iter().filter(|e| e.is_null(labels)).count();
            let mut label_counts = BTreeMap::new();
            if let Some(labels) = labels {
                for name in labels.names() {
                    label_counts.insert(name.clone(), 0);
                }
                for ex in examples.iter().filter_map(Example::as_re) {
                    *label_counts.entry(ex.gold_label.clone()).or_default() += 1;
                }
            }
            PartStats {
                part,
                examples: examples.len(),
                null_examples,
                null_fraction: if examples.is_empty() {
                    0.0
                } else {
                    null_examples as f64 / examples.len() as f64
                },
                label_counts,
            }
        })
        .collect();
    DatasetStats {
        name: split.name.clone(),
        task: split.task,
        parts,
    }
}

/// Published train/dev/test sizes of the BLURB NER and RE datasets.
pub const BLURB_SPLIT_SIZES: [(&str, Task, [usize; 3]); 8] = [
    ("BC5CDR-disease", Task::Ner, [4182, 4244, 4424]),
    ("BC5CDR-chem", Task::Ner, [5203, 5347, 5385]),
    ("NCBI-disease", Task::Ner, [5134, 787, 960]),
    ("JNLPBA", Task::Ner, [46750, 4551, 8662]),
    ("BC2GM", Task::Ner, [15197, 3061, 6325]),
    ("DDI", Task::Re, [25296, 2496, 5716]),
    ("ChemProt", Task::Re, [18035, 11268, 15745]),
    ("GAD", Task::Re, [4261, 535, 534]),
];

/// Reference sizes for a known dataset name (case-insensitive).
pub fn reference_sizes(name: &str) -> Option<(Task, [usize; 3])> {
    BLURB_SPLIT_SIZES
        .iter()
        .find(|(n, _, _)| n.eq_ignore_ascii_case(name))
        .map(|&(_, task, sizes)| (task, sizes))
}

/// A seeded training pool, sorted by example id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPool {
    pub examples: Vec<Example>,
    pub seed: u64,
    pub balanced: bool,
}

impl TrainPool {
    pub fn from_examples(examples: Vec<Example>, seed: u64) -> Self {
        Self {
            examples,
            seed,
            balanced: false,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn digest(&self) -> String {
        let mut buf = String::new();
        for ex in &self.examples {
            buf.push_str(&example_to_record(ex));
            buf.push('\n');
        }
        sha256_hex(buf.as_bytes())
    }
}

fn sorted_by_id(examples: &[Example]) -> Vec<&Example> {
    let mut v: Vec<&Example> = examples.iter().collect();
    v.sort_by(|a, b| a.id().cmp(b.id()).then_with(|| a.text().cmp(b.text())));
    v
}

/// Draws a training pool of `n` examples. Candidates are put in canonical
/// id order first, so the result depends only on the example multiset.
///
/// Balanced pools (RE only) give each label `n / |labels|` examples; the
/// remaining slots go one each to labels in ascending label id that still
/// have spare examples.
pub fn sample_train_pool(
    split: &DatasetSplit,
    n: usize,
    seed: u64,
    balanced: bool,
) -> Result<TrainPool, CorpusError> {
    let candidates = sorted_by_id(split.train());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen: Vec<Example> = if !balanced {
        if n > candidates.len() {
            return Err(CorpusError::Insufficient {
                requested: n,
                available: candidates.len(),
            });
        }
        index::sample(&mut rng, candidates.len(), n)
            .into_iter()
            .map(|i| candidates[i].clone())
            .collect()
    } else {
        let labels = split.labels().ok_or(CorpusError::WrongTask { expected: Task::Re })?;
        let mut by_label: Vec<Vec<&Example>> = vec![Vec::new(); labels.len()];
        for ex in candidates {
            let re = ex.as_re().expect("RE split");
            by_label[labels.id(&re.gold_label).expect("validated label")].push(ex);
        }
        let base = n / labels.len();
        let mut quotas = vec![base; labels.len()];
        for (id, group) in by_label.iter().enumerate() {
            if group.len() < base {
                return Err(CorpusError::InsufficientForBalance {
                    label: labels.name(id).to_string(),
                    needed: base,
                    available: group.len(),
                });
            }
        }
        let mut remainder = n % labels.len();
        for (id, group) in by_label.iter().enumerate() {
            if remainder == 0 {
                break;
            }
            if group.len() > quotas[id] {
                quotas[id] += 1;
                remainder -= 1;
            }
        }
        if remainder > 0 {
            return Err(CorpusError::Insufficient {
                requested: n,
                available: n - remainder,
            });
        }
        let mut out = Vec::with_capacity(n);
        for (group, quota) in by_label.iter().zip(&quotas) {
            out.extend(
                index::sample(&mut rng, group.len(), *quota)
                    .into_iter()
                    .map(|i| group[i].clone()),
            );
        }
        out
    };
    chosen.sort_by(|a, b| a.id().cmp(b.id()).then_with(|| a.text().cmp(b.text())));
    Ok(TrainPool {
        examples: chosen,
        seed,
        balanced,
    })
}

/// Largest-remainder apportionment of `cap` slots proportional to `counts`.
/// Leftover slots go to the largest fractional parts, ties to the lower index.
pub fn largest_remainder_quotas(counts: &[usize], cap: usize) -> Vec<usize> {
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let cap = (cap as u128).min(total);
    let mut quotas: Vec<usize> = Vec::with_capacity(counts.len());
    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(counts.len());
    for (i, &c) in counts.iter().enumerate() {
        let scaled = cap * c as u128;
        quotas.push((scaled / total) as usize);
        remainders.push((scaled % total, i));
    }
    let assigned: usize = quotas.iter().sum();
    let mut leftover = cap as usize - assigned;
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &remainders {
        if leftover == 0 {
            break;
        }
        quotas[i] += 1;
        leftover -= 1;
    }
    quotas
}

/// Caps the test set at `cap` examples. RE samples are stratified by label
/// with largest-remainder quotas; NER samples are uniform. The returned
/// examples keep their original test order.
pub fn stratified_test_sample(split: &DatasetSplit, cap: usize, seed: u64) -> Vec<Example> {
    let test = split.test();
    if test.len() <= cap {
        return test.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = match split.labels() {
        None => index::sample(&mut rng, test.len(), cap).into_vec(),
        Some(labels) => {
            let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); labels.len()];
            for (i, ex) in test.iter().enumerate() {
                let re = ex.as_re().expect("RE split");
                by_label[labels.id(&re.gold_label).expect("validated label")].push(i);
            }
            let counts: Vec<usize> = by_label.iter().map(Vec::len).collect();
            let quotas = largest_remainder_quotas(&counts, cap);
            let mut out = Vec::with_capacity(cap);
            for (group, quota) in by_label.iter().zip(quotas) {
                out.extend(
                    index::sample(&mut rng, group.len(), quota)
                        .into_iter()
                        .map(|i| group[i]),
                );
            }
            out
        }
    };
    picked.sort_unstable();
    picked.into_iter().map(|i| test[i].clone()).collect()
}

/// Drops entity-free sentences, keeping ids and order.
pub fn strip_null_examples(examples: &[Example]) -> Vec<Example> {
    examples
        .iter()
        .filter(|e| !e.is_null(None))
        .cloned()
        .collect()
}

/// NER split with every entity-free sentence removed from all parts.
pub fn strip_null_sentences(split: &DatasetSplit) -> Result<DatasetSplit, CorpusError> {
    if split.task != Task::Ner {
        return Err(CorpusError::WrongTask { expected: Task::Ner });
    }
    let mut out = split.clone();
    out.train = strip_null_examples(&split.train);
    out.dev = strip_null_examples(&split.dev);
    out.test = strip_null_examples(&split.test);
    out.warnings.clear();
    for (part, examples) in [
        (SplitPart::Train, &split.train),
        (SplitPart::Dev, &split.dev),
        (SplitPart::Test, &split.test),
    ] {
        if !examples.is_empty() && examples.iter().all(|e| e.is_null(None)) {
            out.warn(format!("{part} contained only entity-free sentences and is now empty"));
        }
    }
    Ok(out)
}
