//! Scoring, aggregation over seeds, and the analysis experiments.

mod ablation;
mod nullstudy;
mod table;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, LabelSet, Task};
use crate::pipeline::{Engine, EngineError, Prediction};
use crate::prompt::Template;
use crate::text::normalize_key;

pub use ablation::{ablation_arms, run_ablation, AblationArm, AblationReport, AblationRow};
pub use nullstudy::{
    modified_dataset_experiment, null_probability_study, null_token_mass, EntityBucket,
    ModifiedReport, ModifiedRow, NullProbRow, NullStudyReport,
};
pub use table::{pct, TextTable};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions do not align with gold: {} missing ({}), {} unknown ({})",
        missing.len(), preview(missing), unknown.len(), preview(unknown))]
    Alignment {
        missing: Vec<String>,
        unknown: Vec<String>,
    },
    #[error("duplicate prediction for id {0}")]
    DuplicateId(String),
    #[error("unknown label '{label}' for instance {id}")]
    UnknownLabel { id: String, label: String },
    #[error("record {id} has no {expected} field")]
    WrongKind { id: String, expected: &'static str },
    #[error("no reports to aggregate")]
    NoRuns,
    #[error("{0}")]
    Setup(String),
    #[error("prediction record file {path}, line {line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn preview(ids: &[String]) -> String {
    const SHOW: usize = 10;
    let mut s = ids.iter().take(SHOW).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOW {
        s.push_str(", ...");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub examples: usize,
    /// Set when there is nothing to score (no positive gold or predictions).
    pub undefined: bool,
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, examples: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            examples,
            undefined: tp + fp + fn_ == 0,
        }
    }

    /// Precision, F1, Recall as percentages, the column order of the report tables.
    pub fn pfr_cells(&self) -> Vec<String> {
        vec![pct(self.precision), pct(self.f1), pct(self.recall)]
    }
}

/// One line of a prediction file: `{"id", "entities": [...]}` or `{"id", "label"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl PredictionRecord {
    pub fn entities(id: impl Into<String>, entities: Vec<String>) -> Self {
        Self {
            id: id.into(),
            entities: Some(entities),
            label: None,
        }
    }

    pub fn label(id: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            entities: None,
            label: Some(label.into()),
        }
    }

    /// The gold answer of an example in record form.
    pub fn gold(example: &Example) -> Self {
        match example {
            Example::Ner(e) => Self::entities(&e.id, e.gold_entities.clone()),
            Example::Re(e) => Self::label(&e.id, &e.gold_label),
        }
    }
}

impl From<&Prediction> for PredictionRecord {
    fn from(p: &Prediction) -> Self {
        match (p.entities(), p.label()) {
            (Some(e), _) => Self::entities(&p.id, e.to_vec()),
            (_, Some(l)) => Self::label(&p.id, l),
            _ => unreachable!("a prediction carries entities or a label"),
        }
    }
}

pub fn read_prediction_records(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    let io = |e: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| EvalError::Record {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_prediction_records(path: &Path, records: &[PredictionRecord]) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
    }
    file.flush().map_err(io)
}

/// Reorders `records` to follow `golds`, failing on gaps, extras or duplicates.
pub fn align_predictions(
    records: Vec<PredictionRecord>,
    golds: &[Example],
) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut by_id: HashMap<String, PredictionRecord> = HashMap::with_capacity(records.len());
    for r in records {
        if by_id.contains_key(&r.id) {
            return Err(EvalError::DuplicateId(r.id));
        }
        by_id.insert(r.id.clone(), r);
    }
    let gold_ids: HashSet<&str> = golds.iter().map(Example::id).collect();
    let missing: Vec<String> = golds
        .iter()
        .filter(|g| !by_id.contains_key(g.id()))
        .map(|g| g.id().to_string())
        .collect();
    let mut unknown: Vec<String> = by_id
        .keys()
        .filter(|id| !gold_ids.contains(id.as_str()))
        .cloned()
        .collect();
    unknown.sort();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(EvalError::Alignment { missing, unknown });
    }
    Ok(golds
        .iter()
        .map(|g| by_id.remove(g.id()).expect("checked above"))
        .collect())
}

/// Reads a baseline prediction file and aligns it with `golds`.
pub fn ingest_baseline_predictions(
    path: &Path,
    golds: &[Example],
) -> Result<Vec<PredictionRecord>, EvalError> {
    align_predictions(read_prediction_records(path)?, golds)
}

fn key_set(surfaces: &[String]) -> HashSet<String> {
    surfaces.iter().map(|s| normalize_key(s)).filter(|s| !s.is_empty()).collect()
}

/// Entity-level precision/recall/F1 over normalized surface sets, summed over sentences.
pub fn ner_prf(predictions: &[PredictionRecord], golds: &[Example]) -> Result<MetricsReport, EvalError> {
    let aligned = align_predictions(predictions.to_vec(), golds)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (pred, gold) in aligned.iter().zip(golds) {
        let gold = gold.as_ner().ok_or_else(|| EvalError::WrongKind {
            id: gold.id().to_string(),
            expected: "entities",
        })?;
        let predicted = pred.entities.as_ref().ok_or_else(|| EvalError::WrongKind {
            id: pred.id.clone(),
            expected: "entities",
        })?;
        let p = key_set(predicted);
        let g = key_set(&gold.gold_entities);
        let hit = p.intersection(&g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, golds.len()))
}

fn label_pairs<'a>(
    predictions: &'a [PredictionRecord],
    golds: &'a [Example],
    labels: &LabelSet,
) -> Result<Vec<(usize, usize)>, EvalError> {
    let aligned = align_predictions(predictions.to_vec(), golds)?;
    aligned
        .iter()
        .zip(golds)
        .map(|(pred, gold)| {
            let gold_re = gold.as_re().ok_or_else(|| EvalError::WrongKind {
                id: gold.id().to_string(),
                expected: "label",
            })?;
            let predicted = pred.label.as_deref().ok_or_else(|| EvalError::WrongKind {
                id: pred.id.clone(),
                expected: "label",
            })?;
            let lookup = |l: &str| {
                labels.id(l).ok_or_else(|| EvalError::UnknownLabel {
                    id: pred.id.clone(),
                    label: l.to_string(),
                })
            };
            Ok((lookup(&gold_re.gold_label)?, lookup(predicted)?))
        })
        .collect()
}

/// Micro-averaged RE scores with the null label excluded from credit.
pub fn re_micro(
    predictions: &[PredictionRecord],
    golds: &[Example],
    labels: &LabelSet,
) -> Result<MetricsReport, EvalError> {
    let null = labels.null_id();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in label_pairs(predictions, golds, labels)? {
        if p == g && g != null {
            tp += 1;
        }
        if p != null && p != g {
            fp += 1;
        }
        if g != null && p != g {
            fn_ += 1;
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, golds.len()))
}

/// Scores records with the metric matching the task.
pub fn score(
    task: Task,
    predictions: &[PredictionRecord],
    golds: &[Example],
    labels: Option<&LabelSet>,
) -> Result<MetricsReport, EvalError> {
    match task {
        Task::Ner => ner_prf(predictions, golds),
        Task::Re => re_micro(
            predictions,
            golds,
            labels.ok_or_else(|| EvalError::Setup("relation scoring needs a label set".into()))?,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `counts[gold][predicted]`.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn to_table(&self) -> TextTable {
        let mut header = vec!["gold \\ predicted"];
        header.extend(self.labels.iter().map(String::as_str));
        let mut t = TextTable::new(&header);
        for (label, row) in self.labels.iter().zip(&self.counts) {
            let mut cells = vec![label.clone()];
            cells.extend(row.iter().map(usize::to_string));
            t.push(cells);
        }
        t
    }
}

pub fn confusion_matrix(
    predictions: &[PredictionRecord],
    golds: &[Example],
    labels: &LabelSet,
) -> Result<ConfusionMatrix, EvalError> {
    let mut counts = vec![vec![0; labels.len()]; labels.len()];
    for (g, p) in label_pairs(predictions, golds, labels)? {
        counts[g][p] += 1;
    }
    Ok(ConfusionMatrix {
        labels: labels.names().to_vec(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }

    pub fn display_pct(&self) -> String {
        format!("{:.1} ± {:.1}", self.mean * 100.0, self.std * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub single_run: bool,
}

pub fn aggregate_runs(reports: &[MetricsReport], seeds: &[u64]) -> Result<RunAggregate, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoRuns);
    }
    let column = |f: fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(RunAggregate {
        runs: reports.len(),
        seeds: seeds.to_vec(),
        precision: column(|r| r.precision),
        recall: column(|r| r.recall),
        f1: column(|r| r.f1),
        single_run: reports.len() == 1,
    })
}

/// Predicts `tests` with `template` and returns records in test order.
pub fn predict_records(
    engine: &Engine,
    template: &Template,
    shot_source: &[Example],
    tests: &[Example],
) -> Result<Vec<PredictionRecord>, EvalError> {
    engine
        .predict_all(template, shot_source, tests)
        .into_iter()
        .map(|r| r.map(|p| PredictionRecord::from(&p)).map_err(EvalError::from))
        .collect()
}

/// Predicts and scores in one go.
pub fn evaluate(
    engine: &Engine,
    template: &Template,
    shot_source: &[Example],
    tests: &[Example],
) -> Result<(Vec<PredictionRecord>, MetricsReport), EvalError> {
    let records = predict_records(engine, template, shot_source, tests)?;
    let task = template.config.task;
    let metrics = score(task, &records, tests, engine.labels())?;
    Ok((records, metrics))
}

/// Distinct gold labels, for reporting which classes a run saw.
pub fn label_support(golds: &[Example]) -> BTreeSet<String> {
    golds
        .iter()
        .filter_map(|g| g.as_re().map(|r| r.gold_label.clone()))
        .collect()
}
