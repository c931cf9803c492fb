use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalError, MetricsReport, TextTable};
use crate::backend::{CompletionRequest, CompletionResponse, DEFAULT_LOGPROBS};
use crate::corpus::{strip_null_examples, Example, Task};
use crate::decode::DecodeError;
use crate::pipeline::{Engine, EngineError};
use crate::prompt::{render_prompt, Template};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityBucket {
    OneOrMore,
    Zero,
}

impl EntityBucket {
    pub fn of(example: &Example) -> Self {
        if example.is_null(None) {
            EntityBucket::Zero
        } else {
            EntityBucket::OneOrMore
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EntityBucket::OneOrMore => "One or More",
            EntityBucket::Zero => "Zero(null)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullProbRow {
    pub bucket: EntityBucket,
    pub p_null_2shot: f64,
    pub p_null_3shot: f64,
    pub absolute_delta: f64,
    pub percent_increase: f64,
    /// (example, draw) pairs averaged into this row.
    pub samples: usize,
}

impl NullProbRow {
    pub fn from_probs(bucket: EntityBucket, p2: f64, p3: f64) -> Self {
        Self {
            bucket,
            p_null_2shot: p2,
            p_null_3shot: p3,
            absolute_delta: p3 - p2,
            percent_increase: 100.0 * (p3 - p2) / p2,
            samples: 0,
        }
    }

    /// Cells as printed: probabilities in percent to one decimal, increase
    /// rounded to a whole percent. `scale` is 100 for [0, 1] inputs and 1
    /// for inputs already in percent.
    pub fn cells(&self, scale: f64) -> Vec<String> {
        vec![
            self.bucket.label().to_string(),
            format!("{:.1}", self.p_null_2shot * scale),
            format!("{:.1}", self.p_null_3shot * scale),
            format!("{:.1}", self.absolute_delta * scale),
            format!("{:.0}%", self.percent_increase),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullStudyReport {
    pub config_id: String,
    pub draws: usize,
    pub seed: u64,
    pub rows: Vec<NullProbRow>,
    pub warnings: Vec<String>,
}

impl NullStudyReport {
    pub fn to_table(&self) -> TextTable {
        let mut t = TextTable::new(&[
            "Entity Number",
            "P(null) 2-Shot",
            "P(null) 3-Shot",
            "Absolute Δ",
            "% Increase",
        ]);
        for row in &self.rows {
            t.push(row.cells(100.0));
        }
        t
    }
}

/// Probability mass of newline-only tokens at the first generated position.
pub fn null_token_mass(response: &CompletionResponse) -> Result<f64, DecodeError> {
    let top = response
        .first_top_logprobs()
        .filter(|m| !m.is_empty())
        .ok_or(DecodeError::NoLogprobs)?;
    Ok(top
        .iter()
        .filter(|(tok, _)| tok.contains('\n') && tok.chars().all(char::is_whitespace))
        .map(|(_, lp)| lp.exp())
        .sum())
}

fn null_mass(engine: &Engine, prompt_text: String) -> Result<f64, EvalError> {
    let mut request = CompletionRequest::new(engine.options().model_id.clone(), prompt_text);
    request.max_tokens = 1;
    request.stop = Vec::new();
    request.want_logprobs = DEFAULT_LOGPROBS;
    let response = engine
        .backend()
        .complete(&request)
        .map_err(EngineError::from)?;
    null_token_mass(&response).map_err(|e| EvalError::Engine(e.into()))
}

/// Null-token probability under a 2-shot prompt (one null and one entity
/// shot, in random order) and the same prompt with an extra null shot
/// prepended, averaged over `draws` random shot choices and bucketed by the
/// gold entity count of the queried sentence.
pub fn null_probability_study(
    engine: &Engine,
    template: &Template,
    pool: &[Example],
    draws: usize,
    seed: u64,
) -> Result<NullStudyReport, EvalError> {
    if template.config.task != Task::Ner {
        return Err(EvalError::Setup("the null-probability study is NER only".into()));
    }
    let nulls: Vec<&Example> = pool.iter().filter(|e| e.is_null(None)).collect();
    let filled: Vec<&Example> = pool.iter().filter(|e| !e.is_null(None)).collect();
    if nulls.len() < 2 || filled.is_empty() {
        return Err(EvalError::Setup(format!(
            "need at least 2 entity-free and 1 entity-bearing examples, pool has {} and {}",
            nulls.len(),
            filled.len()
        )));
    }
    let mut study = template.clone();
    study.config.shots = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Per bucket: (sum p2, sum p3, samples).
    let mut sums = [(0.0f64, 0.0f64, 0usize); 2];
    for _ in 0..draws {
        let pair = sample(&mut rng, nulls.len(), 2).into_vec();
        let (n1, n2) = (nulls[pair[0]], nulls[pair[1]]);
        let e = filled[rng.gen_range(0..filled.len())];
        let two: Vec<&Example> = if rng.gen_bool(0.5) { vec![n1, e] } else { vec![e, n1] };
        let three: Vec<&Example> = std::iter::once(n2).chain(two.iter().copied()).collect();
        let used: HashSet<&str> = [n1.id(), n2.id(), e.id()].into_iter().collect();
        let targets: Vec<&Example> = pool.iter().filter(|x| !used.contains(x.id())).collect();
        let results: Vec<Result<(EntityBucket, f64, f64), EvalError>> = engine.install(|| {
            targets
                .par_iter()
                .map(|x| {
                    let p2 = render_prompt(&study, &two, x).map_err(EngineError::from)?;
                    let p3 = render_prompt(&study, &three, x).map_err(EngineError::from)?;
                    Ok((
                        EntityBucket::of(x),
                        null_mass(engine, p2.text)?,
                        null_mass(engine, p3.text)?,
                    ))
                })
                .collect()
        });
        for r in results {
            let (bucket, p2, p3) = r?;
            let slot = &mut sums[bucket as usize];
            slot.0 += p2;
            slot.1 += p3;
            slot.2 += 1;
        }
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for bucket in [EntityBucket::OneOrMore, EntityBucket::Zero] {
        let (s2, s3, n) = sums[bucket as usize];
        if n == 0 {
            let msg = format!("no examples in bucket '{}'; row omitted", bucket.label());
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let mut row = NullProbRow::from_probs(bucket, s2 / n as f64, s3 / n as f64);
        row.samples = n;
        rows.push(row);
    }
    Ok(NullStudyReport {
        config_id: template.config.id.clone(),
        draws,
        seed,
        rows,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifiedRow {
    pub model: String,
    pub original: MetricsReport,
    pub modified: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifiedReport {
    pub dataset: String,
    pub original_eval_size: usize,
    pub modified_eval_size: usize,
    pub rows: Vec<ModifiedRow>,
}

impl ModifiedReport {
    pub fn add_baseline(&mut self, model: impl Into<String>, original: MetricsReport, modified: MetricsReport) {
        self.rows.insert(
            0,
            ModifiedRow {
                model: model.into(),
                original,
                modified,
            },
        );
    }

    /// Two stacked tables, original then modified, one row per model.
    pub fn to_tables(&self) -> Vec<TextTable> {
        let section = |title: String, pick: fn(&ModifiedRow) -> &MetricsReport| {
            let mut t = TextTable::new(&["", "Precision", "F1", "Recall"]).titled(title);
            for row in &self.rows {
                let mut cells = vec![row.model.clone()];
                cells.extend(pick(row).pfr_cells());
                t.push(cells);
            }
            t
        };
        vec![
            section(format!("Original {}", self.dataset), |r| &r.original),
            section(format!("Modified {}", self.dataset), |r| &r.modified),
        ]
    }
}

/// Scores the same engine and config on the data as given and with every
/// entity-free sentence removed from both the shot source and the evaluation set.
pub fn modified_dataset_experiment(
    engine: &Engine,
    template: &Template,
    shot_source: &[Example],
    eval: &[Example],
    dataset: &str,
) -> Result<ModifiedReport, EvalError> {
    if template.config.task != Task::Ner {
        return Err(EvalError::Setup("the modified-dataset experiment is NER only".into()));
    }
    let (_, original) = evaluate(engine, template, shot_source, eval)?;
    let stripped_source = strip_null_examples(shot_source);
    let stripped_eval = strip_null_examples(eval);
    let (_, modified) = evaluate(engine, template, &stripped_source, &stripped_eval)?;
    Ok(ModifiedReport {
        dataset: dataset.to_string(),
        original_eval_size: eval.len(),
        modified_eval_size: stripped_eval.len(),
        rows: vec![ModifiedRow {
            model: format!("In-Context ({})", engine.options().model_id),
            original,
            modified,
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn printed_arithmetic() {
        let row = NullProbRow::from_probs(EntityBucket::OneOrMore, 15.8, 40.9);
        assert_eq!(row.cells(1.0)[3..], ["25.1".to_string(), "159%".to_string()]);
        let row = NullProbRow::from_probs(EntityBucket::Zero, 0.194, 0.491);
        assert_eq!(
            row.cells(100.0),
            ["Zero(null)", "19.4", "49.1", "29.7", "153%"]
        );
        let row = NullProbRow::from_probs(EntityBucket::Zero, 0.25, 0.5);
        assert_eq!(row.absolute_delta, 0.25);
        assert_eq!(row.percent_increase, 100.0);
    }

    #[test]
    fn newline_mass() {
        let r = CompletionResponse {
            text: "\n".into(),
            tokens: vec!["\n".into()],
            token_logprobs: vec![0.5f64.ln()],
            top_logprobs: vec![BTreeMap::from([
                ("\n".to_string(), 0.5f64.ln()),
                ("\n\n".to_string(), 0.25f64.ln()),
                (" fever".to_string(), 0.25f64.ln()),
            ])],
        };
        assert!((null_token_mass(&r).unwrap() - 0.75).abs() < 1e-12);
        assert!(null_token_mass(&CompletionResponse::default()).is_err());
    }
}
