//! Prompt selection by leave-one-out cross-validation on the training pool.
//!
//! Only the sampled training pool is ever passed in here, so selection cannot
//! see development or test records.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, TrainPool};
use crate::pipeline::{Engine, EngineError, Prediction};
use crate::prompt::{PromptGrid, Template};
use crate::text::normalize_key;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("leave-one-out needs a pool of at least 2 examples, got {0}")]
    PoolTooSmall(usize),
    #[error("prompt grid is empty")]
    EmptyGrid,
    #[error("prediction for {id} failed under config {config_id}: {source}")]
    Aborted {
        config_id: String,
        id: String,
        #[source]
        source: Box<EngineError>,
        partial: Box<LoocvScore>,
    },
    #[error("prediction {0} does not match its gold example")]
    Mismatch(String),
}

/// F1 between two entity-surface sets compared in normalized form. Two empty
/// sets agree perfectly.
pub fn set_f1(predicted: &[String], gold: &[String]) -> f64 {
    let p: HashSet<String> = predicted.iter().map(|s| normalize_key(s)).collect();
    let g: HashSet<String> = gold.iter().map(|s| normalize_key(s)).collect();
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let tp = p.intersection(&g).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / p.len() as f64;
    let recall = tp / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Example-level F1 for NER, 1/0 correctness for RE.
pub fn example_score(prediction: &Prediction, gold: &Example) -> Result<f64, ProtocolError> {
    if prediction.id != gold.id() {
        return Err(ProtocolError::Mismatch(prediction.id.clone()));
    }
    match (gold, prediction.entities(), prediction.label()) {
        (Example::Ner(g), Some(entities), _) => Ok(set_f1(entities, &g.gold_entities)),
        (Example::Re(g), _, Some(label)) => Ok(if label == g.gold_label { 1.0 } else { 0.0 }),
        _ => Err(ProtocolError::Mismatch(prediction.id.clone())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvScore {
    pub config_id: String,
    pub shots: usize,
    pub mean: f64,
    pub per_example: Vec<ExampleScore>,
}

impl LoocvScore {
    fn from_scores(template: &Template, per_example: Vec<ExampleScore>) -> Self {
        let mean = if per_example.is_empty() {
            0.0
        } else {
            per_example.iter().map(|s| s.score).sum::<f64>() / per_example.len() as f64
        };
        Self {
            config_id: template.config.id.clone(),
            shots: template.config.shots,
            mean,
            per_example,
        }
    }
}

/// Optional cheaper scoring on a seeded subset of held-out examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub size: usize,
    pub seed: u64,
}

fn held_out(pool: &TrainPool, subsample: Option<Subsample>) -> Vec<&Example> {
    match subsample {
        Some(s) if s.size < pool.examples.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let mut idx = sample(&mut rng, pool.examples.len(), s.size).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &pool.examples[i]).collect()
        }
        _ => pool.examples.iter().collect(),
    }
}

/// Scores one config: every held-out pool example is predicted with the rest
/// of the pool as the shot source.
pub fn loocv_score(
    engine: &Engine,
    template: &Template,
    pool: &TrainPool,
    subsample: Option<Subsample>,
) -> Result<LoocvScore, ProtocolError> {
    if pool.len() < 2 {
        return Err(ProtocolError::PoolTooSmall(pool.len()));
    }
    let targets: Vec<Example> = held_out(pool, subsample).into_iter().cloned().collect();
    let results = engine.predict_all(template, &pool.examples, &targets);
    let mut scores = Vec::with_capacity(targets.len());
    for (gold, result) in targets.iter().zip(results) {
        match result {
            Ok(pred) => scores.push(ExampleScore {
                id: gold.id().to_string(),
                score: example_score(&pred, gold)?,
            }),
            Err(source) => {
                return Err(ProtocolError::Aborted {
                    config_id: template.config.id.clone(),
                    id: gold.id().to_string(),
                    source: Box::new(source),
                    partial: Box::new(LoocvScore::from_scores(template, scores)),
                })
            }
        }
    }
    Ok(LoocvScore::from_scores(template, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub seed: u64,
    pub pool_digest: String,
    pub pool_size: usize,
    pub model_id: String,
    pub retrieval: String,
    pub configs: Vec<LoocvScore>,
    pub chosen_config: String,
    pub cache_digest: Option<String>,
}

/// Index of the winner: highest mean, then fewer shots, then grid order.
pub fn choose(scores: &[LoocvScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &scores[b];
                if s.mean > cur.mean || (s.mean == cur.mean && s.shots < cur.shots) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

pub fn select_config(
    engine: &Engine,
    grid: &PromptGrid,
    pool: &TrainPool,
    subsample: Option<Subsample>,
) -> Result<SelectionReport, ProtocolError> {
    if grid.configs.is_empty() {
        return Err(ProtocolError::EmptyGrid);
    }
    let mut configs = Vec::with_capacity(grid.configs.len());
    for template in grid.templates() {
        let score = loocv_score(engine, &template, pool, subsample)?;
        log::info!(
            "config {} ({} shots): mean {:.4}",
            score.config_id,
            score.shots,
            score.mean
        );
        configs.push(score);
    }
    let chosen = choose(&configs).expect("grid is non-empty");
    Ok(SelectionReport {
        seed: pool.seed,
        pool_digest: pool.digest(),
        pool_size: pool.len(),
        model_id: engine.options().model_id.clone(),
        retrieval: engine.retrieval().mode_name().to_string(),
        chosen_config: configs[chosen].config_id.clone(),
        configs,
        cache_digest: engine.backend().cache_digest(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(id: &str, shots: usize, mean: f64) -> LoocvScore {
        LoocvScore {
            config_id: id.into(),
            shots,
            mean,
            per_example: vec![],
        }
    }

    #[test]
    fn set_f1_cases() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(set_f1(&s(&[]), &s(&[])), 1.0);
        assert_eq!(set_f1(&s(&[]), &s(&["a"])), 0.0);
        assert_eq!(set_f1(&s(&["A"]), &s(&["a"])), 1.0);
        // P = 1/2, R = 1/1 -> 2/3
        assert!((set_f1(&s(&["a", "b"]), &s(&["a"])) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tie_break_rules() {
        assert_eq!(choose(&[score("c1", 10, 0.5)]), Some(0));
        assert_eq!(choose(&[score("c1", 10, 0.5), score("c2", 5, 0.5)]), Some(1));
        assert_eq!(choose(&[score("c1", 5, 0.5), score("c2", 5, 0.5)]), Some(0));
        assert_eq!(choose(&[score("c1", 5, 0.4), score("c2", 10, 0.6)]), Some(1));
        assert_eq!(choose(&[]), None);
    }
}
