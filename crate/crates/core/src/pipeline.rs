//! The prediction engine: shot selection, prompting, completion and decoding.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CompletionBackend, CompletionRequest, DEFAULT_LOGPROBS};
use crate::calibrate::{fit_calibration, CalibrationError, CalibrationTransform};
use crate::corpus::{Example, LabelSet, Task};
use crate::decode::{
    build_logit_bias, decide_label, extract_label_probs, filter_spans, parse_entity_list,
    DecodeError, LabelProbs,
};
use crate::prompt::{null_prompt, render_prompt, PromptError, Template, STOP_SEQUENCE};
use crate::retrieval::{knn_select, random_select, Embedder, RetrievalError};
use crate::text::{derive_seed, sha256_hex};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("relation extraction needs a label set")]
    MissingLabels,
    #[error("could not start worker pool: {0}")]
    Threads(String),
}

/// How demonstrations are chosen for each test input.
#[derive(Clone)]
pub enum Retrieval {
    /// Most similar pool examples by embedding cosine.
    Knn(Arc<Embedder>),
    /// Uniform sample, seeded per test id.
    Random { seed: u64 },
}

impl Retrieval {
    pub fn mode_name(&self) -> &'static str {
        match self {
            Retrieval::Knn(_) => "knn",
            Retrieval::Random { .. } => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub model_id: String,
    /// Restrict NER generations to sentence tokens.
    pub logit_bias: bool,
    /// Null-prompt calibration of RE label probabilities.
    pub calibration: bool,
    pub ner_max_tokens: usize,
    pub re_max_tokens: usize,
    pub threads: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            model_id: "text-davinci-003".to_string(),
            logit_bias: true,
            calibration: true,
            ner_max_tokens: 128,
            re_max_tokens: 8,
            threads: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictedValue {
    Entities(Vec<String>),
    Label {
        label: String,
        probs: Vec<f64>,
        raw_probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub shot_ids: Vec<String>,
    pub value: PredictedValue,
}

impl Prediction {
    pub fn entities(&self) -> Option<&[String]> {
        match &self.value {
            PredictedValue::Entities(e) => Some(e),
            PredictedValue::Label { .. } => None,
        }
    }

    pub fn label(&self) -> Option<&str> {
        match &self.value {
            PredictedValue::Label { label, .. } => Some(label),
            PredictedValue::Entities(_) => None,
        }
    }
}

#[derive(Clone)]
pub struct Engine {
    backend: Arc<dyn CompletionBackend>,
    retrieval: Retrieval,
    options: EngineOptions,
    labels: Option<LabelSet>,
    workers: Arc<rayon::ThreadPool>,
    calibrations: Arc<Mutex<HashMap<String, CalibrationTransform>>>,
}

impl Engine {
    pub fn new(
        backend: Arc<dyn CompletionBackend>,
        retrieval: Retrieval,
        options: EngineOptions,
    ) -> Result<Self, EngineError> {
        let workers = rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads.max(1))
            .build()
            .map_err(|e| EngineError::Threads(e.to_string()))?;
        Ok(Self {
            backend,
            retrieval,
            options,
            labels: None,
            workers: Arc::new(workers),
            calibrations: Arc::new(Mutex::new(HashMap::new())),
        })
    }

    pub fn with_labels(mut self, labels: Option<LabelSet>) -> Self {
        self.labels = labels;
        self
    }

    /// Same backend and workers with different switches.
    pub fn with_options(&self, options: EngineOptions) -> Self {
        Self {
            options,
            ..self.clone()
        }
    }

    pub fn with_retrieval(&self, retrieval: Retrieval) -> Self {
        Self {
            retrieval,
            ..self.clone()
        }
    }

    pub fn options(&self) -> &EngineOptions {
        &self.options
    }

    pub fn retrieval(&self) -> &Retrieval {
        &self.retrieval
    }

    pub fn backend(&self) -> &Arc<dyn CompletionBackend> {
        &self.backend
    }

    pub fn labels(&self) -> Option<&LabelSet> {
        self.labels.as_ref()
    }

    /// Up to `k` shots from `source`, never the test example itself. kNN
    /// shots are ordered least similar first so the closest sits next to the
    /// test block.
    pub fn select_shots<'a>(
        &self,
        k: usize,
        source: &'a [Example],
        test: &Example,
    ) -> Result<Vec<&'a Example>, EngineError> {
        let candidates: Vec<&Example> = source.iter().filter(|e| e.id() != test.id()).collect();
        if k == 0 || candidates.is_empty() {
            return Ok(Vec::new());
        }
        match &self.retrieval {
            Retrieval::Knn(embedder) => {
                let query = embedder.embed(test.id(), test.text())?;
                let vectors = candidates
                    .iter()
                    .map(|e| embedder.embed(e.id(), e.text()))
                    .collect::<Result<Vec<_>, _>>()?;
                let refs: Vec<_> = vectors.iter().collect();
                let by_id: HashMap<&str, &Example> =
                    candidates.iter().map(|e| (e.id(), *e)).collect();
                Ok(knn_select(&query, &refs, k)
                    .into_iter()
                    .map(|n| by_id[n.id.as_str()])
                    .collect())
            }
            Retrieval::Random { seed } => {
                let idx: Vec<usize> = (0..candidates.len()).collect();
                Ok(random_select(&idx, k, derive_seed(*seed, test.id()))
                    .into_iter()
                    .map(|i| candidates[i])
                    .collect())
            }
        }
    }

    pub fn predict(
        &self,
        template: &Template,
        source: &[Example],
        test: &Example,
    ) -> Result<Prediction, EngineError> {
        let shots = self.select_shots(template.config.shots, source, test)?;
        let prompt = render_prompt(template, &shots, test)?;
        let shot_ids = shots.iter().map(|s| s.id().to_string()).collect();
        let value = match test.task() {
            Task::Ner => self.predict_ner(template, &prompt.text, test)?,
            Task::Re => self.predict_re(template, &shots, &prompt.text)?,
        };
        Ok(Prediction {
            id: test.id().to_string(),
            shot_ids,
            value,
        })
    }

    fn request(&self, prompt_text: String, max_tokens: usize) -> CompletionRequest {
        let mut request = CompletionRequest::new(self.options.model_id.clone(), prompt_text);
        request.max_tokens = max_tokens;
        request.stop = vec![STOP_SEQUENCE.to_string()];
        request.want_logprobs = DEFAULT_LOGPROBS;
        request
    }

    fn predict_ner(
        &self,
        template: &Template,
        prompt_text: &str,
        test: &Example,
    ) -> Result<PredictedValue, EngineError> {
        let separator = &template.config.separator;
        let mut request = self.request(prompt_text.to_string(), self.options.ner_max_tokens);
        if self.options.logit_bias {
            request.logit_bias = build_logit_bias(test.text(), separator, self.backend.tokenizer()).map;
        }
        let response = self.backend.complete(&request)?;
        let candidates = parse_entity_list(&response.text, separator);
        Ok(PredictedValue::Entities(filter_spans(&candidates, test.text())))
    }

    fn label_probs(&self, template: &Template, prompt_text: String) -> Result<LabelProbs, EngineError> {
        let labels = self.labels.as_ref().ok_or(EngineError::MissingLabels)?;
        let request = self.request(prompt_text, self.options.re_max_tokens);
        let response = self.backend.complete(&request)?;
        Ok(extract_label_probs(
            &response,
            template.verbalizer()?,
            labels,
            self.backend.tokenizer(),
        )?)
    }

    /// Transform fitted on the null prompt built from these shots, memoized
    /// by model and prompt text.
    pub fn calibration_for(
        &self,
        template: &Template,
        shots: &[&Example],
    ) -> Result<CalibrationTransform, EngineError> {
        let null = null_prompt(template, shots)?;
        let key = sha256_hex(format!("{}\u{0}{}", self.options.model_id, null.text).as_bytes());
        if let Some(t) = self.calibrations.lock().unwrap().get(&key) {
            return Ok(t.clone());
        }
        let transform = fit_calibration(&self.label_probs(template, null.text)?)?;
        self.calibrations
            .lock()
            .unwrap()
            .insert(key, transform.clone());
        Ok(transform)
    }

    fn predict_re(
        &self,
        template: &Template,
        shots: &[&Example],
        prompt_text: &str,
    ) -> Result<PredictedValue, EngineError> {
        let labels = self.labels.as_ref().ok_or(EngineError::MissingLabels)?;
        let raw = self.label_probs(template, prompt_text.to_string())?;
        let probs = if self.options.calibration {
            self.calibration_for(template, shots)?.apply(&raw)?
        } else {
            raw.clone()
        };
        let label = labels.name(decide_label(&probs, labels.null_id())).to_string();
        Ok(PredictedValue::Label {
            label,
            probs: probs.as_slice().to_vec(),
            raw_probs: raw.as_slice().to_vec(),
        })
    }

    /// Runs `f` on the engine's worker pool, bounding parallel backend calls.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.workers.install(f)
    }

    /// Predicts every test example concurrently; results keep input order.
    pub fn predict_all(
        &self,
        template: &Template,
        source: &[Example],
        tests: &[Example],
    ) -> Vec<Result<Prediction, EngineError>> {
        self.workers.install(|| {
            tests
                .par_iter()
                .map(|t| self.predict(template, source, t))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CompletionResponse, OracleBackend, ScriptedBackend};
    use crate::corpus::{NerExample, ReExample};
    use crate::prompt::{PromptConfig, Verbalizer};
    use crate::retrieval::HashingEmbedder;
    use std::collections::BTreeMap;

    fn ner(id: &str, text: &str, ents: &[&str]) -> Example {
        Example::Ner(NerExample::new(id, text, ents, "disease").unwrap())
    }

    fn ner_template(shots: usize) -> Template {
        Template::ner(PromptConfig {
            id: "c1".into(),
            task: Task::Ner,
            task_command: "Extract diseases.".into(),
            phrase_intro: "Sentence:".into(),
            recovery_message: "Diseases:".into(),
            separator: "; ".into(),
            verbalizer_id: None,
            shots,
        })
    }

    fn pool() -> Vec<Example> {
        vec![
            ner("a", "Aspirin caused nausea in two patients.", &["nausea"]),
            ner("b", "Hepatitis was reported after the trial.", &["Hepatitis"]),
            ner("c", "No adverse events occurred.", &[]),
            ner("d", "Severe nausea and vomiting followed.", &["nausea", "vomiting"]),
        ]
    }

    #[test]
    fn oracle_predictions_match_gold() {
        let t = ner_template(2);
        let examples = pool();
        for retrieval in [
            Retrieval::Random { seed: 7 },
            Retrieval::Knn(Arc::new(Embedder::new(Box::new(HashingEmbedder::new(32))))),
        ] {
            let oracle = OracleBackend::new(std::slice::from_ref(&t), &examples).unwrap();
            let engine = Engine::new(Arc::new(oracle), retrieval, EngineOptions::default()).unwrap();
            for (ex, pred) in examples.iter().zip(engine.predict_all(&t, &examples, &examples)) {
                let pred = pred.unwrap();
                assert!(!pred.shot_ids.contains(&ex.id().to_string()));
                assert_eq!(pred.shot_ids.len(), 2);
                let mut got = pred.entities().unwrap().to_vec();
                let mut want = ex.as_ner().unwrap().gold_entities.clone();
                got.sort();
                want.sort();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn bias_sent_only_when_enabled() {
        let t = ner_template(1);
        let examples = pool();
        let backend = Arc::new(ScriptedBackend::new(|req, tok| {
            let text = if req.logit_bias.is_empty() { "unbiased" } else { "nausea" };
            CompletionResponse::certain(text, tok)
        }));
        let engine = Engine::new(backend, Retrieval::Random { seed: 1 }, EngineOptions::default()).unwrap();
        let p = engine.predict(&t, &examples, &examples[0]).unwrap();
        assert_eq!(p.entities().unwrap(), ["nausea"]);
        let off = engine.with_options(EngineOptions {
            logit_bias: false,
            ..EngineOptions::default()
        });
        assert!(off.predict(&t, &examples, &examples[0]).unwrap().entities().unwrap().is_empty());
    }

    #[test]
    fn re_calibration_flips_biased_prior() {
        let labels = LabelSet::new(vec!["effect".into(), "false".into()], "false").unwrap();
        let verbalizer = Verbalizer {
            null_label: "false".into(),
            null_phrase: "none".into(),
            phrases: BTreeMap::from([("effect".into(), "effect".into())]),
        };
        let t = Template::re(
            PromptConfig {
                id: "r1".into(),
                task: Task::Re,
                task_command: "Classify the drug interaction.".into(),
                phrase_intro: "Sentence:".into(),
                recovery_message: "Relation between {subject} and {object}:".into(),
                separator: "; ".into(),
                verbalizer_id: Some("v".into()),
                shots: 0,
            },
            verbalizer,
        );
        let test = Example::Re(
            ReExample::new(
                "r",
                "DrugA increases DrugB levels.",
                crate::corpus::Mention::locate("DrugA increases DrugB levels.", "DrugA").unwrap(),
                crate::corpus::Mention::locate("DrugA increases DrugB levels.", "DrugB").unwrap(),
                "effect",
            )
            .unwrap(),
        );
        // Null input: 0.8 none / 0.2 effect. Real input: 0.6 none / 0.4 effect.
        let backend = Arc::new(ScriptedBackend::new(|req, _| {
            let (none, effect) = if req.prompt_text.contains("N/A") { (0.8f64, 0.2f64) } else { (0.6, 0.4) };
            CompletionResponse {
                text: "none".into(),
                tokens: vec!["none".into()],
                token_logprobs: vec![none.ln()],
                top_logprobs: vec![BTreeMap::from([
                    (" none".to_string(), none.ln()),
                    (" effect".to_string(), effect.ln()),
                ])],
            }
        }));
        let engine = Engine::new(backend.clone(), Retrieval::Random { seed: 1 }, EngineOptions::default())
            .unwrap()
            .with_labels(Some(labels));
        let p = engine.predict(&t, &[], &test).unwrap();
        assert_eq!(p.label(), Some("effect"));
        let off = engine.with_options(EngineOptions {
            calibration: false,
            ..EngineOptions::default()
        });
        assert_eq!(off.predict(&t, &[], &test).unwrap().label(), Some("false"));
        // Memoized: the null prompt is sent once.
        engine.predict(&t, &[], &test).unwrap();
        assert_eq!(backend.calls(), 4);
    }
}
