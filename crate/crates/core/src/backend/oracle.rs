use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{
    BackendError, CompletionBackend, CompletionRequest, CompletionResponse, MockTokenizer,
    Tokenizer,
};
use crate::corpus::Example;
use crate::prompt::{last_block, linearize_ner, linearize_re, render_test_block, PromptError, Template};

/// Answers every prompt with the gold linearization of its test example.
///
/// The test example is recognised by the prompt's final block, so the oracle
/// must be built with every template it will be asked about. Unknown blocks
/// (including null prompts) get an immediate newline.
pub struct OracleBackend {
    answers: HashMap<String, Answer>,
    tokenizer: MockTokenizer,
    calls: AtomicUsize,
}

#[derive(Debug, Clone)]
struct Answer {
    text: String,
}

impl OracleBackend {
    pub fn new<'a>(
        templates: &[Template],
        examples: impl IntoIterator<Item = &'a Example>,
    ) -> Result<Self, PromptError> {
        let examples: Vec<&Example> = examples.into_iter().collect();
        let mut answers = HashMap::new();
        for template in templates {
            for ex in &examples {
                if ex.task() != template.config.task {
                    continue;
                }
                let text = match ex {
                    Example::Ner(e) => linearize_ner(e, &template.config.separator),
                    Example::Re(e) => linearize_re(e, template.verbalizer()?)?,
                };
                answers
                    .entry(render_test_block(&template.config, ex))
                    .or_insert(Answer { text });
            }
        }
        Ok(Self {
            answers,
            tokenizer: MockTokenizer::new(),
            calls: AtomicUsize::new(0),
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn respond(&self, text: &str, max_tokens: usize) -> CompletionResponse {
        let mut tokens = self.tokenizer.token_strings(text);
        if tokens.is_empty() {
            tokens.push("\n".to_string());
        }
        let text = if tokens.len() > max_tokens {
            tokens.truncate(max_tokens);
            tokens.join(" ")
        } else if text.is_empty() {
            String::new()
        } else {
            text.to_string()
        };
        CompletionResponse {
            text,
            token_logprobs: vec![0.0; tokens.len()],
            top_logprobs: tokens
                .iter()
                .map(|t| BTreeMap::from([(t.clone(), 0.0)]))
                .collect(),
            tokens,
        }
    }
}

impl CompletionBackend for OracleBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let block = last_block(&request.prompt_text);
        let text = self.answers.get(block).map_or("", |a| a.text.as_str());
        Ok(self.respond(text, request.max_tokens.max(1)))
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn name(&self) -> &str {
        "oracle"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{NerExample, Task};
    use crate::prompt::{render_prompt, PromptConfig};

    fn template() -> Template {
        Template::ner(PromptConfig {
            id: "c1".into(),
            task: Task::Ner,
            task_command: "Extract diseases.".into(),
            phrase_intro: "Sentence:".into(),
            recovery_message: "Diseases:".into(),
            separator: "; ".into(),
            verbalizer_id: None,
            shots: 2,
        })
    }

    #[test]
    fn answers_gold_linearization() {
        let ex = Example::Ner(
            NerExample::new("t1", "Patients reported nausea after dosing.", &["nausea"], "disease").unwrap(),
        );
        let null = Example::Ner(NerExample::new("t2", "No findings.", &[] as &[&str], "disease").unwrap());
        let t = template();
        let oracle = OracleBackend::new(std::slice::from_ref(&t), [&ex, &null]).unwrap();
        let p = render_prompt(&t, &[&null], &ex).unwrap();
        let resp = oracle.complete(&CompletionRequest::new("m", p.text)).unwrap();
        assert_eq!(resp.text, "nausea");
        assert!(resp.validate().is_ok());

        let p = render_prompt(&t, &[&ex], &null).unwrap();
        let resp = oracle.complete(&CompletionRequest::new("m", p.text)).unwrap();
        assert_eq!(resp.text, "");
        assert_eq!(resp.tokens, ["\n"]);
        assert_eq!(oracle.calls(), 2);
    }
}
