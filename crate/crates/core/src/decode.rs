//! From raw completions to entities and label probabilities.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{CompletionResponse, Tokenizer, MAX_LOGIT_BIAS_ENTRIES};
use crate::corpus::LabelSet;
use crate::prompt::{PromptError, Verbalizer};
use crate::text::{char_slice, fold_case, normalize_key, normalize_ws};

pub const LOGIT_BIAS_VALUE: f64 = 10.0;
pub const PROB_FLOOR: f64 = 1e-6;
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("verbalizer phrases for '{first}' and '{second}' share the first token '{token}'")]
    AmbiguousVerbalizer {
        first: String,
        second: String,
        token: String,
    },
    #[error("verbalizer phrase for '{0}' has no tokens")]
    EmptyPhrase(String),
    #[error("response has no top log-probabilities at the first position")]
    NoLogprobs,
    #[error("label probabilities are not a distribution: {0}")]
    NotSimplex(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitBias {
    pub map: BTreeMap<u32, f64>,
    /// Distinct sentence tokens left out because of the entry cap.
    pub dropped: usize,
}

/// +10 on every distinct token of the sentence, the separator and the newline.
///
/// The sentence is encoded with a leading space since completions continue
/// after the recovery message. When the cap is exceeded the earliest sentence
/// tokens are kept; separator and newline ids are always present.
pub fn build_logit_bias(sentence: &str, separator: &str, tokenizer: &dyn Tokenizer) -> LogitBias {
    let mut reserved: Vec<u32> = Vec::new();
    let trimmed = separator.trim();
    let mut sep_ids = tokenizer.encode(separator);
    if !trimmed.is_empty() && trimmed != separator {
        sep_ids.extend(tokenizer.encode(trimmed));
    }
    sep_ids.push(tokenizer.newline_id());
    for id in sep_ids {
        if !reserved.contains(&id) {
            reserved.push(id);
        }
    }

    let mut seen: HashSet<u32> = reserved.iter().copied().collect();
    let mut sentence_ids = Vec::new();
    if !sentence.is_empty() {
        for id in tokenizer.encode(&format!(" {sentence}")) {
            if seen.insert(id) {
                sentence_ids.push(id);
            }
        }
    }
    let budget = MAX_LOGIT_BIAS_ENTRIES.saturating_sub(reserved.len());
    let dropped = sentence_ids.len().saturating_sub(budget);
    if dropped > 0 {
        log::warn!(
            "sentence has {} distinct tokens; logit bias keeps the first {budget}",
            sentence_ids.len()
        );
        sentence_ids.truncate(budget);
    }
    let map = reserved
        .into_iter()
        .chain(sentence_ids)
        .map(|id| (id, LOGIT_BIAS_VALUE))
        .collect();
    LogitBias { map, dropped }
}

/// Splits a completion into candidate surfaces. Only the first line counts.
pub fn parse_entity_list(completion: &str, separator: &str) -> Vec<String> {
    let line = completion.split('\n').next().unwrap_or("");
    let sep = match separator.trim() {
        "" => separator,
        t => t,
    };
    let items: Vec<&str> = if sep.is_empty() {
        vec![line]
    } else {
        line.split(sep).collect()
    };
    items
        .into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Keeps candidates that occur in the sentence, compared after whitespace
/// collapsing and case folding. Each kept entity is reported with the
/// sentence's own casing of its first match.
pub fn filter_spans(candidates: &[String], sentence: &str) -> Vec<String> {
    let norm_sentence = normalize_ws(sentence);
    let folded_sentence = fold_case(&norm_sentence);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for candidate in candidates {
        let key = normalize_key(candidate);
        if key.is_empty() || seen.contains(&key) {
            continue;
        }
        let Some(byte_idx) = folded_sentence.find(&key) else {
            continue;
        };
        let start = folded_sentence[..byte_idx].chars().count();
        let end = start + key.chars().count();
        let span = char_slice(&norm_sentence, start, end).expect("folding preserves char count");
        seen.insert(key);
        out.push(span.to_string());
    }
    out
}

/// Probability of every label, indexed like the [`LabelSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelProbs {
    probs: Vec<f64>,
}

impl LabelProbs {
    pub fn new(probs: Vec<f64>) -> Result<Self, DecodeError> {
        if probs.is_empty() {
            return Err(DecodeError::NotSimplex("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DecodeError::NotSimplex(format!("{probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(DecodeError::NotSimplex(format!("sum is {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights. All-zero input yields the uniform vector.
    pub fn from_unnormalized(weights: &[f64]) -> Result<Self, DecodeError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.is_empty() {
            return Err(DecodeError::NotSimplex(format!("{weights:?}")));
        }
        let sum: f64 = weights.iter().sum();
        if sum == 0.0 {
            return Ok(Self::uniform(weights.len()));
        }
        Ok(Self {
            probs: weights.iter().map(|w| w / sum).collect(),
        })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, label: usize) -> f64 {
        self.probs[label]
    }
}

/// First token of every label's phrase, checked for collisions.
pub fn label_first_tokens(
    verbalizer: &Verbalizer,
    labels: &LabelSet,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<String>, DecodeError> {
    let mut firsts: Vec<String> = Vec::with_capacity(labels.len());
    for name in labels.names() {
        let phrase = verbalizer.phrase(name)?;
        let first = tokenizer
            .token_strings(&format!(" {phrase}"))
            .into_iter()
            .map(|t| t.trim().to_string())
            .find(|t| !t.is_empty())
            .ok_or_else(|| DecodeError::EmptyPhrase(name.clone()))?;
        if let Some(i) = firsts.iter().position(|f| *f == first) {
            return Err(DecodeError::AmbiguousVerbalizer {
                first: labels.name(i).to_string(),
                second: name.clone(),
                token: first,
            });
        }
        firsts.push(first);
    }
    Ok(firsts)
}

/// Reads label probabilities from the first generated position.
///
/// Alternatives whose trimmed text equals a label's first token are summed,
/// labels absent from the alternatives get [`PROB_FLOOR`], and the result is
/// renormalized.
pub fn extract_label_probs(
    response: &CompletionResponse,
    verbalizer: &Verbalizer,
    labels: &LabelSet,
    tokenizer: &dyn Tokenizer,
) -> Result<LabelProbs, DecodeError> {
    let firsts = label_first_tokens(verbalizer, labels, tokenizer)?;
    let top = response
        .first_top_logprobs()
        .filter(|m| !m.is_empty())
        .ok_or(DecodeError::NoLogprobs)?;
    let weights: Vec<f64> = firsts
        .iter()
        .map(|first| {
            let p: f64 = top
                .iter()
                .filter(|(tok, _)| tok.trim() == first)
                .map(|(_, lp)| lp.exp())
                .sum();
            p.max(PROB_FLOOR)
        })
        .collect();
    LabelProbs::from_unnormalized(&weights)
}

/// Argmax over a score vector; exact ties go to `null_id`, then the lowest id.
pub fn argmax_label(scores: &[f64], null_id: usize) -> usize {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.get(null_id) == Some(&best) {
        return null_id;
    }
    scores.iter().position(|&s| s == best).unwrap_or(null_id)
}

pub fn decide_label(probs: &LabelProbs, null_id: usize) -> usize {
    argmax_label(probs.as_slice(), null_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockTokenizer;
    use proptest::prelude::*;

    fn labels(names: &[&str], null: &str) -> LabelSet {
        LabelSet::new(names.iter().map(|s| s.to_string()).collect(), null).unwrap()
    }

    fn verbalizer(pairs: &[(&str, &str)], null: (&str, &str)) -> Verbalizer {
        Verbalizer {
            null_label: null.0.into(),
            null_phrase: null.1.into(),
            phrases: pairs.iter().map(|(l, p)| (l.to_string(), p.to_string())).collect(),
        }
    }

    fn response_with_top(top: &[(&str, f64)]) -> CompletionResponse {
        let first = top[0].0.to_string();
        CompletionResponse {
            text: first.clone(),
            tokens: vec![first],
            token_logprobs: vec![top[0].1],
            top_logprobs: vec![top.iter().map(|(t, l)| (t.to_string(), *l)).collect()],
        }
    }

    #[test]
    fn bias_map_definition() {
        let tok = MockTokenizer::new();
        let bias = build_logit_bias("a b", ";", &tok);
        let expected: BTreeMap<u32, f64> = ["a", "b", ";", "\n"]
            .iter()
            .map(|t| (MockTokenizer::id_of(t), 10.0))
            .collect();
        assert_eq!(bias.map, expected);
        assert_eq!(bias.dropped, 0);
    }

    #[test]
    fn bias_map_empty_sentence() {
        let tok = MockTokenizer::new();
        let bias = build_logit_bias("", "; ", &tok);
        let expected: BTreeMap<u32, f64> = [";", "\n"]
            .iter()
            .map(|t| (MockTokenizer::id_of(t), 10.0))
            .collect();
        assert_eq!(bias.map, expected);
    }

    #[test]
    fn bias_map_overflow() {
        let tok = MockTokenizer::new();
        let words: Vec<String> = (0..350).map(|i| format!("w{i}")).collect();
        let sentence = words.join(" ");
        // Independent tally: ids of the first 298 words in order.
        let mut expected: HashSet<u32> = words[..298].iter().map(|w| MockTokenizer::id_of(w)).collect();
        expected.insert(MockTokenizer::id_of(";"));
        expected.insert(MockTokenizer::id_of("\n"));
        let bias = build_logit_bias(&sentence, "; ", &tok);
        assert_eq!(bias.map.len(), 300);
        assert_eq!(bias.dropped, 52);
        assert_eq!(bias.map.keys().copied().collect::<HashSet<_>>(), expected);
    }

    #[test]
    fn bias_map_bpe_leading_space_variant() {
        let tok = crate::backend::BpeTokenizer::r50k();
        let bias = build_logit_bias("Naloxone reverses", "; ", &tok);
        for id in tok.encode(" Naloxone reverses") {
            assert!(bias.map.contains_key(&id));
        }
        assert!(bias.map.contains_key(&198));
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_entity_list("naloxone; hypertension", "; "),
            ["naloxone", "hypertension"]
        );
        assert!(parse_entity_list("", "; ").is_empty());
        assert_eq!(parse_entity_list("a; ; b;\nignored", "; "), ["a", "b"]);
        assert_eq!(parse_entity_list(" x, y ", ", "), ["x", "y"]);
    }

    #[test]
    fn filter_examples() {
        let s = "Patients developed heart failure after treatment.";
        assert_eq!(
            filter_spans(&["aspirin".into(), "heart failure".into()], s),
            ["heart failure"]
        );
        assert_eq!(filter_spans(&["Heart  Failure".into()], s), ["heart failure"]);
        assert_eq!(
            filter_spans(&["heart failure".into(), "HEART FAILURE".into()], s),
            ["heart failure"]
        );
        assert_eq!(
            filter_spans(&["Naloxone".into()], "naloxone reversed NALOXONE-induced effects"),
            ["naloxone"]
        );
    }

    #[test]
    fn label_probs_two_labels() {
        let tok = MockTokenizer::new();
        let ls = labels(&["effect", "false"], "false");
        let v = verbalizer(&[("effect", "effect")], ("false", "none"));
        let r = response_with_top(&[(" effect", 0.8f64.ln()), (" none", 0.2f64.ln())]);
        let p = extract_label_probs(&r, &v, &ls, &tok).unwrap();
        // Hand computation: exp(ln 0.8)=0.8, exp(ln 0.2)=0.2, sum 1.
        assert!((p.get(0) - 0.8).abs() < 1e-12);
        assert!((p.get(1) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn label_probs_floor_and_degenerate() {
        let tok = MockTokenizer::new();
        let ls = labels(&["effect", "false"], "false");
        let v = verbalizer(&[("effect", "effect")], ("false", "none"));
        let r = response_with_top(&[("effect", 0.5f64.ln()), ("other", 0.5f64.ln())]);
        let p = extract_label_probs(&r, &v, &ls, &tok).unwrap();
        let z = 0.5 + 1e-6;
        assert!((p.get(1) - 1e-6 / z).abs() < 1e-15);

        let single = labels(&["false"], "false");
        let p = extract_label_probs(&r, &v, &single, &tok).unwrap();
        assert_eq!(p.as_slice(), &[1.0]);
    }

    #[test]
    fn ambiguous_and_missing_logprobs() {
        let tok = MockTokenizer::new();
        let ls = labels(&["a", "b", "false"], "false");
        let v = verbalizer(&[("a", "drug effect"), ("b", "drug interaction")], ("false", "none"));
        let r = response_with_top(&[("drug", 0.0)]);
        assert!(matches!(
            extract_label_probs(&r, &v, &ls, &tok),
            Err(DecodeError::AmbiguousVerbalizer { .. })
        ));
        let v = verbalizer(&[("a", "effect"), ("b", "interaction")], ("false", "none"));
        assert_eq!(
            extract_label_probs(&CompletionResponse::default(), &v, &ls, &tok),
            Err(DecodeError::NoLogprobs)
        );
    }

    #[test]
    fn decide_examples() {
        assert_eq!(decide_label(&LabelProbs::new(vec![0.7, 0.3]).unwrap(), 1), 0);
        assert_eq!(decide_label(&LabelProbs::new(vec![0.5, 0.5]).unwrap(), 1), 1);
        let third = 1.0 / 3.0;
        assert_eq!(argmax_label(&[0.0, third, third, third], 0), 1);
    }

    proptest! {
        #[test]
        fn filter_is_subset_and_idempotent(
            words in prop::collection::vec("[a-cA-C]{1,3}", 1..8),
            cands in prop::collection::vec("[a-cA-C ]{1,6}", 0..6),
        ) {
            let sentence = words.join(" ");
            let cands: Vec<String> = cands;
            let kept = filter_spans(&cands, &sentence);
            let cand_keys: HashSet<String> = cands.iter().map(|c| normalize_key(c)).collect();
            let folded = fold_case(&normalize_ws(&sentence));
            for k in &kept {
                prop_assert!(cand_keys.contains(&normalize_key(k)));
                prop_assert!(folded.contains(&normalize_key(k)));
            }
            prop_assert_eq!(filter_spans(&kept, &sentence), kept);
        }

        #[test]
        fn extracted_probs_are_simplex(
            lps in prop::collection::vec(-30.0f64..0.0, 3),
            present in prop::collection::vec(any::<bool>(), 3),
        ) {
            let tok = MockTokenizer::new();
            let ls = labels(&["x", "y", "z"], "z");
            let v = verbalizer(&[("x", "alpha"), ("y", "beta")], ("z", "gamma"));
            let names = ["alpha", "beta", "gamma"];
            let mut top: Vec<(&str, f64)> = vec![("junk", -0.1)];
            for i in 0..3 {
                if present[i] {
                    top.push((names[i], lps[i]));
                }
            }
            let p = extract_label_probs(&response_with_top(&top), &v, &ls, &tok).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.as_slice().iter().all(|&x| x > 0.0));
        }

        #[test]
        fn decision_scale_invariant(
            raw in prop::collection::vec(0u32..5, 2..6),
            exp in -20i32..20,
            c in 0.01f64..100.0,
            null in 0usize..6,
        ) {
            let null = null % raw.len();
            let scores: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
            // Powers of two scale exactly, so ties survive.
            let scaled: Vec<f64> = scores.iter().map(|s| s * 2f64.powi(exp)).collect();
            prop_assert_eq!(argmax_label(&scores, null), argmax_label(&scaled, null));
            let distinct: Vec<f64> = scores.iter().enumerate().map(|(i, s)| s + i as f64 * 0.1).collect();
            let scaled: Vec<f64> = distinct.iter().map(|s| s * c).collect();
            prop_assert_eq!(argmax_label(&distinct, null), argmax_label(&scaled, null));
        }
    }
}
