use std::collections::HashMap;
use std::sync::RwLock;

use tiktoken_rs::CoreBPE;

use super::BackendError;
use crate::text::fnv1a32;

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    /// Surface string of every token, aligned with [`Tokenizer::encode`].
    fn token_strings(&self, text: &str) -> Vec<String>;
    fn decode(&self, ids: &[u32]) -> String;
    fn newline_id(&self) -> u32;
}

/// Whitespace-and-punctuation splitter with FNV-1a token ids.
///
/// Runs of alphanumeric chars form one token, every other non-space char is
/// its own token, and `\n` is kept as a token so stop sequences have an id.
#[derive(Debug, Default)]
pub struct MockTokenizer {
    vocab: RwLock<HashMap<u32, String>>,
}

impl MockTokenizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn split(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for c in text.chars() {
            if c.is_alphanumeric() {
                word.push(c);
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if c == '\n' || !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }

    pub fn id_of(token: &str) -> u32 {
        fnv1a32(token.as_bytes())
    }
}

impl Tokenizer for MockTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        let tokens = Self::split(text);
        let ids: Vec<u32> = tokens.iter().map(|t| Self::id_of(t)).collect();
        let missing: Vec<(u32, &String)> = {
            let vocab = self.vocab.read().unwrap();
            ids.iter()
                .zip(&tokens)
                .filter(|(id, _)| !vocab.contains_key(id))
                .map(|(id, t)| (*id, t))
                .collect()
        };
        if !missing.is_empty() {
            let mut vocab = self.vocab.write().unwrap();
            for (id, t) in missing {
                vocab.entry(id).or_insert_with(|| t.clone());
            }
        }
        ids
    }

    fn token_strings(&self, text: &str) -> Vec<String> {
        Self::split(text)
    }

    /// Joins known tokens with single spaces; unseen ids render as `<id>`.
    fn decode(&self, ids: &[u32]) -> String {
        let vocab = self.vocab.read().unwrap();
        ids.iter()
            .map(|id| vocab.get(id).cloned().unwrap_or_else(|| format!("<{id}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn newline_id(&self) -> u32 {
        Self::id_of("\n")
    }
}

/// Byte-pair tokenizer of the hosted completion models.
pub struct BpeTokenizer {
    bpe: CoreBPE,
    newline: u32,
}

impl BpeTokenizer {
    pub fn from_bpe(bpe: CoreBPE) -> Self {
        let newline = bpe.encode_ordinary("\n")[0];
        Self { bpe, newline }
    }

    /// Encoding used by the GPT-3 base models (davinci, curie, ...).
    pub fn r50k() -> Self {
        Self::from_bpe(tiktoken_rs::r50k_base().expect("bundled r50k vocabulary"))
    }

    pub fn p50k() -> Self {
        Self::from_bpe(tiktoken_rs::p50k_base().expect("bundled p50k vocabulary"))
    }

    pub fn cl100k() -> Self {
        Self::from_bpe(tiktoken_rs::cl100k_base().expect("bundled cl100k vocabulary"))
    }

    pub fn for_model(model: &str) -> Result<Self, BackendError> {
        tiktoken_rs::get_bpe_from_model(model)
            .map(Self::from_bpe)
            .map_err(|e| BackendError::Config(format!("no tokenizer for model {model}: {e}")))
    }

    pub fn by_name(name: &str) -> Result<Self, BackendError> {
        match name {
            "r50k" | "r50k_base" => Ok(Self::r50k()),
            "p50k" | "p50k_base" => Ok(Self::p50k()),
            "cl100k" | "cl100k_base" => Ok(Self::cl100k()),
            other => Err(BackendError::Config(format!("unknown tokenizer {other}"))),
        }
    }
}

impl Tokenizer for BpeTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        self.bpe.encode_ordinary(text)
    }

    fn token_strings(&self, text: &str) -> Vec<String> {
        self.bpe
            ._decode_native_and_split(self.bpe.encode_ordinary(text))
            .map(|bytes| String::from_utf8_lossy(&bytes).into_owned())
            .collect()
    }

    /// Unknown ids or split multi-byte sequences decode to an empty string.
    fn decode(&self, ids: &[u32]) -> String {
        self.bpe.decode(ids.to_vec()).unwrap_or_default()
    }

    fn newline_id(&self) -> u32 {
        self.newline
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_split_definition() {
        let t = MockTokenizer::new();
        assert_eq!(t.token_strings("heart failure."), ["heart", "failure", "."]);
        assert_eq!(t.encode("heart failure.").len(), 3);
        assert!(t.encode("").is_empty());
        assert_eq!(t.encode("a b; c"), t.encode("a b; c"));
        assert_eq!(t.token_strings("a\nb"), ["a", "\n", "b"]);
        assert_eq!(t.newline_id(), MockTokenizer::id_of("\n"));
    }

    #[test]
    fn mock_round_trip_modulo_whitespace() {
        let t = MockTokenizer::new();
        let text = "Naloxone (2 mg) reversed  clonidine-induced hypotension.";
        let decoded = t.decode(&t.encode(text));
        let squash = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
        assert_eq!(squash(&decoded), squash(text));
    }

    #[test]
    fn bpe_newline_and_round_trip() {
        let t = BpeTokenizer::r50k();
        assert_eq!(t.newline_id(), 198);
        let text = "Naloxone reverses hypertension.";
        assert_eq!(t.decode(&t.encode(text)), text);
        assert_eq!(t.token_strings(text).concat(), text);
    }
}
