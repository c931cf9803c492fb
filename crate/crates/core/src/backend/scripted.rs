use std::sync::atomic::{AtomicUsize, Ordering};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResponse, MockTokenizer, Tokenizer};

type Script = dyn Fn(&CompletionRequest, &MockTokenizer) -> CompletionResponse + Send + Sync;

/// Test double whose responses come from a closure.
pub struct ScriptedBackend {
    script: Box<Script>,
    tokenizer: MockTokenizer,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new<F>(script: F) -> Self
    where
        F: Fn(&CompletionRequest, &MockTokenizer) -> CompletionResponse + Send + Sync + 'static,
    {
        Self {
            script: Box::new(script),
            tokenizer: MockTokenizer::new(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let response = (self.script)(request, &self.tokenizer);
        response.validate()?;
        Ok(response)
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn name(&self) -> &str {
        "scripted"
    }
}
