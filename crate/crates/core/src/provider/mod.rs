//! Chat-completion port with structured-output parsing.
//!
//! Every LLM-touching module talks to an [`LlmClient`], which renders a
//! template, calls a [`ChatBackend`], parses and validates the reply, and
//! re-asks with the validation error appended when parsing fails. Backends:
//! a deterministic mock, a transcript replayer, and a live HTTP endpoint.

pub mod live;
pub mod mock;
pub mod schema;
pub mod template;
pub mod transcript;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::digest;

pub use live::{LiveBackend, LiveConfig};
pub use mock::{MockBackend, MockConfig};
pub use schema::{Schema, SchemaRegistry};
pub use template::TemplateStore;
pub use transcript::{TranscriptBackend, TranscriptEntry, TranscriptLog};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("structured output for {schema_id:?} failed after {attempts} attempts: {last_error}")]
    StructuredParseFailure {
        schema_id: String,
        attempts: u32,
        last_error: String,
        last_raw: String,
    },
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("unknown schema {0:?}")]
    UnknownSchema(String),
    #[error("template {template:?} references missing variable {name:?}")]
    MissingVariable { template: String, name: String },
    #[error("template: {0}")]
    Template(String),
    #[error("no transcript entry for template {template_id:?} (digest {digest}, attempt {attempt})")]
    TranscriptMiss {
        template_id: String,
        digest: String,
        attempt: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Mock,
    Transcript,
    Live,
    Scripted,
}

impl BackendKind {
    pub fn is_deterministic(self) -> bool {
        !matches!(self, BackendKind::Live)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub template_id: String,
    pub variables: BTreeMap<String, Value>,
    pub schema_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_retries: u32,
}

impl CompletionRequest {
    pub fn new(template_id: impl Into<String>, schema_id: impl Into<String>) -> Self {
        CompletionRequest {
            template_id: template_id.into(),
            variables: BTreeMap::new(),
            schema_id: schema_id.into(),
            temperature: 0.0,
            top_p: 1.0,
            max_retries: 2,
        }
    }

    pub fn var(mut self, name: &str, value: impl Into<Value>) -> Self {
        self.variables.insert(name.to_string(), value.into());
        self
    }

    pub fn retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    /// Digest of what determines the reply: template and variables.
    pub fn digest(&self) -> String {
        request_digest(&self.template_id, &self.variables)
    }
}

pub fn request_digest(template_id: &str, variables: &BTreeMap<String, Value>) -> String {
    digest(&(template_id, variables))
}

/// One call as seen by a backend.
#[derive(Debug, Clone)]
pub struct ChatCall<'a> {
    pub template_id: &'a str,
    pub schema_id: &'a str,
    pub variables: &'a BTreeMap<String, Value>,
    pub prompt: &'a str,
    pub temperature: f64,
    pub top_p: f64,
    /// 0 for the first ask, then 1.. for re-asks.
    pub attempt: u32,
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn chat(&self, call: &ChatCall<'_>) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredResponse {
    pub payload: Value,
    pub raw: String,
    pub attempts: u32,
}

/// Template rendering + backend + schema validation + retries.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    templates: Arc<TemplateStore>,
    schemas: Arc<SchemaRegistry>,
    transcript: Option<Arc<Mutex<TranscriptLog>>>,
    max_in_flight: usize,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("backend", &self.backend.kind())
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        LlmClient {
            backend,
            templates: Arc::new(TemplateStore::default()),
            schemas: Arc::new(SchemaRegistry::default()),
            transcript: None,
            max_in_flight: 8,
        }
    }

    pub fn mock(config: MockConfig) -> Self {
        LlmClient::new(Arc::new(MockBackend::new(config)))
    }

    pub fn with_templates(mut self, templates: TemplateStore) -> Self {
        self.templates = Arc::new(templates);
        self
    }

    pub fn with_schemas(mut self, schemas: SchemaRegistry) -> Self {
        self.schemas = Arc::new(schemas);
        self
    }

    pub fn with_transcript(mut self, log: TranscriptLog) -> Self {
        self.transcript = Some(Arc::new(Mutex::new(log)));
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn templates(&self) -> &TemplateStore {
        &self.templates
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn transcript_entries(&self) -> Vec<TranscriptEntry> {
        self.transcript
            .as_ref()
            .map(|t| t.lock().expect("transcript lock").entries().to_vec())
            .unwrap_or_default()
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<StructuredResponse, ProviderError> {
        self.complete_with(request, |_| Ok(()))
    }

    /// Like [`complete`](Self::complete), with an extra semantic check that
    /// runs after schema validation and triggers a re-ask on failure.
    pub fn complete_with<F>(
        &self,
        request: &CompletionRequest,
        check: F,
    ) -> Result<StructuredResponse, ProviderError>
    where
        F: Fn(&Value) -> Result<(), String>,
    {
        let schema = self
            .schemas
            .get(&request.schema_id)
            .ok_or_else(|| ProviderError::UnknownSchema(request.schema_id.clone()))?;
        let mut vars = request.variables.clone();
        vars.entry("schema".to_string())
            .or_insert_with(|| Value::String(schema.to_json_schema().to_string()));
        let base_prompt = self.templates.render(&request.template_id, &vars)?;

        let mut prompt = base_prompt.clone();
        let mut last_error = String::new();
        let mut last_raw = String::new();
        for attempt in 0..=request.max_retries {
            let call = ChatCall {
                template_id: &request.template_id,
                schema_id: &request.schema_id,
                variables: &request.variables,
                prompt: &prompt,
                temperature: request.temperature,
                top_p: request.top_p,
                attempt,
            };
            let raw = self.backend.chat(&call)?;
            if let Some(log) = &self.transcript {
                log.lock()
                    .expect("transcript lock")
                    .append(TranscriptEntry::new(request, attempt, &raw))
                    .map_err(|e| ProviderError::ProviderUnavailable(format!("transcript: {e}")))?;
            }
            let parsed = extract_json(&raw)
                .and_then(|v| schema.validate(&v).map(|_| v))
                .and_then(|v| check(&v).map(|_| v));
            match parsed {
                Ok(payload) => {
                    return Ok(StructuredResponse {
                        payload,
                        raw,
                        attempts: attempt + 1,
                    })
                }
                Err(e) => {
                    last_error = e;
                    last_raw = raw;
                    prompt = format!(
                        "{base_prompt}\n\nYour previous reply was rejected: {last_error}\nReply again with JSON only."
                    );
                }
            }
        }
        Err(ProviderError::StructuredParseFailure {
            schema_id: request.schema_id.clone(),
            attempts: request.max_retries + 1,
            last_error,
            last_raw,
        })
    }

    /// Complete many requests with at most `max_in_flight` concurrent calls.
    /// Results come back in input order.
    pub fn complete_many<F>(
        &self,
        requests: &[CompletionRequest],
        check: F,
    ) -> Vec<Result<StructuredResponse, ProviderError>>
    where
        F: Fn(&Value) -> Result<(), String> + Sync,
    {
        if self.max_in_flight <= 1 || requests.len() <= 1 {
            return requests.iter().map(|r| self.complete_with(r, &check)).collect();
        }
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.max_in_flight) {
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|r| s.spawn(|| self.complete_with(r, &check)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("completion thread panicked"))
                    .collect()
            });
            out.extend(results);
        }
        out
    }
}

/// Parse the reply as JSON, tolerating code fences and prose around a single
/// top-level object.
pub fn extract_json(raw: &str) -> Result<Value, String> {
    let trimmed = raw.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Ok(v);
    }
    let (Some(start), Some(end)) = (trimmed.find('{'), trimmed.rfind('}')) else {
        return Err("reply contains no JSON object".into());
    };
    if end < start {
        return Err("reply contains no JSON object".into());
    }
    serde_json::from_str(&trimmed[start..=end]).map_err(|e| format!("invalid JSON: {e}"))
}
