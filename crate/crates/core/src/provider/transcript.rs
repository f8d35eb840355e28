//! Transcript logging and offline replay.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{request_digest, BackendKind, ChatBackend, ChatCall, CompletionRequest, ProviderError};
use crate::canonical::{append_jsonl, read_jsonl};
use crate::error::IoError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    #[serde(default)]
    pub request_digest: String,
    pub template_id: String,
    pub variables: BTreeMap<String, Value>,
    pub raw_response: String,
    #[serde(default)]
    pub timestamp_ms: u64,
    #[serde(default)]
    pub attempt: u32,
}

impl TranscriptEntry {
    pub fn new(request: &CompletionRequest, attempt: u32, raw: &str) -> Self {
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        TranscriptEntry {
            request_digest: request.digest(),
            template_id: request.template_id.clone(),
            variables: request.variables.clone(),
            raw_response: raw.to_string(),
            timestamp_ms,
            attempt,
        }
    }
}

/// Append-only log, optionally mirrored to a JSON Lines file.
#[derive(Debug, Default)]
pub struct TranscriptLog {
    entries: Vec<TranscriptEntry>,
    path: Option<PathBuf>,
}

impl TranscriptLog {
    pub fn in_memory() -> Self {
        TranscriptLog::default()
    }

    pub fn to_file(path: impl Into<PathBuf>) -> Self {
        TranscriptLog {
            entries: Vec::new(),
            path: Some(path.into()),
        }
    }

    pub fn append(&mut self, entry: TranscriptEntry) -> Result<(), IoError> {
        if let Some(p) = &self.path {
            append_jsonl(p, &entry)?;
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }
}

/// Serves recorded responses keyed by (template, variables, attempt).
#[derive(Debug, Clone, Default)]
pub struct TranscriptBackend {
    responses: BTreeMap<(String, String, u32), String>,
}

impl TranscriptBackend {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        let mut responses = BTreeMap::new();
        for e in entries {
            // Recompute rather than trust the stored digest, so hand-written
            // fixtures need not carry one.
            let d = request_digest(&e.template_id, &e.variables);
            responses.insert((e.template_id, d, e.attempt), e.raw_response);
        }
        TranscriptBackend { responses }
    }

    pub fn from_file(path: &Path) -> Result<Self, IoError> {
        Ok(TranscriptBackend::new(read_jsonl::<TranscriptEntry>(path)?))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl ChatBackend for TranscriptBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Transcript
    }

    fn chat(&self, call: &ChatCall<'_>) -> Result<String, ProviderError> {
        let d = request_digest(call.template_id, call.variables);
        self.responses
            .get(&(call.template_id.to_string(), d.clone(), call.attempt))
            .cloned()
            .ok_or_else(|| ProviderError::TranscriptMiss {
                template_id: call.template_id.to_string(),
                digest: d,
                attempt: call.attempt,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::schema::ids;
    use crate::provider::{LlmClient, MockConfig};
    use std::sync::Arc;

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let live = LlmClient::mock(MockConfig::default()).with_transcript(TranscriptLog::to_file(&path));
        let req = CompletionRequest::new("discovery.subskills", ids::SUBSKILL_LIST)
            .var("domain", "math")
            .var("skill", "Algebra")
            .var("existing", serde_json::json!([]))
            .var("k", 2);
        let a = live.complete(&req).unwrap();

        let replay = LlmClient::new(Arc::new(TranscriptBackend::from_file(&path).unwrap()));
        let b = replay.complete(&req).unwrap();
        assert_eq!(a.raw, b.raw);

        let other = req.clone().var("k", 3);
        assert!(matches!(
            replay.complete(&other),
            Err(ProviderError::TranscriptMiss { .. })
        ));
    }
}
