//! Client for external trainer workers.
//!
//! Requests and responses are single JSON objects: newline-delimited over a
//! subprocess's standard streams or any line-oriented byte stream, or one
//! object per HTTP POST body. One request is in flight at a time.
//!
//! ```text
//! -> {"op":"train","checkpoint":ID|null,"datums":[..],"hyperparams":{..}}   <- {"ok":true,"checkpoint":ID}
//! -> {"op":"evaluate","checkpoint":ID,"items":[..]}   <- {"ok":true,"predictions":[{"item_id":..,"predicted_answer":..}]}
//! -> {"op":"shutdown"}                                <- {"ok":true}
//! errors: {"ok":false,"error":code,"message":text}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{Checkpoint, CheckpointState, Student, StudentError, TrainOptions};
use crate::model::{Provenance, TaskItem, TrainingDatum};

pub trait Transport: Send {
    /// Send one request body verbatim and read one response.
    fn send_raw(&mut self, body: &str) -> Result<Value, StudentError>;

    fn round_trip(&mut self, request: &Value) -> Result<Value, StudentError> {
        self.send_raw(&request.to_string())
    }
}

/// NDJSON over any reader/writer pair.
pub struct LineTransport<R, W> {
    reader: R,
    writer: W,
}

impl<R: BufRead + Send, W: Write + Send> LineTransport<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        LineTransport { reader, writer }
    }
}

impl<R: BufRead + Send, W: Write + Send> Transport for LineTransport<R, W> {
    fn send_raw(&mut self, body: &str) -> Result<Value, StudentError> {
        let unavailable = |e: std::io::Error| StudentError::TrainerUnavailable(e.to_string());
        self.writer.write_all(body.as_bytes()).map_err(unavailable)?;
        self.writer.write_all(b"\n").map_err(unavailable)?;
        self.writer.flush().map_err(unavailable)?;
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).map_err(unavailable)?;
        if n == 0 {
            return Err(StudentError::TrainerUnavailable(
                "worker closed its output".into(),
            ));
        }
        serde_json::from_str(&line)
            .map_err(|e| StudentError::Protocol(format!("response is not JSON: {e}: {line:?}")))
    }
}

/// A worker subprocess speaking NDJSON on stdin/stdout.
pub struct StdioTransport {
    child: Child,
    lines: LineTransport<BufReader<ChildStdout>, ChildStdin>,
}

impl StdioTransport {
    pub fn spawn(command: &[String]) -> Result<Self, StudentError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| StudentError::TrainerUnavailable("empty trainer command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| StudentError::TrainerUnavailable(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(StdioTransport {
            child,
            lines: LineTransport::new(BufReader::new(stdout), stdin),
        })
    }
}

impl Transport for StdioTransport {
    fn send_raw(&mut self, body: &str) -> Result<Value, StudentError> {
        self.lines.send_raw(body)
    }
}

impl Drop for StdioTransport {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

/// The same bodies, one per HTTP POST.
pub struct HttpTransport {
    url: String,
    http: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>) -> Result<Self, StudentError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(3600))
            .build()
            .map_err(|e| StudentError::TrainerUnavailable(e.to_string()))?;
        Ok(HttpTransport {
            url: url.into(),
            http,
        })
    }
}

impl Transport for HttpTransport {
    fn send_raw(&mut self, body: &str) -> Result<Value, StudentError> {
        let resp = self
            .http
            .post(&self.url)
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| StudentError::TrainerUnavailable(e.to_string()))?;
        let text = resp
            .text()
            .map_err(|e| StudentError::TrainerUnavailable(e.to_string()))?;
        serde_json::from_str(&text)
            .map_err(|e| StudentError::Protocol(format!("response is not JSON: {e}: {text:?}")))
    }
}

/// Check a response body against the protocol shape for `op`.
pub fn validate_response(op: &str, response: &Value) -> Result<(), String> {
    let obj = response.as_object().ok_or("response is not an object")?;
    match obj.get("ok").and_then(Value::as_bool) {
        Some(false) => {
            for f in ["error", "message"] {
                if !obj.get(f).is_some_and(Value::is_string) {
                    return Err(format!("error response lacks string field {f:?}"));
                }
            }
            Ok(())
        }
        Some(true) => match op {
            "train" => obj
                .get("checkpoint")
                .and_then(Value::as_str)
                .filter(|s| !s.is_empty())
                .map(|_| ())
                .ok_or_else(|| "train response lacks a checkpoint id".into()),
            "evaluate" => {
                let preds = obj
                    .get("predictions")
                    .and_then(Value::as_array)
                    .ok_or("evaluate response lacks predictions")?;
                for (i, p) in preds.iter().enumerate() {
                    if !p.get("item_id").is_some_and(Value::is_string)
                        || !p.get("predicted_answer").is_some_and(Value::is_string)
                    {
                        return Err(format!("prediction {i} lacks item_id or predicted_answer"));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        },
        None => Err("response lacks boolean \"ok\"".into()),
    }
}

fn check_ok(op: &str, response: Value) -> Result<Map<String, Value>, StudentError> {
    validate_response(op, &response).map_err(StudentError::Protocol)?;
    let Value::Object(obj) = response else {
        unreachable!("validated as object")
    };
    if obj.get("ok") == Some(&Value::Bool(false)) {
        return Err(StudentError::Remote {
            code: obj["error"].as_str().unwrap_or_default().to_string(),
            message: obj["message"].as_str().unwrap_or_default().to_string(),
        });
    }
    Ok(obj)
}

/// A student backed by an external worker.
pub struct ProtocolStudent<T: Transport> {
    transport: T,
    hyperparams: Map<String, Value>,
}

impl<T: Transport> ProtocolStudent<T> {
    pub fn new(transport: T) -> Self {
        ProtocolStudent {
            transport,
            hyperparams: Map::new(),
        }
    }

    pub fn with_hyperparams(mut self, hyperparams: Map<String, Value>) -> Self {
        self.hyperparams = hyperparams;
        self
    }

    pub fn shutdown(&mut self) -> Result<(), StudentError> {
        let r = self.transport.round_trip(&json!({"op": "shutdown"}))?;
        check_ok("shutdown", r).map(|_| ())
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    fn handle(checkpoint: &Checkpoint) -> Result<Option<String>, StudentError> {
        match &checkpoint.state {
            CheckpointState::External { handle } => Ok(handle.clone()),
            CheckpointState::Simulated { .. } => {
                Err(StudentError::ForeignCheckpoint(checkpoint.checkpoint_id.clone()))
            }
        }
    }
}

impl<T: Transport> Student for ProtocolStudent<T> {
    fn initial_checkpoint(&mut self) -> Result<Checkpoint, StudentError> {
        Ok(Checkpoint {
            checkpoint_id: "initial".into(),
            iteration: 0,
            state: CheckpointState::External { handle: None },
        })
    }

    fn train(
        &mut self,
        checkpoint: &Checkpoint,
        datums: &[TrainingDatum],
        options: TrainOptions,
    ) -> Result<Checkpoint, StudentError> {
        let handle = Self::handle(checkpoint)?;
        if datums.is_empty() {
            return Ok(checkpoint.clone());
        }
        let mut hyper = self.hyperparams.clone();
        hyper.insert("epochs".into(), json!(options.epochs));
        let r = self.transport.round_trip(&json!({
            "op": "train",
            "checkpoint": handle,
            "datums": datums,
            "hyperparams": hyper,
        }))?;
        let obj = check_ok("train", r)?;
        let id = obj["checkpoint"].as_str().unwrap_or_default().to_string();
        Ok(Checkpoint {
            checkpoint_id: id.clone(),
            iteration: options.iteration,
            state: CheckpointState::External { handle: Some(id) },
        })
    }

    fn predict(&mut self, checkpoint: &Checkpoint, items: &[TaskItem]) -> Result<Vec<String>, StudentError> {
        let handle = Self::handle(checkpoint)?;
        let r = self.transport.round_trip(&json!({
            "op": "evaluate",
            "checkpoint": handle,
            "items": items,
        }))?;
        let obj = check_ok("evaluate", r)?;
        let preds = obj["predictions"].as_array().cloned().unwrap_or_default();
        if preds.len() != items.len() {
            return Err(StudentError::Protocol(format!(
                "expected {} predictions, got {}",
                items.len(),
                preds.len()
            )));
        }
        items
            .iter()
            .zip(preds)
            .map(|(item, p)| {
                if p["item_id"] != item.item_id.as_str() {
                    return Err(StudentError::Protocol(format!(
                        "prediction for {} arrived where {} was expected",
                        p["item_id"], item.item_id
                    )));
                }
                Ok(p["predicted_answer"].as_str().unwrap_or_default().to_string())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformanceCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub checks: Vec<ConformanceCheck>,
}

impl ConformanceReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &str, outcome: Result<(), String>) {
        let (passed, detail) = match outcome {
            Ok(()) => (true, String::new()),
            Err(e) => (false, e),
        };
        self.checks.push(ConformanceCheck {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

fn probe_datum(i: usize) -> TrainingDatum {
    TrainingDatum {
        instruction: format!("conformance question {i}"),
        response: format!("answer {i}"),
        media_ref: None,
        provenance: Provenance {
            iteration: 1,
            skill: Some("conformance".into()),
            subskill: None,
            spec_digest: format!("probe-{i}"),
        },
    }
}

fn probe_item(i: usize, d: &TrainingDatum) -> TaskItem {
    TaskItem {
        item_id: format!("probe-{i}"),
        instruction: d.instruction.clone(),
        media_ref: None,
        gold_answer: d.response.clone(),
        difficulty: None,
        true_skill: None,
        true_subskill: None,
        latent_pass_threshold: None,
    }
}

/// Exercise a worker over every protocol path: schema of each response,
/// response ordering, checkpoint immutability, error replies that leave the
/// worker alive, and shutdown. Expects a worker that answers training
/// instructions with their training responses.
pub fn run_conformance<T: Transport>(transport: &mut T) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let datums: Vec<TrainingDatum> = (0..3).map(probe_datum).collect();

    let train = |t: &mut T, ckpt: Value, datums: &[TrainingDatum]| -> Result<String, String> {
        let r = t
            .round_trip(&json!({"op": "train", "checkpoint": ckpt, "datums": datums, "hyperparams": {}}))
            .map_err(|e| e.to_string())?;
        validate_response("train", &r)?;
        if r["ok"] != true {
            return Err(format!("train failed: {r}"));
        }
        Ok(r["checkpoint"].as_str().unwrap_or_default().to_string())
    };
    let evaluate = |t: &mut T, ckpt: &str, items: &[TaskItem]| -> Result<Vec<(String, String)>, String> {
        let r = t
            .round_trip(&json!({"op": "evaluate", "checkpoint": ckpt, "items": items}))
            .map_err(|e| e.to_string())?;
        validate_response("evaluate", &r)?;
        if r["ok"] != true {
            return Err(format!("evaluate failed: {r}"));
        }
        Ok(r["predictions"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| {
                (
                    p["item_id"].as_str().unwrap().to_string(),
                    p["predicted_answer"].as_str().unwrap().to_string(),
                )
            })
            .collect())
    };

    let first = train(transport, Value::Null, &datums);
    report.record(
        "train-from-null",
        first.as_ref().map(|_| ()).map_err(Clone::clone),
    );
    let Ok(first) = first else {
        return report;
    };

    // Items in reverse order so that ordering mistakes show.
    let items: Vec<TaskItem> = datums
        .iter()
        .enumerate()
        .rev()
        .map(|(i, d)| probe_item(i, d))
        .collect();
    let preds = evaluate(transport, &first, &items);
    report.record(
        "evaluate-preserves-order",
        preds.as_ref().map_err(Clone::clone).and_then(|p| {
            let got: Vec<&str> = p.iter().map(|x| x.0.as_str()).collect();
            let want: Vec<&str> = items.iter().map(|i| i.item_id.as_str()).collect();
            (got == want)
                .then_some(())
                .ok_or(format!("order {got:?} != {want:?}"))
        }),
    );
    report.record(
        "memorized-items-correct",
        preds.as_ref().map_err(Clone::clone).and_then(|p| {
            let wrong: Vec<&String> = p
                .iter()
                .zip(&items)
                .filter(|(x, i)| x.1 != i.gold_answer)
                .map(|(x, _)| &x.0)
                .collect();
            wrong
                .is_empty()
                .then_some(())
                .ok_or(format!("wrong answers for {wrong:?}"))
        }),
    );

    let extra = probe_datum(99);
    let second = train(transport, json!(first), std::slice::from_ref(&extra));
    report.record(
        "checkpoint-immutability",
        second.and_then(|second| {
            if second == first {
                return Err("retraining returned the parent checkpoint id".into());
            }
            let probe = [probe_item(99, &extra)];
            let old = evaluate(transport, &first, &probe)?;
            let new = evaluate(transport, &second, &probe)?;
            if old[0].1 == extra.response {
                return Err("parent checkpoint changed after retraining".into());
            }
            if new[0].1 != extra.response {
                return Err("child checkpoint did not learn the new datum".into());
            }
            Ok(())
        }),
    );

    let bad = transport.send_raw("{this is not json");
    report.record(
        "malformed-request-error",
        bad.map_err(|e| e.to_string()).and_then(|r| {
            validate_response("error", &r)?;
            (r["ok"] == false)
                .then_some(())
                .ok_or(format!("expected ok=false, got {r}"))
        }),
    );
    let unknown = transport.round_trip(&json!({"op": "bogus"}));
    report.record(
        "unknown-op-error",
        unknown.map_err(|e| e.to_string()).and_then(|r| {
            validate_response("error", &r)?;
            (r["ok"] == false)
                .then_some(())
                .ok_or(format!("expected ok=false, got {r}"))
        }),
    );
    report.record(
        "alive-after-errors",
        evaluate(transport, &first, &items[..1]).map(|_| ()),
    );
    let bye = transport.round_trip(&json!({"op": "shutdown"}));
    report.record(
        "shutdown",
        bye.map_err(|e| e.to_string()).and_then(|r| {
            validate_response("shutdown", &r)?;
            (r["ok"] == true)
                .then_some(())
                .ok_or(format!("expected ok=true, got {r}"))
        }),
    );
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_shapes() {
        assert!(validate_response("train", &json!({"ok": true, "checkpoint": "c1"})).is_ok());
        assert!(validate_response("train", &json!({"ok": true})).is_err());
        assert!(
            validate_response("x", &json!({"ok": false, "error": "bad-request", "message": "m"})).is_ok()
        );
        assert!(validate_response("x", &json!({"ok": false})).is_err());
        assert!(validate_response(
            "evaluate",
            &json!({"ok": true, "predictions": [{"item_id": "a", "predicted_answer": ""}]})
        )
        .is_ok());
    }

    #[test]
    fn stdio_worker_via_shell() {
        let script = r#"while read -r line; do
  case "$line" in
    *'"op":"train"'*) echo '{"ok":true,"checkpoint":"ck-1"}' ;;
    *) echo '{"ok":false,"error":"bad-request","message":"unsupported"}' ;;
  esac
done"#;
        let t = StdioTransport::spawn(&["sh".into(), "-c".into(), script.into()]).unwrap();
        let mut s = ProtocolStudent::new(t);
        let c0 = s.initial_checkpoint().unwrap();
        let c1 = s
            .train(
                &c0,
                &[probe_datum(0)],
                TrainOptions {
                    iteration: 1,
                    epochs: 1,
                },
            )
            .unwrap();
        assert_eq!(c1.checkpoint_id, "ck-1");
        let err = s.predict(&c1, &[probe_item(0, &probe_datum(0))]).unwrap_err();
        assert!(matches!(err, StudentError::Remote { ref code, .. } if code == "bad-request"));
    }

    #[test]
    fn dead_worker_is_unavailable() {
        let t = StdioTransport::spawn(&["sh".into(), "-c".into(), "exit 0".into()]).unwrap();
        let mut s = ProtocolStudent::new(t);
        let c0 = s.initial_checkpoint().unwrap();
        let err = s
            .train(&c0, &[probe_datum(0)], TrainOptions::default())
            .unwrap_err();
        assert!(matches!(err, StudentError::TrainerUnavailable(_)));
    }
}
