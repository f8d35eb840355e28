//! External-trainer protocol against in-process workers over loopback
//! sockets: NDJSON over TCP and one JSON body per HTTP POST.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;

use serde_json::{json, Value};
use teachenv::model::{Provenance, TaskItem, TrainingDatum};
use teachenv::student::protocol::{run_conformance, HttpTransport, LineTransport};
use teachenv::student::{ProtocolStudent, Student, StudentError, TrainOptions};

/// Answers an instruction with the response it was trained on, or "unknown".
#[derive(Default)]
struct MemorizingWorker {
    checkpoints: BTreeMap<String, BTreeMap<String, String>>,
    next: u32,
}

impl MemorizingWorker {
    fn handle(&mut self, body: &str) -> Value {
        let Ok(req) = serde_json::from_str::<Value>(body) else {
            return json!({"ok": false, "error": "bad-request", "message": "malformed JSON"});
        };
        match req["op"].as_str() {
            Some("train") => {
                let mut memory = match req["checkpoint"].as_str() {
                    Some(id) => match self.checkpoints.get(id) {
                        Some(m) => m.clone(),
                        None => return json!({"ok": false, "error": "unknown-checkpoint", "message": id}),
                    },
                    None => BTreeMap::new(),
                };
                for d in req["datums"].as_array().into_iter().flatten() {
                    memory.insert(
                        d["instruction"].as_str().unwrap_or_default().to_string(),
                        d["response"].as_str().unwrap_or_default().to_string(),
                    );
                }
                self.next += 1;
                let id = format!("ck-{}", self.next);
                self.checkpoints.insert(id.clone(), memory);
                json!({"ok": true, "checkpoint": id})
            }
            Some("evaluate") => {
                let empty = BTreeMap::new();
                let memory = req["checkpoint"]
                    .as_str()
                    .and_then(|id| self.checkpoints.get(id))
                    .unwrap_or(&empty);
                let preds: Vec<Value> = req["items"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|i| {
                        let answer = memory
                            .get(i["instruction"].as_str().unwrap_or_default())
                            .cloned()
                            .unwrap_or_else(|| "unknown".into());
                        json!({"item_id": i["item_id"], "predicted_answer": answer})
                    })
                    .collect();
                json!({"ok": true, "predictions": preds})
            }
            Some("shutdown") => json!({"ok": true}),
            _ => json!({"ok": false, "error": "unknown-op", "message": "unsupported op"}),
        }
    }
}

fn spawn_ndjson_worker() -> TcpStream {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut out = stream.try_clone().unwrap();
        let mut worker = MemorizingWorker::default();
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { break };
            let resp = worker.handle(&line);
            if writeln!(out, "{resp}").is_err() {
                break;
            }
            if resp == json!({"ok": true}) {
                break;
            }
        }
    });
    TcpStream::connect(addr).unwrap()
}

fn tcp_transport(stream: TcpStream) -> LineTransport<BufReader<TcpStream>, TcpStream> {
    LineTransport::new(BufReader::new(stream.try_clone().unwrap()), stream)
}

/// Minimal HTTP/1.1 server: one JSON request body in, one JSON body out.
fn spawn_http_worker() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let mut worker = MemorizingWorker::default();
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let mut out = stream.try_clone().unwrap();
            let mut reader = BufReader::new(stream);
            loop {
                let mut len = 0usize;
                let mut started = false;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    started = true;
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                if !started {
                    break;
                }
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                let resp = worker.handle(&String::from_utf8_lossy(&body)).to_string();
                write!(
                    out,
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{resp}",
                    resp.len()
                )
                .unwrap();
                out.flush().unwrap();
            }
        }
    });
    format!("http://{addr}/")
}

fn datum(instruction: &str, response: &str) -> TrainingDatum {
    TrainingDatum {
        instruction: instruction.into(),
        response: response.into(),
        media_ref: None,
        provenance: Provenance {
            iteration: 1,
            skill: Some("arithmetic".into()),
            subskill: None,
            spec_digest: "d".into(),
        },
    }
}

fn item(id: &str, instruction: &str, gold: &str) -> TaskItem {
    TaskItem {
        item_id: id.into(),
        instruction: instruction.into(),
        media_ref: None,
        gold_answer: gold.into(),
        difficulty: None,
        true_skill: None,
        true_subskill: None,
        latent_pass_threshold: None,
    }
}

#[test]
fn conformance_over_tcp() {
    let mut t = tcp_transport(spawn_ndjson_worker());
    let report = run_conformance(&mut t);
    for c in &report.checks {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
    assert_eq!(report.checks.len(), 8);
    assert!(report.all_passed());
}

#[test]
fn conformance_over_http() {
    let mut t = HttpTransport::new(spawn_http_worker()).unwrap();
    let report = run_conformance(&mut t);
    for c in &report.checks {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}

#[test]
fn protocol_student_trains_and_predicts() {
    let mut s = ProtocolStudent::new(tcp_transport(spawn_ndjson_worker()));
    let c0 = s.initial_checkpoint().unwrap();
    let items = [item("a", "2+2", "4"), item("b", "3+3", "6")];
    assert_eq!(s.predict(&c0, &items).unwrap(), vec!["unknown", "unknown"]);

    let c1 = s
        .train(
            &c0,
            &[datum("2+2", "4")],
            TrainOptions {
                iteration: 1,
                epochs: 1,
            },
        )
        .unwrap();
    assert_eq!(c1.iteration, 1);
    assert_eq!(s.predict(&c1, &items).unwrap(), vec!["4", "unknown"]);
    assert_eq!(s.score_datums(&c1, &[datum("2+2", "4")]).unwrap(), Some(1.0));

    // Empty training data keeps the checkpoint.
    let same = s.train(&c1, &[], TrainOptions::default()).unwrap();
    assert_eq!(same, c1);
    s.shutdown().unwrap();
}

#[test]
fn remote_errors_surface() {
    let mut s = ProtocolStudent::new(tcp_transport(spawn_ndjson_worker()));
    let ghost = teachenv::student::Checkpoint {
        checkpoint_id: "ghost".into(),
        iteration: 3,
        state: teachenv::student::CheckpointState::External {
            handle: Some("ghost".into()),
        },
    };
    let err = s
        .train(&ghost, &[datum("q", "a")], TrainOptions::default())
        .unwrap_err();
    assert!(matches!(err, StudentError::Remote { ref code, .. } if code == "unknown-checkpoint"));
}

#[test]
fn unreachable_http_worker_is_unavailable() {
    // Bind then drop to get a port nobody listens on.
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let t = HttpTransport::new(format!("http://127.0.0.1:{port}/")).unwrap();
    let mut s = ProtocolStudent::new(t);
    let c0 = s.initial_checkpoint().unwrap();
    let err = s
        .train(&c0, &[datum("q", "a")], TrainOptions::default())
        .unwrap_err();
    assert!(matches!(err, StudentError::TrainerUnavailable(_)));
}
