//! Rendering plans into training datums.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::media_handle;
use crate::forest::QuotaEntry;
use crate::model::{DataSpec, Provenance, TaskDomainId, TrainingDatum};
use crate::provider::schema::ids;
use crate::provider::{CompletionRequest, LlmClient};
use crate::sim::{embed_tag, parse_tag};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("engine degraded: {failed} of {total} specs failed to render")]
    Degraded { failed: usize, total: usize },
    #[error("spec {index} targets domain {got:?}, engine renders {expected:?}")]
    WrongDomain {
        index: usize,
        expected: TaskDomainId,
        got: TaskDomainId,
    },
    #[error("domain {0:?} needs a provider")]
    NoProvider(TaskDomainId),
}

/// Text-to-image port. Returns a content-addressed media handle.
pub trait ImagePort: Send + Sync {
    fn synthesize(&self, description: &str) -> Result<String, String>;
}

/// Stand-in that "renders" an image as the digest of its description.
#[derive(Debug, Clone, Copy, Default)]
pub struct DigestImagePort;

impl ImagePort for DigestImagePort {
    fn synthesize(&self, description: &str) -> Result<String, String> {
        Ok(media_handle(description.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedSpec {
    pub index: usize,
    pub spec_digest: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineOutput {
    pub datums: Vec<TrainingDatum>,
    pub dropped: Vec<DroppedSpec>,
}

#[derive(Clone)]
pub struct Engine {
    domain: TaskDomainId,
    llm: Option<LlmClient>,
    image: Arc<dyn ImagePort>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("domain", &self.domain).finish()
    }
}

impl Engine {
    /// The simulated domain renders locally; every other domain goes through
    /// the provider.
    pub fn new(domain: TaskDomainId, llm: Option<LlmClient>) -> Result<Self, EngineError> {
        if domain != TaskDomainId::Simulated && llm.is_none() {
            return Err(EngineError::NoProvider(domain));
        }
        Ok(Engine {
            domain,
            llm,
            image: Arc::new(DigestImagePort),
        })
    }

    pub fn with_image_port(mut self, image: Arc<dyn ImagePort>) -> Self {
        self.image = image;
        self
    }

    pub fn domain(&self) -> TaskDomainId {
        self.domain
    }

    /// One datum per spec, in order. Specs that fail to render are dropped
    /// and reported; more than half failing aborts with `Degraded`.
    pub fn execute_plan(&self, specs: &[DataSpec], iteration: u32) -> Result<EngineOutput, EngineError> {
        for (index, s) in specs.iter().enumerate() {
            if s.domain != self.domain {
                return Err(EngineError::WrongDomain {
                    index,
                    expected: self.domain,
                    got: s.domain,
                });
            }
        }
        let width = self.llm.as_ref().map_or(1, |l| l.max_in_flight()).max(1);
        let mut results: Vec<Result<TrainingDatum, String>> = Vec::with_capacity(specs.len());
        if width == 1 || self.domain == TaskDomainId::Simulated {
            results.extend(specs.iter().map(|s| self.render(s, iteration)));
        } else {
            for chunk in specs.chunks(width) {
                let rendered: Vec<_> = std::thread::scope(|scope| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|s| scope.spawn(move || self.render(s, iteration)))
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("render thread panicked"))
                        .collect()
                });
                results.extend(rendered);
            }
        }
        let mut out = EngineOutput::default();
        for (index, (spec, r)) in specs.iter().zip(results).enumerate() {
            match r {
                Ok(d) => out.datums.push(d),
                Err(reason) => out.dropped.push(DroppedSpec {
                    index,
                    spec_digest: spec.digest(),
                    reason,
                }),
            }
        }
        if out.dropped.len() * 2 > specs.len() {
            return Err(EngineError::Degraded {
                failed: out.dropped.len(),
                total: specs.len(),
            });
        }
        Ok(out)
    }

    /// Exactly `count` specs per quota entry, tagged with its skill and
    /// subskill.
    pub fn execute_forest(&self, quota: &[QuotaEntry], iteration: u32) -> Result<EngineOutput, EngineError> {
        let specs: Vec<DataSpec> = quota
            .iter()
            .flat_map(|q| {
                (0..q.count).map(move |i| {
                    DataSpec::new(
                        self.domain,
                        format!(
                            "Create training example {} for {} / {}.",
                            i + 1,
                            q.skill,
                            q.subskill
                        ),
                    )
                    .targeting(Some(q.skill.clone()), Some(q.subskill.clone()))
                })
            })
            .collect();
        self.execute_plan(&specs, iteration)
    }

    pub fn render(&self, spec: &DataSpec, iteration: u32) -> Result<TrainingDatum, String> {
        let provenance = provenance_for(spec, iteration);
        match self.domain {
            TaskDomainId::Simulated => Ok(render_simulated(spec, provenance)),
            TaskDomainId::Math => self.render_math(spec, provenance),
            TaskDomainId::Vqa => self.render_vqa(spec, provenance),
            TaskDomainId::Code => self.render_code(spec, provenance),
        }
    }

    fn llm(&self) -> Result<&LlmClient, String> {
        self.llm
            .as_ref()
            .ok_or_else(|| "no provider configured".to_string())
    }

    fn request(
        &self,
        base: &str,
        schema: &str,
        spec: &DataSpec,
        p: &Provenance,
    ) -> Result<CompletionRequest, String> {
        let id = self.llm()?.templates().resolve(base, &domain_name(self.domain));
        let mut req = CompletionRequest::new(id, schema)
            .var("domain", domain_name(self.domain))
            .var("skill", p.skill.clone().unwrap_or_else(|| "general".into()))
            .var("subskill", p.subskill.clone().unwrap_or_else(|| "general".into()))
            .var("instruction", spec.instruction.as_str());
        for (k, v) in &spec.rendering_hints {
            req = req.var(&format!("hint_{k}"), v.as_str());
        }
        Ok(req)
    }

    fn call(&self, req: &CompletionRequest) -> Result<Value, String> {
        self.llm()?
            .complete(req)
            .map(|r| r.payload)
            .map_err(|e| e.to_string())
    }

    /// Question, step-by-step solution and a final answer.
    pub fn render_math(&self, spec: &DataSpec, provenance: Provenance) -> Result<TrainingDatum, String> {
        let v = self.call(&self.request("engine.math", ids::MATH_DATUM, spec, &provenance)?)?;
        Ok(TrainingDatum {
            instruction: text(&v, "question"),
            response: format!(
                "{}\nFinal answer: {}",
                text(&v, "solution"),
                text(&v, "final_answer")
            ),
            media_ref: None,
            provenance,
        })
    }

    /// Description, then an image from the image port, then a question
    /// about that image.
    pub fn render_vqa(&self, spec: &DataSpec, provenance: Provenance) -> Result<TrainingDatum, String> {
        let description = match spec.rendering_hints.get("image_description") {
            Some(d) => d.clone(),
            None => {
                let v = self.call(&self.request(
                    "engine.vqa-description",
                    ids::VQA_DESCRIPTION,
                    spec,
                    &provenance,
                )?)?;
                text(&v, "description")
            }
        };
        let media = self
            .image
            .synthesize(&description)
            .map_err(|e| format!("image synthesis failed: {e}"))?;
        let req = self
            .request("engine.vqa-questions", ids::VQA_QUESTIONS, spec, &provenance)?
            .var("description", description.as_str())
            .var("count", 1u64);
        let v = self.call(&req)?;
        let q = &v["questions"][0];
        Ok(TrainingDatum {
            instruction: text(q, "question"),
            response: text(q, "answer"),
            media_ref: Some(media),
            provenance,
        })
    }

    /// Problem and starter code, then a solution from a second call. The
    /// solution is not executed.
    pub fn render_code(&self, spec: &DataSpec, provenance: Provenance) -> Result<TrainingDatum, String> {
        let v = self.call(&self.request("engine.code-problem", ids::CODE_PROBLEM, spec, &provenance)?)?;
        let problem = text(&v, "problem");
        let starter = text(&v, "starter_code");
        let id = self
            .llm()?
            .templates()
            .resolve("engine.code-solution", &domain_name(self.domain));
        let req = CompletionRequest::new(id, ids::CODE_SOLUTION)
            .var("problem", problem.as_str())
            .var("starter_code", starter.as_str());
        let s = self.call(&req)?;
        Ok(TrainingDatum {
            instruction: format!("{problem}\n\nStarter code:\n{starter}"),
            response: text(&s, "solution"),
            media_ref: None,
            provenance,
        })
    }
}

fn text(v: &Value, field: &str) -> String {
    v[field].as_str().unwrap_or_default().to_string()
}

fn domain_name(d: TaskDomainId) -> String {
    serde_json::to_value(d)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// Skill from the data spec's target, else from a hidden tag in the instruction.
/// Subskill from the data spec's target, else from the tag when the tag's skill
/// agrees with the chosen skill.
pub fn provenance_for(spec: &DataSpec, iteration: u32) -> Provenance {
    let tag = parse_tag(&spec.instruction);
    let skill = spec
        .target_skill
        .clone()
        .or_else(|| tag.as_ref().map(|t| t.0.clone()));
    let subskill = spec.target_subskill.clone().or_else(|| match (&tag, &skill) {
        (Some((ts, sub)), Some(s)) if ts == s => sub.clone(),
        _ => None,
    });
    Provenance {
        iteration,
        skill,
        subskill,
        spec_digest: spec.digest(),
    }
}

fn render_simulated(spec: &DataSpec, provenance: Provenance) -> TrainingDatum {
    let tag = provenance
        .skill
        .as_deref()
        .map(|s| embed_tag(s, provenance.subskill.as_deref()))
        .unwrap_or_default();
    let focus = provenance
        .subskill
        .clone()
        .or_else(|| provenance.skill.clone())
        .unwrap_or_else(|| "general review".into());
    TrainingDatum {
        instruction: format!("{tag} {}", spec.instruction).trim().to_string(),
        response: format!("Worked solution exercising {focus}."),
        media_ref: None,
        provenance,
    }
}
