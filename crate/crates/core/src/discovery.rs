//! Two-stage skill discovery and subskill proposal.
//!
//! Stage 1 asks the provider for a free-form skill label per item. Stage 2
//! groups the deduplicated labels (with counts) into at most
//! `max_categories` mutually exclusive categories. An item's skill is the
//! category of its raw label.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{Dataset, EvaluatedPrediction, TaskItem, UNCATEGORIZED};
use crate::provider::schema::ids;
use crate::provider::{extract_json, CompletionRequest, LlmClient, ProviderError};

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("annotator returned an empty skill name for item {0}")]
    EmptyLabel(String),
    #[error("category map is not a partition of the raw labels: {0}")]
    PartitionViolation(String),
    #[error("nothing to discover skills from")]
    EmptyInput,
    #[error("subskill proposals need k >= 1")]
    ZeroProposals,
}

/// Per-item raw labels and the raw-label to category map.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkillAssignment {
    pub raw: BTreeMap<String, String>,
    pub categories: BTreeMap<String, String>,
}

impl SkillAssignment {
    /// item_id -> category.
    pub fn assigned(&self) -> BTreeMap<String, String> {
        self.raw
            .iter()
            .map(|(item, raw)| {
                let cat = self
                    .categories
                    .get(raw)
                    .cloned()
                    .unwrap_or_else(|| UNCATEGORIZED.to_string());
                (item.clone(), cat)
            })
            .collect()
    }

    pub fn apply(&self, predictions: &mut [EvaluatedPrediction]) {
        let assigned = self.assigned();
        for p in predictions {
            p.assigned_skill = assigned.get(&p.item_id).cloned();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discovered {
    /// The category set, sorted.
    pub skills: Vec<String>,
    pub assignment: SkillAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubskillProposal {
    pub names: Vec<String>,
    pub requested: usize,
    /// How many fewer unique names than requested came back.
    pub shortfall: usize,
}

#[derive(Debug, Clone)]
pub struct SkillDiscovery {
    llm: LlmClient,
    domain: String,
    max_categories: usize,
}

impl SkillDiscovery {
    pub fn new(llm: LlmClient, domain: impl Into<String>) -> Self {
        SkillDiscovery {
            llm,
            domain: domain.into(),
            max_categories: 15,
        }
    }

    pub fn with_max_categories(mut self, max: usize) -> Self {
        self.max_categories = max.max(1);
        self
    }

    fn annotate_request(&self, item: &TaskItem) -> CompletionRequest {
        let id = self.llm.templates().resolve("discovery.annotate", &self.domain);
        CompletionRequest::new(id, ids::SKILL_ANNOTATION)
            .var("domain", self.domain.as_str())
            .var("instruction", item.instruction.as_str())
    }

    fn label_of(item: &TaskItem, payload: &Value) -> Result<String, DiscoveryError> {
        match &payload["skill"] {
            Value::Null => Ok(UNCATEGORIZED.to_string()),
            Value::String(s) if s.trim().is_empty() => Err(DiscoveryError::EmptyLabel(item.item_id.clone())),
            Value::String(s) => Ok(s.trim().to_string()),
            other => Err(DiscoveryError::EmptyLabel(format!("{}: {other}", item.item_id))),
        }
    }

    /// Stage 1 for a single item. Items the annotator cannot label get
    /// `Uncategorized`.
    pub fn annotate_instance(&self, item: &TaskItem) -> Result<String, DiscoveryError> {
        let r = self.llm.complete(&self.annotate_request(item))?;
        Self::label_of(item, &r.payload)
    }

    /// Stage 1 over many items with bounded concurrency; results keyed by
    /// item id.
    pub fn annotate_all(&self, items: &[TaskItem]) -> Result<BTreeMap<String, String>, DiscoveryError> {
        let requests: Vec<CompletionRequest> = items.iter().map(|i| self.annotate_request(i)).collect();
        let results = self.llm.complete_many(&requests, |_| Ok(()));
        let mut out = BTreeMap::new();
        for (item, r) in items.iter().zip(results) {
            out.insert(item.item_id.clone(), Self::label_of(item, &r?.payload)?);
        }
        Ok(out)
    }

    /// Stage 2: group raw labels into categories. The returned map covers
    /// every distinct label exactly once.
    pub fn aggregate_skills(&self, labels: &[String]) -> Result<BTreeMap<String, String>, DiscoveryError> {
        if labels.is_empty() {
            return Err(DiscoveryError::EmptyInput);
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for l in labels {
            *counts.entry(l.as_str()).or_default() += 1;
        }
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        if counts.remove(UNCATEGORIZED).is_some() {
            map.insert(UNCATEGORIZED.to_string(), UNCATEGORIZED.to_string());
        }
        if counts.is_empty() {
            return Ok(map);
        }
        let expected: BTreeSet<String> = counts.keys().map(|s| s.to_string()).collect();
        let skills: Vec<Value> = counts
            .iter()
            .map(|(s, c)| json!({"skill": s, "count": c}))
            .collect();
        let id = self.llm.templates().resolve("discovery.aggregate", &self.domain);
        let req = CompletionRequest::new(id, ids::SKILL_CATEGORIES)
            .var("domain", self.domain.as_str())
            .var("skills", skills)
            .var("max_categories", self.max_categories as u64);
        let max = self.max_categories;
        let check = |v: &Value| check_partition(v, &expected, max).map(|_| ());
        let payload = match self.llm.complete_with(&req, check) {
            Ok(r) => r.payload,
            Err(ProviderError::StructuredParseFailure { last_error, .. }) => {
                return Err(DiscoveryError::PartitionViolation(last_error))
            }
            Err(e) => return Err(e.into()),
        };
        let groups = check_partition(&payload, &expected, max).map_err(DiscoveryError::PartitionViolation)?;
        map.extend(groups);
        Ok(map)
    }

    /// Both stages over a dataset.
    pub fn discover(&self, dataset: &Dataset) -> Result<Discovered, DiscoveryError> {
        if dataset.is_empty() {
            return Err(DiscoveryError::EmptyInput);
        }
        let raw = self.annotate_all(&dataset.items)?;
        let labels: Vec<String> = raw.values().cloned().collect();
        let categories = self.aggregate_skills(&labels)?;
        let skills: BTreeSet<String> = categories.values().cloned().collect();
        Ok(Discovered {
            skills: skills.into_iter().collect(),
            assignment: SkillAssignment { raw, categories },
        })
    }

    /// Skip stage 2: the skill set is given. Raw labels map to a given skill
    /// by case-insensitive match, else by the largest word overlap, else to
    /// `Uncategorized`.
    pub fn assign_to_skills(
        &self,
        dataset: &Dataset,
        skills: &[String],
    ) -> Result<Discovered, DiscoveryError> {
        let raw = self.annotate_all(&dataset.items)?;
        let categories = raw
            .values()
            .map(|l| (l.clone(), nearest_skill(l, skills)))
            .collect();
        Ok(Discovered {
            skills: skills.to_vec(),
            assignment: SkillAssignment { raw, categories },
        })
    }

    /// Ask for `k` new subskills of `skill`. Names are deduplicated
    /// case-insensitively against `existing` and each other; if the provider
    /// keeps repeating itself the unique remainder is returned with the
    /// shortfall recorded.
    pub fn propose_subskills(
        &self,
        skill: &str,
        existing: &[String],
        k: usize,
    ) -> Result<SubskillProposal, DiscoveryError> {
        if k == 0 {
            return Err(DiscoveryError::ZeroProposals);
        }
        let id = self.llm.templates().resolve("discovery.subskills", &self.domain);
        let req = CompletionRequest::new(id, ids::SUBSKILL_LIST)
            .var("domain", self.domain.as_str())
            .var("skill", skill)
            .var("existing", json!(existing))
            .var("k", k as u64);
        let check = |v: &Value| {
            let n = unique_new(v, existing).len();
            if n >= k {
                Ok(())
            } else {
                Err(format!(
                    "expected {k} new subskills distinct from {existing:?} and each other, got {n}"
                ))
            }
        };
        let payload = match self.llm.complete_with(&req, check) {
            Ok(r) => r.payload,
            Err(ProviderError::StructuredParseFailure { last_raw, .. })
                if extract_json(&last_raw).is_ok() =>
            {
                extract_json(&last_raw).expect("checked above")
            }
            Err(e) => return Err(e.into()),
        };
        let mut names = unique_new(&payload, existing);
        names.truncate(k);
        Ok(SubskillProposal {
            shortfall: k - names.len(),
            names,
            requested: k,
        })
    }
}

fn unique_new(payload: &Value, existing: &[String]) -> Vec<String> {
    let mut seen: BTreeSet<String> = existing.iter().map(|e| e.to_lowercase()).collect();
    let mut out = Vec::new();
    for v in payload["subskills"].as_array().into_iter().flatten() {
        if let Some(name) = v.as_str().map(str::trim).filter(|s| !s.is_empty()) {
            if seen.insert(name.to_lowercase()) {
                out.push(name.to_string());
            }
        }
    }
    out
}

/// Validate a category payload and turn it into raw label -> category.
fn check_partition(
    payload: &Value,
    expected: &BTreeSet<String>,
    max: usize,
) -> Result<BTreeMap<String, String>, String> {
    let cats = payload["categories"].as_array().ok_or("missing categories")?;
    if cats.len() > max {
        return Err(format!("{} categories exceed the maximum of {max}", cats.len()));
    }
    let mut map = BTreeMap::new();
    let mut names = BTreeSet::new();
    for c in cats {
        let name = c["name"].as_str().unwrap_or("").trim().to_string();
        if name.is_empty() {
            return Err("category with empty name".into());
        }
        if !names.insert(name.clone()) {
            return Err(format!("category {name:?} appears twice"));
        }
        for m in c["members"].as_array().into_iter().flatten() {
            let m = m.as_str().unwrap_or("").to_string();
            if !expected.contains(&m) {
                return Err(format!("unknown label {m:?} in category {name:?}"));
            }
            if map.insert(m.clone(), name.clone()).is_some() {
                return Err(format!("label {m:?} assigned to more than one category"));
            }
        }
    }
    let missing: Vec<&String> = expected.iter().filter(|l| !map.contains_key(*l)).collect();
    if !missing.is_empty() {
        return Err(format!("labels without a category: {missing:?}"));
    }
    Ok(map)
}

fn tokens(s: &str) -> BTreeSet<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Closest given skill for a raw label; `Uncategorized` if nothing overlaps.
pub fn nearest_skill(label: &str, skills: &[String]) -> String {
    if let Some(s) = skills.iter().find(|s| s.eq_ignore_ascii_case(label)) {
        return s.clone();
    }
    let lt = tokens(label);
    let mut best: Option<(f64, &String)> = None;
    for s in skills {
        let st = tokens(s);
        let inter = lt.intersection(&st).count();
        if inter == 0 {
            continue;
        }
        let score = inter as f64 / lt.union(&st).count() as f64;
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, s));
        }
    }
    best.map(|(_, s)| s.clone())
        .unwrap_or_else(|| UNCATEGORIZED.to_string())
}
