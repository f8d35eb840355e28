//! Deterministic stand-in for a chat model.
//!
//! Replies are a pure function of (template id, variables, seed). The mock
//! reads hidden `[[skill=..;subskill=..]]` tags that simulated items carry in
//! their instruction text, which is how it "knows" the right answer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::schema::ids;
use super::{request_digest, BackendKind, ChatBackend, ChatCall, ProviderError};
use crate::canonical::{hash_u64, unit_from_hash};
use crate::sim::{embed_tag, parse_tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub seed: u64,
    /// Probability that a skill annotation is replaced by another label.
    pub confusion_rate: f64,
    /// Labels a confused annotation can be swapped to.
    pub label_pool: Vec<String>,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            seed: 0,
            confusion_rate: 0.0,
            label_pool: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    config: MockConfig,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        MockBackend { config }
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn draw(&self, salt: &str, call: &ChatCall<'_>) -> u64 {
        let d = request_digest(call.template_id, call.variables);
        hash_u64(&[&self.config.seed.to_le_bytes(), salt.as_bytes(), d.as_bytes()])
    }

    fn respond(&self, call: &ChatCall<'_>) -> Result<Value, ProviderError> {
        let vars = call.variables;
        let s = |name: &str| -> String {
            match vars.get(name) {
                Some(Value::String(s)) => s.clone(),
                Some(v) => v.to_string(),
                None => String::new(),
            }
        };
        Ok(match call.schema_id {
            ids::SKILL_ANNOTATION => json!({ "skill": self.annotate(call, &s("instruction")) }),
            ids::SKILL_CATEGORIES => {
                let labels: Vec<(String, u64)> = vars
                    .get("skills")
                    .and_then(Value::as_array)
                    .map(|a| {
                        a.iter()
                            .filter_map(|e| {
                                Some((
                                    e.get("skill")?.as_str()?.to_string(),
                                    e.get("count").and_then(Value::as_u64).unwrap_or(1),
                                ))
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                let max = vars.get("max_categories").and_then(Value::as_u64).unwrap_or(15) as usize;
                let cats = group_by_last_token(&labels, max);
                json!({
                    "categories": cats
                        .into_iter()
                        .map(|(name, members)| json!({"name": name, "members": members}))
                        .collect::<Vec<_>>()
                })
            }
            ids::SUBSKILL_LIST => {
                let skill = s("skill");
                let existing: Vec<String> = vars
                    .get("existing")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
                    .unwrap_or_default();
                let k = vars.get("k").and_then(Value::as_u64).unwrap_or(1);
                json!({ "subskills": mock_subskills(&skill, &existing, k as usize) })
            }
            ids::MATH_DATUM => {
                let h = self.draw("math", call);
                let (a, b) = (h % 90 + 10, (h >> 8) % 90 + 10);
                let tag = embed_tag(&s("skill"), Some(&s("subskill")));
                json!({
                    "question": format!("{tag} Compute {a} + {b}. ({})", s("instruction")),
                    "solution": format!("Step 1: add the tens. Step 2: add the ones. {a} + {b} = {}.", a + b),
                    "final_answer": (a + b).to_string(),
                })
            }
            ids::VQA_DESCRIPTION => {
                let h = self.draw("vqa", call);
                const OBJECTS: [&str; 4] = ["chair", "mug", "bicycle", "lamp"];
                const MATERIALS: [&str; 4] = ["plastic", "wooden", "metal", "glass"];
                json!({
                    "description": format!(
                        "a {} {} on a table, illustrating {} / {}",
                        MATERIALS[(h % 4) as usize],
                        OBJECTS[((h >> 4) % 4) as usize],
                        s("skill"),
                        s("subskill"),
                    )
                })
            }
            ids::VQA_QUESTIONS => {
                let count = vars.get("count").and_then(Value::as_u64).unwrap_or(1).max(1);
                let h = self.draw("vqa-q", call);
                let tag = embed_tag(&s("skill"), Some(&s("subskill")));
                let qs: Vec<Value> = (0..count)
                    .map(|i| {
                        json!({
                            "question": format!("{tag} Is the object in the image made of the material described? (#{i})"),
                            "answer": if (h >> i) & 1 == 1 { "yes" } else { "no" },
                        })
                    })
                    .collect();
                json!({ "questions": qs })
            }
            ids::CODE_PROBLEM => {
                let h = self.draw("code", call);
                let tag = embed_tag(&s("skill"), Some(&s("subskill")));
                json!({
                    "problem": format!("{tag} Given a list of integers, return the sum of every element divisible by {}.", h % 7 + 2),
                    "starter_code": "```python\ndef solve(xs: list[int]) -> int:\n    pass\n```",
                })
            }
            ids::CODE_SOLUTION => json!({
                "solution": "```python\ndef solve(xs: list[int]) -> int:\n    return sum(x for x in xs if x % K == 0)\n```"
            }),
            ids::DATA_SPECS => {
                let budget = vars.get("budget").and_then(Value::as_u64).unwrap_or(0) as usize;
                let specs = if call.template_id.starts_with("policy.skill-list") {
                    skill_list_specs(vars.get("per_skill"), budget)
                } else {
                    open_ended_specs(vars.get("errors"), budget)
                };
                json!({ "specs": specs })
            }
            other => return Err(ProviderError::UnknownSchema(other.to_string())),
        })
    }

    fn annotate(&self, call: &ChatCall<'_>, instruction: &str) -> Option<String> {
        let (skill, _) = parse_tag(instruction)?;
        if self.config.confusion_rate <= 0.0 {
            return Some(skill);
        }
        let u = unit_from_hash(self.draw("confuse", call));
        if u >= self.config.confusion_rate {
            return Some(skill);
        }
        let others: Vec<&String> = self.config.label_pool.iter().filter(|l| **l != skill).collect();
        if others.is_empty() {
            return Some(skill);
        }
        let pick = self.draw("confuse-pick", call) % others.len() as u64;
        Some(others[pick as usize].clone())
    }
}

impl ChatBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn chat(&self, call: &ChatCall<'_>) -> Result<String, ProviderError> {
        Ok(self.respond(call)?.to_string())
    }
}

/// Labels sharing a last token (case-insensitive) with at least one other
/// label are grouped under that token; singletons keep their own name. When
/// there are more than `max` groups the smallest are folded into "Other".
pub fn group_by_last_token(labels: &[(String, u64)], max: usize) -> Vec<(String, Vec<String>)> {
    let mut by_token: BTreeMap<String, Vec<&(String, u64)>> = BTreeMap::new();
    for l in labels {
        let token = l.0.split_whitespace().last().unwrap_or("").to_lowercase();
        by_token.entry(token).or_default().push(l);
    }
    let mut groups: Vec<(String, Vec<String>, u64)> = Vec::new();
    for (token, members) in by_token {
        if members.len() >= 2 {
            groups.push((
                token,
                members.iter().map(|m| m.0.clone()).collect(),
                members.iter().map(|m| m.1).sum(),
            ));
        } else {
            for m in members {
                groups.push((m.0.clone(), vec![m.0.clone()], m.1));
            }
        }
    }
    if max >= 1 && groups.len() > max {
        groups.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
        let rest = groups.split_off(max - 1);
        let other: Vec<String> = rest.into_iter().flat_map(|g| g.1).collect();
        groups.push(("Other".to_string(), other, 0));
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    groups.into_iter().map(|(n, m, _)| (n, m)).collect()
}

/// `{skill}::sub{n}` names continuing from the largest existing index.
pub fn mock_subskills(skill: &str, existing: &[String], k: usize) -> Vec<String> {
    let prefix = format!("{skill}::sub");
    let start = existing
        .iter()
        .filter_map(|e| e.strip_prefix(&prefix)?.parse::<u64>().ok())
        .max()
        .unwrap_or(0);
    (1..=k as u64).map(|i| format!("{prefix}{}", start + i)).collect()
}

fn open_ended_specs(errors: Option<&Value>, budget: usize) -> Vec<Value> {
    let errors: Vec<&Value> = errors
        .and_then(Value::as_array)
        .map(|a| a.iter().collect())
        .unwrap_or_default();
    if errors.is_empty() {
        return (0..budget)
            .map(|i| json!({"instruction": format!("Write a review exercise consolidating prior material (#{i}).")}))
            .collect();
    }
    (0..budget)
        .map(|i| {
            let e = errors[i % errors.len()];
            let instruction = e.get("instruction").and_then(Value::as_str).unwrap_or("");
            let mut spec = json!({
                "instruction": format!("Write a new problem similar to: {instruction}"),
            });
            if let Some(skill) = e.get("skill").and_then(Value::as_str) {
                spec["target_skill"] = json!(skill);
            }
            spec
        })
        .collect()
}

fn skill_list_specs(per_skill: Option<&Value>, budget: usize) -> Vec<Value> {
    let rows: Vec<&Value> = per_skill
        .and_then(Value::as_array)
        .map(|a| a.iter().collect())
        .unwrap_or_default();
    let weights: Vec<(String, f64)> = rows
        .iter()
        .filter_map(|r| {
            Some((
                r.get("skill")?.as_str()?.to_string(),
                1.0 - r.get("accuracy").and_then(Value::as_f64).unwrap_or(0.0),
            ))
        })
        .collect();
    let alloc = crate::policy::largest_remainder(&weights, budget as u64);
    let mut specs = Vec::new();
    for row in rows {
        let Some(skill) = row.get("skill").and_then(Value::as_str) else {
            continue;
        };
        let n = alloc.get(skill).copied().unwrap_or(0) as usize;
        let errors: Vec<&str> = row
            .get("errors")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default();
        for i in 0..n {
            let instruction = if errors.is_empty() {
                format!("Write a new problem exercising {skill} (#{i}).")
            } else {
                format!(
                    "Write a new problem exercising {skill}, similar to: {}",
                    errors[i % errors.len()]
                )
            };
            specs.push(json!({"instruction": instruction, "target_skill": skill}));
        }
    }
    specs
}
