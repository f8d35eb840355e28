//! Baseline data-generation policies.

use std::collections::BTreeMap;
use std::io::Write;
use std::process::{Command, Stdio};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical::hash_u64;
use crate::forest::{ForestCaps, SkillForest};
use crate::model::{
    Action, DataSpec, EnvVariant, EvaluatedPrediction, OpenEndedState, SkillBucket, SkillListState, State,
    TaskDomainId, TaskItem, UNCATEGORIZED,
};
use crate::provider::schema::ids;
use crate::provider::{CompletionRequest, LlmClient, ProviderError};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("policy {policy} cannot act on a {got:?} state")]
    WrongState { policy: String, got: EnvVariant },
    #[error("data budget must be at least 1")]
    ZeroBudget,
    #[error("external policy: {0}")]
    External(String),
}

/// What a policy may look at besides the state.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub budget: usize,
    pub domain: TaskDomainId,
    pub caps: ForestCaps,
    /// Lookup for the items referenced by predictions in the state.
    pub items: &'a BTreeMap<String, TaskItem>,
}

pub trait Policy: Send {
    fn name(&self) -> String;
    fn act(&mut self, state: &State, ctx: &PolicyContext<'_>) -> Result<Action, PolicyError>;
}

/// Split `total` in proportion to `weights` with largest-remainder rounding.
/// Remainder ties go to the earlier name. Negative weights count as zero;
/// if every weight is zero the split is uniform.
pub fn largest_remainder(weights: &[(String, f64)], total: u64) -> BTreeMap<String, u64> {
    let mut rows: Vec<(String, f64)> = weights.iter().map(|(k, w)| (k.clone(), w.max(0.0))).collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    if rows.is_empty() {
        return BTreeMap::new();
    }
    let mut sum: f64 = rows.iter().map(|r| r.1).sum();
    if sum <= 0.0 {
        for r in &mut rows {
            r.1 = 1.0;
        }
        sum = rows.len() as f64;
    }
    let quotas: Vec<f64> = rows.iter().map(|r| r.1 * total as f64 / sum).collect();
    let mut alloc: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = alloc.iter().sum();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    // Remainders are compared after rounding to 1e-9 so that equal shares
    // computed with different rounding noise still tie.
    let key = |i: usize| ((quotas[i] - quotas[i].floor()) * 1e9).round() as u64;
    order.sort_by(|&a, &b| key(b).cmp(&key(a)).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned) as usize) {
        alloc[i] += 1;
    }
    rows.into_iter().map(|r| r.0).zip(alloc).collect()
}

fn specs_from_payload(payload: &Value, domain: TaskDomainId, budget: usize) -> Vec<DataSpec> {
    payload["specs"]
        .as_array()
        .into_iter()
        .flatten()
        .take(budget)
        .map(|s| {
            DataSpec::new(domain, s["instruction"].as_str().unwrap_or_default()).targeting(
                s["target_skill"].as_str().map(String::from),
                s["target_subskill"].as_str().map(String::from),
            )
        })
        .collect()
}

fn domain_name(d: TaskDomainId) -> String {
    serde_json::to_value(d)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// Verbalizes the error list and asks the provider for specs.
#[derive(Debug, Clone)]
pub struct OpenEndedPolicy {
    llm: LlmClient,
    pub error_sample_cap: usize,
}

impl OpenEndedPolicy {
    pub fn new(llm: LlmClient) -> Self {
        OpenEndedPolicy {
            llm,
            error_sample_cap: 50,
        }
    }

    /// Up to `cap` incorrect predictions, taken round-robin across assigned
    /// skills (name order) so no skill crowds out the rest.
    pub fn sample_errors(predictions: &[EvaluatedPrediction], cap: usize) -> Vec<&EvaluatedPrediction> {
        let mut groups: BTreeMap<Option<&str>, Vec<&EvaluatedPrediction>> = BTreeMap::new();
        for p in predictions.iter().filter(|p| !p.correct) {
            groups.entry(p.assigned_skill.as_deref()).or_default().push(p);
        }
        let mut out = Vec::new();
        let mut round = 0;
        while out.len() < cap {
            let mut any = false;
            for g in groups.values() {
                if let Some(p) = g.get(round) {
                    any = true;
                    if out.len() < cap {
                        out.push(*p);
                    }
                }
            }
            if !any {
                break;
            }
            round += 1;
        }
        out
    }
}

impl Policy for OpenEndedPolicy {
    fn name(&self) -> String {
        "open-ended".into()
    }

    fn act(&mut self, state: &State, ctx: &PolicyContext<'_>) -> Result<Action, PolicyError> {
        let State::OpenEnded(OpenEndedState { predictions }) = state else {
            return Err(PolicyError::WrongState {
                policy: self.name(),
                got: state.kind(),
            });
        };
        if ctx.budget == 0 {
            return Err(PolicyError::ZeroBudget);
        }
        let errors: Vec<Value> = Self::sample_errors(predictions, self.error_sample_cap)
            .into_iter()
            .map(|p| {
                let item = ctx.items.get(&p.item_id);
                let mut e = json!({
                    "instruction": item.map(|i| i.instruction.as_str()).unwrap_or(""),
                    "student_answer": p.predicted_answer,
                    "gold_answer": item.map(|i| i.gold_answer.as_str()).unwrap_or(""),
                });
                if let Some(s) = &p.assigned_skill {
                    e["skill"] = json!(s);
                }
                e
            })
            .collect();
        let id = self
            .llm
            .templates()
            .resolve("policy.open-ended", &domain_name(ctx.domain));
        let req = CompletionRequest::new(id, ids::DATA_SPECS)
            .var("domain", domain_name(ctx.domain))
            .var("errors", errors)
            .var("budget", ctx.budget as u64);
        let r = self.llm.complete(&req)?;
        Ok(Action::GenerateData {
            specs: specs_from_payload(&r.payload, ctx.domain, ctx.budget),
        })
    }
}

/// Shows per-skill accuracy plus sample errors; every spec is pinned to a
/// known skill.
#[derive(Debug, Clone)]
pub struct SkillListPolicy {
    llm: LlmClient,
    pub errors_per_skill: usize,
    /// Specs whose target skill was unknown and got remapped, across calls.
    pub remapped: usize,
}

impl SkillListPolicy {
    pub fn new(llm: LlmClient) -> Self {
        SkillListPolicy {
            llm,
            errors_per_skill: 5,
            remapped: 0,
        }
    }
}

impl Policy for SkillListPolicy {
    fn name(&self) -> String {
        "skill-list".into()
    }

    fn act(&mut self, state: &State, ctx: &PolicyContext<'_>) -> Result<Action, PolicyError> {
        let State::SkillList(SkillListState { per_skill }) = state else {
            return Err(PolicyError::WrongState {
                policy: self.name(),
                got: state.kind(),
            });
        };
        if ctx.budget == 0 {
            return Err(PolicyError::ZeroBudget);
        }
        let rows: Vec<Value> = per_skill
            .iter()
            .map(|(skill, bucket)| {
                let errors: Vec<&str> = bucket
                    .predictions
                    .iter()
                    .filter(|p| !p.correct)
                    .take(self.errors_per_skill)
                    .map(|p| {
                        ctx.items
                            .get(&p.item_id)
                            .map(|i| i.instruction.as_str())
                            .unwrap_or("")
                    })
                    .collect();
                json!({"skill": skill, "accuracy": bucket.accuracy, "errors": errors})
            })
            .collect();
        let id = self
            .llm
            .templates()
            .resolve("policy.skill-list", &domain_name(ctx.domain));
        let req = CompletionRequest::new(id, ids::DATA_SPECS)
            .var("domain", domain_name(ctx.domain))
            .var("per_skill", rows)
            .var("budget", ctx.budget as u64);
        let r = self.llm.complete(&req)?;
        let mut specs = specs_from_payload(&r.payload, ctx.domain, ctx.budget);
        for s in &mut specs {
            let known = s.target_skill.as_ref().is_some_and(|t| per_skill.contains_key(t));
            if !known {
                s.target_skill = Some(UNCATEGORIZED.to_string());
                s.target_subskill = None;
                self.remapped += 1;
            }
        }
        Ok(Action::GenerateData { specs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HandcraftedConfig {
    pub k_new: u32,
    /// Growth starts with Explore on a tree's first visit.
    pub start_with_explore: bool,
}

impl Default for HandcraftedConfig {
    fn default() -> Self {
        HandcraftedConfig {
            k_new: 2,
            start_with_explore: true,
        }
    }
}

/// Grow each tree to the subskill limit, alternating Explore with resetting
/// allocations, then fill every subskill to the cap in per-action steps.
/// Trees are serviced round-robin in name order.
#[derive(Debug, Clone, Default)]
pub struct HandcraftedTreePolicy {
    pub config: HandcraftedConfig,
    visits: BTreeMap<String, u32>,
    last: Option<String>,
}

impl HandcraftedTreePolicy {
    pub fn new(config: HandcraftedConfig) -> Self {
        HandcraftedTreePolicy {
            config,
            visits: BTreeMap::new(),
            last: None,
        }
    }

    fn tree_done(forest: &SkillForest, skill: &str) -> bool {
        forest.tree(skill).is_some_and(|t| {
            t.subskills.len() >= forest.max_subskills_per_tree
                && t.subskills
                    .iter()
                    .all(|s| s.data_allocation >= forest.per_subskill_cap)
        })
    }

    /// Next action for a forest.
    pub fn next_action(&mut self, forest: &SkillForest) -> Action {
        let mut names = forest.skill_names();
        names.sort();
        let start = match &self.last {
            Some(l) => names.iter().position(|n| n > l).unwrap_or(0),
            None => 0,
        };
        let pick = (0..names.len())
            .map(|i| &names[(start + i) % names.len()])
            .find(|n| !Self::tree_done(forest, n))
            .cloned();
        let Some(skill) = pick else {
            return noop_exploit(forest, names.first().map(String::as_str).unwrap_or(""));
        };
        self.last = Some(skill.clone());
        let tree = forest.tree(&skill).expect("picked from forest");
        let count = tree.subskills.len();
        let max = forest.max_subskills_per_tree;
        if count < max {
            let v = self.visits.entry(skill.clone()).or_default();
            let explore_turn = (*v).is_multiple_of(2) == self.config.start_with_explore;
            *v += 1;
            if explore_turn {
                let room = (max - count) as u32;
                return Action::Explore {
                    skill,
                    num_new_subskills: self.config.k_new.max(1).min(room),
                };
            }
            let deltas = tree
                .subskills
                .iter()
                .map(|s| (s.subskill_name.clone(), -(s.data_allocation as i64)))
                .collect();
            return Action::Exploit { skill, deltas };
        }
        let deltas = tree
            .subskills
            .iter()
            .map(|s| {
                let room = forest.per_subskill_cap.saturating_sub(s.data_allocation);
                (s.subskill_name.clone(), room.min(forest.per_action_cap) as i64)
            })
            .collect();
        Action::Exploit { skill, deltas }
    }
}

/// All-zero exploit on `skill`; the runner's termination signal once the
/// forest is full.
pub fn noop_exploit(forest: &SkillForest, skill: &str) -> Action {
    let deltas = forest
        .tree(skill)
        .map(|t| t.subskills.iter().map(|s| (s.subskill_name.clone(), 0)).collect())
        .unwrap_or_default();
    Action::Exploit {
        skill: skill.to_string(),
        deltas,
    }
}

impl Policy for HandcraftedTreePolicy {
    fn name(&self) -> String {
        "handcrafted".into()
    }

    fn act(&mut self, state: &State, _ctx: &PolicyContext<'_>) -> Result<Action, PolicyError> {
        match state {
            State::SkillTree(s) => Ok(self.next_action(&s.forest)),
            other => Err(PolicyError::WrongState {
                policy: self.name(),
                got: other.kind(),
            }),
        }
    }
}

/// Skill-tree ablation without state: a uniformly chosen tree, then
/// Explore or Exploit with probability one half each.
#[derive(Debug, Clone)]
pub struct RandomTreePolicy {
    rng: ChaCha8Rng,
    pub k_new: u32,
}

impl RandomTreePolicy {
    pub fn new(seed: u64, k_new: u32) -> Self {
        RandomTreePolicy {
            rng: ChaCha8Rng::seed_from_u64(hash_u64(&[b"random-tree", &seed.to_le_bytes()])),
            k_new: k_new.max(1),
        }
    }

    pub fn next_action(&mut self, forest: &SkillForest) -> Action {
        let mut names = forest.skill_names();
        names.sort();
        if names.is_empty() {
            return noop_exploit(forest, "");
        }
        let skill = names[self.rng.gen_range(0..names.len())].clone();
        let explore = self.rng.gen_bool(0.5);
        let tree = forest.tree(&skill).expect("chosen from forest");
        if explore {
            let room = forest.max_subskills_per_tree.saturating_sub(tree.subskills.len()) as u32;
            if room == 0 {
                return noop_exploit(forest, &skill);
            }
            return Action::Explore {
                skill,
                num_new_subskills: self.k_new.min(room),
            };
        }
        if tree.subskills.is_empty() {
            return noop_exploit(forest, &skill);
        }
        let sub = &tree.subskills[self.rng.gen_range(0..tree.subskills.len())];
        let room = forest.per_subskill_cap.saturating_sub(sub.data_allocation);
        let mut deltas: BTreeMap<String, i64> = BTreeMap::new();
        deltas.insert(sub.subskill_name.clone(), room.min(forest.per_action_cap) as i64);
        Action::Exploit { skill, deltas }
    }
}

impl Policy for RandomTreePolicy {
    fn name(&self) -> String {
        "no-state-random".into()
    }

    fn act(&mut self, state: &State, _ctx: &PolicyContext<'_>) -> Result<Action, PolicyError> {
        match state {
            State::SkillTree(s) => Ok(self.next_action(&s.forest)),
            other => Err(PolicyError::WrongState {
                policy: self.name(),
                got: other.kind(),
            }),
        }
    }
}

/// Hides student feedback from a direct-generation policy by replacing its
/// error lists with random training samples (all marked incorrect, every
/// skill at accuracy 0).
pub struct NoStateMask<P: Policy> {
    inner: P,
    pool: Vec<String>,
    samples: usize,
    rng: ChaCha8Rng,
}

impl<P: Policy> NoStateMask<P> {
    /// `pool` holds item ids of training items, which must be present in
    /// the context's item lookup.
    pub fn new(inner: P, pool: Vec<String>, samples: usize, seed: u64) -> Self {
        NoStateMask {
            inner,
            pool,
            samples,
            rng: ChaCha8Rng::seed_from_u64(hash_u64(&[b"no-state-mask", &seed.to_le_bytes()])),
        }
    }

    fn draw(&mut self, n: usize, iteration: u32) -> Vec<EvaluatedPrediction> {
        self.pool
            .choose_multiple(&mut self.rng, n.min(self.pool.len()))
            .map(|id| EvaluatedPrediction {
                item_id: id.clone(),
                predicted_answer: String::new(),
                correct: false,
                assigned_skill: None,
                iteration,
            })
            .collect()
    }

    pub fn mask(&mut self, state: &State) -> State {
        match state {
            State::OpenEnded(s) => {
                let it = s.predictions.first().map_or(0, |p| p.iteration);
                State::OpenEnded(OpenEndedState {
                    predictions: self.draw(self.samples, it),
                })
            }
            State::SkillList(s) => {
                let it = s
                    .per_skill
                    .values()
                    .flat_map(|b| b.predictions.first())
                    .map(|p| p.iteration)
                    .next()
                    .unwrap_or(0);
                let skills: Vec<String> = s.per_skill.keys().cloned().collect();
                let per = (self.samples / skills.len().max(1)).max(1);
                let per_skill = skills
                    .into_iter()
                    .map(|k| {
                        let mut preds = self.draw(per, it);
                        for p in &mut preds {
                            p.assigned_skill = Some(k.clone());
                        }
                        let mut b = SkillBucket::new(preds);
                        b.accuracy = 0.0;
                        (k, b)
                    })
                    .collect();
                State::SkillList(SkillListState { per_skill })
            }
            other => other.clone(),
        }
    }
}

impl<P: Policy> Policy for NoStateMask<P> {
    fn name(&self) -> String {
        format!("no-state({})", self.inner.name())
    }

    fn act(&mut self, state: &State, ctx: &PolicyContext<'_>) -> Result<Action, PolicyError> {
        let masked = self.mask(state);
        self.inner.act(&masked, ctx)
    }
}

/// A policy in another process: the state goes in as one JSON document on
/// stdin, the action comes back as one JSON document on stdout.
#[derive(Debug, Clone)]
pub struct ExternalPolicy {
    pub command: Vec<String>,
}

impl Policy for ExternalPolicy {
    fn name(&self) -> String {
        format!("external({})", self.command.join(" "))
    }

    fn act(&mut self, state: &State, _ctx: &PolicyContext<'_>) -> Result<Action, PolicyError> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| PolicyError::External("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| PolicyError::External(format!("{program}: {e}")))?;
        let body = serde_json::to_vec(state).expect("states serialize");
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(&body)
            .map_err(|e| PolicyError::External(e.to_string()))?;
        let out = child
            .wait_with_output()
            .map_err(|e| PolicyError::External(e.to_string()))?;
        if !out.status.success() {
            return Err(PolicyError::External(format!("exited with {}", out.status)));
        }
        serde_json::from_slice(&out.stdout)
            .map_err(|e| PolicyError::External(format!("bad action JSON: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn apportionment_examples() {
        let a = largest_remainder(&w(&[("A", 0.2), ("B", 0.4), ("C", 0.6)]), 10);
        assert_eq!((a["A"], a["B"], a["C"]), (2, 3, 5));
        let a = largest_remainder(&w(&[("A", 0.0), ("B", 1.0)]), 10);
        assert_eq!((a["A"], a["B"]), (0, 10));
        let a = largest_remainder(&w(&[("A", 0.5), ("B", 0.5)]), 10);
        assert_eq!((a["A"], a["B"]), (5, 5));
        let a = largest_remainder(&w(&[("B", 0.0), ("A", 0.0)]), 3);
        assert_eq!((a["A"], a["B"]), (2, 1));
    }

    #[test]
    fn handcrafted_first_moves() {
        let f = SkillForest::with_skills(
            &["Algebra"],
            ForestCaps {
                per_action_cap: 100,
                per_subskill_cap: 300,
                max_subskills_per_tree: 4,
            },
            0,
        )
        .unwrap();
        let mut p = HandcraftedTreePolicy::default();
        assert_eq!(
            p.next_action(&f),
            Action::Explore {
                skill: "Algebra".into(),
                num_new_subskills: 2
            }
        );
    }

    #[test]
    fn random_tree_is_seeded() {
        let f = SkillForest::with_skills(&["A", "B"], ForestCaps::default(), 0).unwrap();
        let run = |seed| {
            let mut p = RandomTreePolicy::new(seed, 2);
            (0..20).map(|_| p.next_action(&f)).collect::<Vec<_>>()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }
}
