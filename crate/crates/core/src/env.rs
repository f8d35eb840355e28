//! The three environments behind one `reset` / `step` interface.
//!
//! Every variant evaluates the student on the validation split and reports
//! overall validation accuracy as the reward. They differ in what the state
//! exposes (raw errors, errors grouped by skill, or a skill forest) and in
//! which actions they accept.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discovery::{Discovered, DiscoveryError, SkillDiscovery};
use crate::engine::{DroppedSpec, Engine, EngineError};
use crate::forest::{ForestCaps, ForestError, GrowReport, ProducedCounts, SkillForest};
use crate::model::{
    Action, Dataset, EnvVariant, EvaluatedPrediction, OpenEndedState, PerformanceReport, SkillListState,
    SkillTreeState, State, TrainingDatum,
};
use crate::student::{evaluate, Checkpoint, Student, StudentError, TrainOptions};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action {action} is not legal in the {variant:?} environment")]
    IllegalAction { action: String, variant: EnvVariant },
    #[error("{specs} specs exceed the per-iteration budget of {budget}")]
    OverBudget { specs: usize, budget: usize },
    #[error("step called before reset")]
    NotReset,
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    Forest(#[from] ForestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SkillSource {
    Discovered { max_categories: usize },
    UserSpecified { skills: Vec<String> },
}

impl Default for SkillSource {
    fn default() -> Self {
        SkillSource::Discovered { max_categories: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub variant: EnvVariant,
    /// Maximum specs per GenerateData action.
    pub budget: usize,
    /// Only meaningful for the skill-tree variant.
    pub caps: ForestCaps,
    pub skill_source: SkillSource,
    /// Training epochs per iteration.
    pub epochs: u32,
    /// Fraction of each iteration's generated data actually trained on.
    pub data_fraction: f64,
}

impl EnvConfig {
    pub fn new(variant: EnvVariant) -> Self {
        EnvConfig {
            variant,
            budget: 500,
            caps: ForestCaps::default(),
            skill_source: SkillSource::default(),
            epochs: 1,
            data_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub report: PerformanceReport,
    /// Accuracy change against the previous evaluation.
    pub delta: f64,
    /// Datums generated this step per skill and subskill ("-" when absent).
    pub manifest: ProducedCounts,
    pub datums_trained: usize,
    pub dropped: Vec<DroppedSpec>,
    pub trained: bool,
    pub checkpoint_id: String,
    /// Accuracy of the pre-training checkpoint on this step's data.
    pub forward_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grow: Option<GrowReport>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: State,
    pub reward: f64,
    pub info: StepInfo,
    pub datums: Vec<TrainingDatum>,
}

struct Runtime {
    skills: Vec<String>,
    discovered: Option<Discovered>,
    assigned: BTreeMap<String, String>,
    forest: SkillForest,
    produced: ProducedCounts,
    checkpoint: Checkpoint,
    predictions: Vec<EvaluatedPrediction>,
    report: PerformanceReport,
    iteration: u32,
}

pub struct Environment {
    config: EnvConfig,
    validation: Dataset,
    discovery: SkillDiscovery,
    engine: Engine,
    student: Box<dyn Student>,
    rt: Option<Runtime>,
}

/// Keep an evenly spread `fraction` of `datums`.
pub fn subsample(datums: Vec<TrainingDatum>, fraction: f64) -> Vec<TrainingDatum> {
    if fraction >= 1.0 {
        return datums;
    }
    let f = fraction.max(0.0);
    datums
        .into_iter()
        .enumerate()
        .filter(|(i, _)| ((*i + 1) as f64 * f).floor() > (*i as f64 * f).floor())
        .map(|(_, d)| d)
        .collect()
}

fn manifest_of(datums: &[TrainingDatum]) -> ProducedCounts {
    let mut m: ProducedCounts = BTreeMap::new();
    for d in datums {
        let skill = d.provenance.skill.clone().unwrap_or_else(|| "-".into());
        let sub = d.provenance.subskill.clone().unwrap_or_else(|| "-".into());
        *m.entry(skill).or_default().entry(sub).or_default() += 1;
    }
    m
}

impl Environment {
    pub fn new(
        config: EnvConfig,
        validation: Dataset,
        discovery: SkillDiscovery,
        engine: Engine,
        student: Box<dyn Student>,
    ) -> Self {
        Environment {
            config,
            validation,
            discovery,
            engine,
            student,
            rt: None,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn validation(&self) -> &Dataset {
        &self.validation
    }

    pub fn student_mut(&mut self) -> &mut dyn Student {
        self.student.as_mut()
    }

    fn rt(&self) -> Result<&Runtime, EnvError> {
        self.rt.as_ref().ok_or(EnvError::NotReset)
    }

    pub fn skills(&self) -> &[String] {
        self.rt.as_ref().map(|r| r.skills.as_slice()).unwrap_or(&[])
    }

    pub fn discovered(&self) -> Option<&Discovered> {
        self.rt.as_ref().and_then(|r| r.discovered.as_ref())
    }

    pub fn assigned(&self) -> BTreeMap<String, String> {
        self.rt.as_ref().map(|r| r.assigned.clone()).unwrap_or_default()
    }

    pub fn forest(&self) -> Option<&SkillForest> {
        self.rt.as_ref().map(|r| &r.forest)
    }

    pub fn checkpoint(&self) -> Option<&Checkpoint> {
        self.rt.as_ref().map(|r| &r.checkpoint)
    }

    pub fn report(&self) -> Option<&PerformanceReport> {
        self.rt.as_ref().map(|r| &r.report)
    }

    pub fn predictions(&self) -> &[EvaluatedPrediction] {
        self.rt.as_ref().map(|r| r.predictions.as_slice()).unwrap_or(&[])
    }

    /// Training iterations completed so far.
    pub fn iteration(&self) -> u32 {
        self.rt.as_ref().map_or(0, |r| r.iteration)
    }

    /// Discover (or assign) skills, evaluate the initial student and build
    /// the first state.
    pub fn reset(&mut self) -> Result<State, EnvError> {
        let checkpoint = self.student.initial_checkpoint()?;
        let (skills, discovered) = match (&self.config.variant, &self.config.skill_source) {
            (EnvVariant::OpenEnded, SkillSource::Discovered { .. }) => (Vec::new(), None),
            (_, SkillSource::UserSpecified { skills }) => {
                let d = self.discovery.assign_to_skills(&self.validation, skills)?;
                (skills.clone(), Some(d))
            }
            (_, SkillSource::Discovered { max_categories }) => {
                let d = self
                    .discovery
                    .clone()
                    .with_max_categories(*max_categories)
                    .discover(&self.validation)?;
                (d.skills.clone(), Some(d))
            }
        };
        let assigned = discovered
            .as_ref()
            .map(|d| d.assignment.assigned())
            .unwrap_or_default();
        let forest = SkillForest::with_skills(&skills, self.config.caps, 0)?;
        let (predictions, report) =
            evaluate(self.student.as_mut(), &checkpoint, &self.validation, &assigned, 0)?;
        self.rt = Some(Runtime {
            skills,
            discovered,
            assigned,
            forest,
            produced: BTreeMap::new(),
            checkpoint,
            predictions,
            report,
            iteration: 0,
        });
        self.state()
    }

    /// The current state for this environment's variant.
    pub fn state(&self) -> Result<State, EnvError> {
        let rt = self.rt()?;
        Ok(match self.config.variant {
            EnvVariant::OpenEnded => State::OpenEnded(OpenEndedState {
                predictions: rt.predictions.clone(),
            }),
            EnvVariant::SkillList => {
                State::SkillList(SkillListState::from_predictions(&rt.predictions, &rt.skills))
            }
            EnvVariant::SkillTree => State::SkillTree(SkillTreeState {
                forest: rt.forest.clone(),
                per_skill_accuracy: rt
                    .skills
                    .iter()
                    .map(|s| {
                        let acc = rt.report.per_skill.get(s).map_or(0.0, |t| t.accuracy());
                        (s.clone(), acc)
                    })
                    .collect(),
            }),
        })
    }

    /// Apply one action. Explore and empty plans do not train; the reward
    /// is then the unchanged validation accuracy.
    pub fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        if !action.legal_in(self.config.variant) {
            return Err(EnvError::IllegalAction {
                action: action.label().into(),
                variant: self.config.variant,
            });
        }
        let next_iteration = self.rt()?.iteration + 1;
        let mut grow = None;
        let (datums, dropped) = match action {
            Action::GenerateData { specs } => {
                if specs.len() > self.config.budget {
                    return Err(EnvError::OverBudget {
                        specs: specs.len(),
                        budget: self.config.budget,
                    });
                }
                if specs.is_empty() {
                    (Vec::new(), Vec::new())
                } else {
                    let out = self.engine.execute_plan(specs, next_iteration)?;
                    (out.datums, out.dropped)
                }
            }
            Action::Explore {
                skill,
                num_new_subskills,
            } => {
                let rt = self.rt()?;
                let existing = rt
                    .forest
                    .tree(skill)
                    .ok_or_else(|| ForestError::UnknownSkill(skill.clone()))?
                    .subskill_names();
                let proposal =
                    self.discovery
                        .propose_subskills(skill, &existing, *num_new_subskills as usize)?;
                if !proposal.names.is_empty() {
                    let (forest, report) = rt.forest.grow_tree(skill, &proposal.names)?;
                    self.rt.as_mut().expect("checked").forest = forest;
                    grow = Some(report);
                }
                (Vec::new(), Vec::new())
            }
            Action::Exploit { skill, deltas } => {
                let rt = self.rt()?;
                let forest = rt.forest.rebalance_tree(skill, deltas)?;
                let quota = forest.materialize_quota(&rt.produced);
                let out = self.engine.execute_forest(&quota, next_iteration)?;
                let rt = self.rt.as_mut().expect("checked");
                rt.forest = forest;
                for d in &out.datums {
                    if let (Some(s), Some(ss)) = (&d.provenance.skill, &d.provenance.subskill) {
                        *rt.produced
                            .entry(s.clone())
                            .or_default()
                            .entry(ss.clone())
                            .or_default() += 1;
                    }
                }
                (out.datums, out.dropped)
            }
        };
        self.train_on(datums, dropped, grow, next_iteration)
    }

    fn train_on(
        &mut self,
        datums: Vec<TrainingDatum>,
        dropped: Vec<DroppedSpec>,
        grow: Option<GrowReport>,
        next_iteration: u32,
    ) -> Result<StepOutcome, EnvError> {
        let manifest = manifest_of(&datums);
        let train_set = subsample(datums.clone(), self.config.data_fraction);
        let rt = self.rt.as_ref().ok_or(EnvError::NotReset)?;
        let before = rt.report.overall_accuracy;
        if train_set.is_empty() {
            let info = StepInfo {
                report: rt.report.clone(),
                delta: 0.0,
                manifest,
                datums_trained: 0,
                dropped,
                trained: false,
                checkpoint_id: rt.checkpoint.checkpoint_id.clone(),
                forward_accuracy: None,
                grow,
            };
            return Ok(StepOutcome {
                state: self.state()?,
                reward: before,
                info,
                datums,
            });
        }
        let old = rt.checkpoint.clone();
        let assigned = rt.assigned.clone();
        let forward = self.student.score_datums(&old, &train_set)?;
        let ckpt = self.student.train(
            &old,
            &train_set,
            TrainOptions {
                iteration: next_iteration,
                epochs: self.config.epochs,
            },
        )?;
        let (predictions, report) = evaluate(
            self.student.as_mut(),
            &ckpt,
            &self.validation,
            &assigned,
            next_iteration,
        )?;

        let mut forest = self.rt()?.forest.clone();
        if self.config.variant == EnvVariant::SkillTree {
            let mut groups: BTreeMap<(String, String), Vec<TrainingDatum>> = BTreeMap::new();
            for d in &train_set {
                if let (Some(s), Some(ss)) = (&d.provenance.skill, &d.provenance.subskill) {
                    groups.entry((s.clone(), ss.clone())).or_default().push(d.clone());
                }
            }
            for ((s, ss), ds) in groups {
                if let Some(acc) = self.student.score_datums(&ckpt, &ds)? {
                    if forest.tree(&s).and_then(|t| t.subskill(&ss)).is_some() {
                        forest = forest.set_training_performance(&s, &ss, acc.clamp(0.0, 1.0))?;
                    }
                }
            }
        }

        let rt = self.rt.as_mut().expect("checked");
        rt.forest = forest;
        rt.checkpoint = ckpt;
        rt.predictions = predictions;
        rt.report = report;
        rt.iteration = next_iteration;
        let info = StepInfo {
            report: rt.report.clone(),
            delta: rt.report.overall_accuracy - before,
            manifest,
            datums_trained: train_set.len(),
            dropped,
            trained: true,
            checkpoint_id: rt.checkpoint.checkpoint_id.clone(),
            forward_accuracy: forward,
            grow,
        };
        let reward = rt.report.overall_accuracy;
        Ok(StepOutcome {
            state: self.state()?,
            reward,
            info,
            datums,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_spreads_evenly() {
        let d: Vec<TrainingDatum> = (0..10)
            .map(|i| TrainingDatum {
                instruction: i.to_string(),
                response: "r".into(),
                media_ref: None,
                provenance: crate::model::Provenance {
                    iteration: 1,
                    skill: None,
                    subskill: None,
                    spec_digest: String::new(),
                },
            })
            .collect();
        let kept: Vec<String> = subsample(d.clone(), 0.2)
            .into_iter()
            .map(|d| d.instruction)
            .collect();
        assert_eq!(kept, vec!["4", "9"]);
        assert_eq!(subsample(d, 1.0).len(), 10);
    }
}
