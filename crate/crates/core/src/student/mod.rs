//! Train and evaluate: the simulated student, the evaluator, and the client
//! side of the external-trainer protocol.

pub mod protocol;
pub mod simulated;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    compare_answers, ComparisonMode, Dataset, EvaluatedPrediction, ModelError, PerformanceReport, TaskItem,
    TrainingDatum,
};

pub use protocol::{ProtocolStudent, Transport};
pub use simulated::{SimParams, SimStudent};

#[derive(Debug, Error)]
pub enum StudentError {
    #[error("trainer unavailable: {0}")]
    TrainerUnavailable(String),
    #[error("trainer error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("item {item_id} references unknown subskill {subskill:?}")]
    UnknownSubskill {
        item_id: String,
        subskill: Option<String>,
    },
    #[error("checkpoint {0} does not belong to this student")]
    ForeignCheckpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubskillState {
    /// Effective number of datums seen, after epoch scaling.
    pub exposure: f64,
    pub proficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CheckpointState {
    Simulated {
        subskills: BTreeMap<String, SubskillState>,
    },
    External {
        handle: Option<String>,
    },
}

/// An immutable student snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub checkpoint_id: String,
    pub iteration: u32,
    pub state: CheckpointState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub iteration: u32,
    pub epochs: u32,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            iteration: 0,
            epochs: 1,
        }
    }
}

pub trait Student: Send {
    fn initial_checkpoint(&mut self) -> Result<Checkpoint, StudentError>;

    /// Train from `checkpoint` on `datums`. Empty data returns the input
    /// checkpoint unchanged.
    fn train(
        &mut self,
        checkpoint: &Checkpoint,
        datums: &[TrainingDatum],
        options: TrainOptions,
    ) -> Result<Checkpoint, StudentError>;

    /// One answer per item, in item order.
    fn predict(&mut self, checkpoint: &Checkpoint, items: &[TaskItem]) -> Result<Vec<String>, StudentError>;

    /// Accuracy on generated datums treated as question/answer items.
    /// `None` when no datum can be scored.
    fn score_datums(
        &mut self,
        checkpoint: &Checkpoint,
        datums: &[TrainingDatum],
    ) -> Result<Option<f64>, StudentError> {
        if datums.is_empty() {
            return Ok(None);
        }
        let items: Vec<TaskItem> = datums
            .iter()
            .enumerate()
            .map(|(i, d)| TaskItem {
                item_id: format!("datum-{i}"),
                instruction: d.instruction.clone(),
                media_ref: d.media_ref.clone(),
                gold_answer: d.response.clone(),
                difficulty: None,
                true_skill: d.provenance.skill.clone(),
                true_subskill: d.provenance.subskill.clone(),
                latent_pass_threshold: None,
            })
            .collect();
        let answers = self.predict(checkpoint, &items)?;
        let mut correct = 0usize;
        for (a, item) in answers.iter().zip(&items) {
            if compare_answers(a, &item.gold_answer, ComparisonMode::ExactMatchNormalized)? {
                correct += 1;
            }
        }
        Ok(Some(correct as f64 / items.len() as f64))
    }
}

/// Score a checkpoint on a dataset. `assigned` supplies each item's skill
/// label when skills were discovered.
pub fn evaluate(
    student: &mut dyn Student,
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    assigned: &BTreeMap<String, String>,
    iteration: u32,
) -> Result<(Vec<EvaluatedPrediction>, PerformanceReport), StudentError> {
    let answers = student.predict(checkpoint, &dataset.items)?;
    if answers.len() != dataset.items.len() {
        return Err(StudentError::Protocol(format!(
            "expected {} predictions, got {}",
            dataset.items.len(),
            answers.len()
        )));
    }
    let mode = dataset.domain.comparison;
    let mut predictions = Vec::with_capacity(answers.len());
    for (item, answer) in dataset.items.iter().zip(answers) {
        let correct = compare_answers(&answer, &item.gold_answer, mode)?;
        predictions.push(EvaluatedPrediction {
            item_id: item.item_id.clone(),
            predicted_answer: answer,
            correct,
            assigned_skill: assigned.get(&item.item_id).cloned(),
            iteration,
        });
    }
    let report = PerformanceReport::from_predictions(iteration, dataset, &predictions);
    Ok((predictions, report))
}
