//! Shared domain vocabulary: tasks, items, predictions, plans, datums,
//! states, actions and performance reports.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{digest, hash_u64};
use crate::forest::SkillForest;
use crate::num::Scalar;

/// Label used for items the annotator could not place.
pub const UNCATEGORIZED: &str = "Uncategorized";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("comparison mode {0:?} is not supported in-process")]
    NotSupported(ComparisonMode),
    #[error("comparison mode {mode:?} does not belong to domain {domain:?}")]
    ModeMismatch {
        mode: ComparisonMode,
        domain: TaskDomainId,
    },
    #[error("cannot parse {0:?} as a proficiency value")]
    BadNumber(String),
    #[error("stratum {stratum:?} has {available} items, {required} required")]
    UnderstockedStratum {
        stratum: String,
        available: usize,
        required: usize,
    },
    #[error("duplicate item id {0:?}")]
    DuplicateItem(String),
    #[error("item {item_id:?}: {message}")]
    InvalidItem { item_id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskDomainId {
    Math,
    Vqa,
    Code,
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComparisonMode {
    ExactMatchNormalized,
    BooleanString,
    TestExecutionStub,
    ProficiencyThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDomain {
    pub id: TaskDomainId,
    pub comparison: ComparisonMode,
}

impl TaskDomain {
    pub fn new(id: TaskDomainId) -> Self {
        let comparison = match id {
            TaskDomainId::Math => ComparisonMode::ExactMatchNormalized,
            TaskDomainId::Vqa => ComparisonMode::ExactMatchNormalized,
            TaskDomainId::Code => ComparisonMode::TestExecutionStub,
            TaskDomainId::Simulated => ComparisonMode::ProficiencyThreshold,
        };
        TaskDomain { id, comparison }
    }

    pub fn with_mode(id: TaskDomainId, comparison: ComparisonMode) -> Result<Self, ModelError> {
        let d = TaskDomain { id, comparison };
        if d.allows(comparison) {
            Ok(d)
        } else {
            Err(ModelError::ModeMismatch {
                mode: comparison,
                domain: id,
            })
        }
    }

    pub fn allows(&self, mode: ComparisonMode) -> bool {
        use ComparisonMode::*;
        match self.id {
            TaskDomainId::Math => matches!(mode, ExactMatchNormalized),
            TaskDomainId::Vqa => matches!(mode, ExactMatchNormalized | BooleanString),
            TaskDomainId::Code => matches!(mode, TestExecutionStub | ExactMatchNormalized),
            TaskDomainId::Simulated => matches!(mode, ProficiencyThreshold),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskItem {
    pub item_id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_ref: Option<String>,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_skill: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_subskill: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_pass_threshold: Option<f64>,
}

/// A list of items that all belong to one task domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub domain: TaskDomain,
    pub items: Vec<TaskItem>,
}

impl Dataset {
    pub fn new(domain: TaskDomain, items: Vec<TaskItem>) -> Result<Self, ModelError> {
        let ds = Dataset { domain, items };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if !seen.insert(item.item_id.as_str()) {
                return Err(ModelError::DuplicateItem(item.item_id.clone()));
            }
            if let Some(d) = item.difficulty {
                if !(1..=5).contains(&d) {
                    return Err(ModelError::InvalidItem {
                        item_id: item.item_id.clone(),
                        message: format!("difficulty {d} outside 1..=5"),
                    });
                }
            }
            if self.domain.id == TaskDomainId::Math && item.difficulty.is_none() {
                return Err(ModelError::InvalidItem {
                    item_id: item.item_id.clone(),
                    message: "math items carry a difficulty".into(),
                });
            }
            if let Some(t) = item.latent_pass_threshold {
                if !(0.0..1.0).contains(&t) {
                    return Err(ModelError::InvalidItem {
                        item_id: item.item_id.clone(),
                        message: format!("latent threshold {t} outside [0, 1)"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn digest(&self) -> String {
        digest(self)
    }

    pub fn get(&self, item_id: &str) -> Option<&TaskItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn index(&self) -> BTreeMap<&str, &TaskItem> {
        self.items.iter().map(|i| (i.item_id.as_str(), i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatedPrediction {
    pub item_id: String,
    pub predicted_answer: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_skill: Option<String>,
    pub iteration: u32,
}

/// One plan item emitted by a policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSpec {
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_skill: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_subskill: Option<String>,
    pub domain: TaskDomainId,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub rendering_hints: BTreeMap<String, String>,
}

impl DataSpec {
    pub fn new(domain: TaskDomainId, instruction: impl Into<String>) -> Self {
        DataSpec {
            instruction: instruction.into(),
            target_skill: None,
            target_subskill: None,
            domain,
            rendering_hints: BTreeMap::new(),
        }
    }

    pub fn targeting(mut self, skill: Option<String>, subskill: Option<String>) -> Self {
        self.target_skill = skill;
        self.target_subskill = subskill;
        self
    }

    pub fn digest(&self) -> String {
        digest(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub iteration: u32,
    pub skill: Option<String>,
    pub subskill: Option<String>,
    pub spec_digest: String,
}

/// An instruction/response training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingDatum {
    pub instruction: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_ref: Option<String>,
    pub provenance: Provenance,
}

impl TrainingDatum {
    pub fn digest(&self) -> String {
        digest(self)
    }
}

/// Correct / total counts; accuracies are derived, never stored rounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: u64,
    pub total: u64,
}

impl Tally {
    pub fn record(&mut self, correct: bool) {
        self.total += 1;
        if correct {
            self.correct += 1;
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn accuracy_as<T: Scalar>(&self) -> T {
        if self.total == 0 {
            T::zero()
        } else {
            T::ratio(self.correct as i64, self.total as i64)
        }
    }
}

/// Unit-width difficulty bin `[k, k+1)` for `k` in 1..=5.
pub fn difficulty_bin(difficulty: f64) -> Option<u8> {
    if difficulty.is_finite() && (1.0..6.0).contains(&difficulty) {
        Some(difficulty.floor() as u8)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub iteration: u32,
    pub overall: Tally,
    pub overall_accuracy: f64,
    /// Keyed by assigned skill, falling back to the hidden tag when present.
    pub per_skill: BTreeMap<String, Tally>,
    /// Hidden-subskill tallies; empty for datasets without hidden tags.
    #[serde(default)]
    pub per_subskill: BTreeMap<String, Tally>,
    pub per_difficulty_bin: BTreeMap<u8, Tally>,
}

impl PerformanceReport {
    pub fn from_predictions(iteration: u32, dataset: &Dataset, predictions: &[EvaluatedPrediction]) -> Self {
        let index = dataset.index();
        let mut overall = Tally::default();
        let mut per_skill: BTreeMap<String, Tally> = BTreeMap::new();
        let mut per_subskill: BTreeMap<String, Tally> = BTreeMap::new();
        let mut per_bin: BTreeMap<u8, Tally> = BTreeMap::new();
        for p in predictions {
            overall.record(p.correct);
            let item = index.get(p.item_id.as_str());
            let skill = p
                .assigned_skill
                .clone()
                .or_else(|| item.and_then(|i| i.true_skill.clone()));
            if let Some(s) = skill {
                per_skill.entry(s).or_default().record(p.correct);
            }
            if let Some(item) = item {
                if let Some(sub) = &item.true_subskill {
                    per_subskill.entry(sub.clone()).or_default().record(p.correct);
                }
                if let Some(bin) = item.difficulty.and_then(|d| difficulty_bin(d as f64)) {
                    per_bin.entry(bin).or_default().record(p.correct);
                }
            }
        }
        PerformanceReport {
            iteration,
            overall,
            overall_accuracy: overall.accuracy(),
            per_skill,
            per_subskill,
            per_difficulty_bin: per_bin,
        }
    }

    pub fn skill_accuracy(&self) -> BTreeMap<String, f64> {
        self.per_skill
            .iter()
            .map(|(k, t)| (k.clone(), t.accuracy()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillBucket {
    pub predictions: Vec<EvaluatedPrediction>,
    pub accuracy: f64,
}

impl SkillBucket {
    pub fn new(predictions: Vec<EvaluatedPrediction>) -> Self {
        let mut t = Tally::default();
        for p in &predictions {
            t.record(p.correct);
        }
        SkillBucket {
            predictions,
            accuracy: t.accuracy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenEndedState {
    pub predictions: Vec<EvaluatedPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillListState {
    pub per_skill: BTreeMap<String, SkillBucket>,
}

impl SkillListState {
    /// Partition predictions by their assigned skill.
    pub fn from_predictions(predictions: &[EvaluatedPrediction], skills: &[String]) -> Self {
        let mut grouped: BTreeMap<String, Vec<EvaluatedPrediction>> =
            skills.iter().map(|s| (s.clone(), Vec::new())).collect();
        for p in predictions {
            let key = p
                .assigned_skill
                .clone()
                .unwrap_or_else(|| UNCATEGORIZED.to_string());
            grouped.entry(key).or_default().push(p.clone());
        }
        SkillListState {
            per_skill: grouped
                .into_iter()
                .map(|(k, v)| (k, SkillBucket::new(v)))
                .collect(),
        }
    }

    pub fn total_correct(&self) -> u64 {
        self.per_skill
            .values()
            .flat_map(|b| b.predictions.iter())
            .filter(|p| p.correct)
            .count() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillTreeState {
    pub forest: SkillForest,
    pub per_skill_accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum State {
    OpenEnded(OpenEndedState),
    SkillList(SkillListState),
    SkillTree(SkillTreeState),
}

impl State {
    pub fn digest(&self) -> String {
        digest(self)
    }

    pub fn kind(&self) -> EnvVariant {
        match self {
            State::OpenEnded(_) => EnvVariant::OpenEnded,
            State::SkillList(_) => EnvVariant::SkillList,
            State::SkillTree(_) => EnvVariant::SkillTree,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvVariant {
    OpenEnded,
    SkillList,
    SkillTree,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Action {
    GenerateData {
        specs: Vec<DataSpec>,
    },
    Explore {
        skill: String,
        num_new_subskills: u32,
    },
    Exploit {
        skill: String,
        deltas: BTreeMap<String, i64>,
    },
}

impl Action {
    pub fn legal_in(&self, variant: EnvVariant) -> bool {
        match self {
            Action::GenerateData { .. } => {
                matches!(variant, EnvVariant::OpenEnded | EnvVariant::SkillList)
            }
            Action::Explore { .. } | Action::Exploit { .. } => variant == EnvVariant::SkillTree,
        }
    }

    /// An exploit whose deltas are all zero.
    pub fn is_noop_exploit(&self) -> bool {
        matches!(self, Action::Exploit { deltas, .. } if deltas.values().all(|d| *d == 0))
    }

    pub fn label(&self) -> &'static str {
        match self {
            Action::GenerateData { .. } => "generate-data",
            Action::Explore { .. } => "explore",
            Action::Exploit { .. } => "exploit",
        }
    }
}

/// Lowercase, trim, and collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn parse_bool(s: &str) -> Option<bool> {
    match normalize_answer(s).trim_end_matches('.') {
        "yes" | "true" => Some(true),
        "no" | "false" => Some(false),
        _ => None,
    }
}

pub fn compare_answers(predicted: &str, gold: &str, mode: ComparisonMode) -> Result<bool, ModelError> {
    match mode {
        ComparisonMode::ExactMatchNormalized => Ok(normalize_answer(predicted) == normalize_answer(gold)),
        ComparisonMode::BooleanString => match (parse_bool(predicted), parse_bool(gold)) {
            (Some(a), Some(b)) => Ok(a == b),
            _ => Ok(normalize_answer(predicted) == normalize_answer(gold)),
        },
        ComparisonMode::TestExecutionStub => Err(ModelError::NotSupported(mode)),
        ComparisonMode::ProficiencyThreshold => {
            let p: f64 = predicted
                .trim()
                .parse()
                .map_err(|_| ModelError::BadNumber(predicted.to_string()))?;
            let t: f64 = gold
                .trim()
                .parse()
                .map_err(|_| ModelError::BadNumber(gold.to_string()))?;
            Ok(p > t)
        }
    }
}

/// Sample exactly `per_stratum` items from every stratum. The choice depends
/// only on the dataset digest, the seed and the stratum key; output keeps the
/// input order.
pub fn build_stratified_split<F>(
    dataset: &Dataset,
    strata: F,
    per_stratum: usize,
    seed: u64,
) -> Result<Dataset, ModelError>
where
    F: Fn(&TaskItem) -> String,
{
    let ds_digest = dataset.digest();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, item) in dataset.items.iter().enumerate() {
        groups.entry(strata(item)).or_default().push(i);
    }
    let mut chosen = Vec::new();
    for (key, mut idx) in groups {
        if idx.len() < per_stratum {
            return Err(ModelError::UnderstockedStratum {
                stratum: key,
                available: idx.len(),
                required: per_stratum,
            });
        }
        let s = hash_u64(&[ds_digest.as_bytes(), &seed.to_le_bytes(), key.as_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..per_stratum]);
    }
    chosen.sort_unstable();
    Ok(Dataset {
        domain: dataset.domain,
        items: chosen.into_iter().map(|i| dataset.items[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, stratum: &str) -> TaskItem {
        TaskItem {
            item_id: id.into(),
            instruction: format!("q {id}"),
            media_ref: None,
            gold_answer: "a".into(),
            difficulty: None,
            true_skill: Some(stratum.into()),
            true_subskill: None,
            latent_pass_threshold: None,
        }
    }

    #[test]
    fn normalized_match() {
        let m = ComparisonMode::ExactMatchNormalized;
        assert!(compare_answers("  Yes", "yes", m).unwrap());
        assert!(!compare_answers("42", "41", m).unwrap());
        assert!(compare_answers("a   Red\tchair ", "A red chair", m).unwrap());
    }

    #[test]
    fn proficiency_threshold_mode() {
        let m = ComparisonMode::ProficiencyThreshold;
        assert!(compare_answers("0.7", "0.69", m).unwrap());
        assert!(!compare_answers("0.69", "0.69", m).unwrap());
        assert!(compare_answers("x", "0.1", m).is_err());
    }

    #[test]
    fn test_execution_is_not_supported() {
        assert_eq!(
            compare_answers("a", "a", ComparisonMode::TestExecutionStub),
            Err(ModelError::NotSupported(ComparisonMode::TestExecutionStub))
        );
    }

    #[test]
    fn boolean_strings() {
        let m = ComparisonMode::BooleanString;
        assert!(compare_answers("Yes.", "true", m).unwrap());
        assert!(!compare_answers("no", "yes", m).unwrap());
        assert!(compare_answers("plastic", "Plastic", m).unwrap());
    }

    #[test]
    fn domain_mode_membership() {
        assert!(TaskDomain::with_mode(TaskDomainId::Math, ComparisonMode::ProficiencyThreshold).is_err());
        assert!(TaskDomain::with_mode(TaskDomainId::Vqa, ComparisonMode::BooleanString).is_ok());
    }

    #[test]
    fn exhaustive_stratum_returns_everything() {
        let items = vec![item("a", "s"), item("b", "s"), item("c", "s")];
        let ds = Dataset::new(TaskDomain::new(TaskDomainId::Vqa), items.clone()).unwrap();
        let split = build_stratified_split(&ds, |i| i.true_skill.clone().unwrap(), 3, 9).unwrap();
        assert_eq!(split.items, items);
    }

    #[test]
    fn understocked_stratum_is_named() {
        let ds = Dataset::new(
            TaskDomain::new(TaskDomainId::Vqa),
            vec![item("a", "s"), item("b", "t"), item("c", "t")],
        )
        .unwrap();
        let err = build_stratified_split(&ds, |i| i.true_skill.clone().unwrap(), 2, 0).unwrap_err();
        assert_eq!(
            err,
            ModelError::UnderstockedStratum {
                stratum: "s".into(),
                available: 1,
                required: 2
            }
        );
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = Dataset::new(
            TaskDomain::new(TaskDomainId::Vqa),
            vec![item("a", "s"), item("a", "s")],
        );
        assert!(matches!(r, Err(ModelError::DuplicateItem(_))));
    }

    #[test]
    fn difficulty_bins_are_unit_width() {
        assert_eq!(difficulty_bin(3.5), Some(3));
        assert_eq!(difficulty_bin(5.0), Some(5));
        assert_eq!(difficulty_bin(0.9), None);
        assert_eq!(difficulty_bin(1.0), Some(1));
    }

    #[test]
    fn noop_exploit_detection() {
        let a = Action::Exploit {
            skill: "A".into(),
            deltas: [("x".to_string(), 0)].into_iter().collect(),
        };
        assert!(a.is_noop_exploit());
        assert!(!a.legal_in(EnvVariant::OpenEnded));
        let b = Action::GenerateData { specs: vec![] };
        assert!(!b.is_noop_exploit());
        assert!(b.legal_in(EnvVariant::SkillList));
    }
}
