//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoError, Result};
use crate::forest::ForestCaps;
use crate::model::{ComparisonMode, EnvVariant, TaskDomainId};
use crate::provider::LiveConfig;
use crate::student::SimParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Training iterations before the episode stops.
    pub max_iterations: u32,
    /// Hard bound on environment steps, training or not.
    pub max_steps: u32,
    /// Consecutive non-improving training iterations before truncation.
    pub saturation_patience: u32,
    pub environment: EnvironmentSection,
    pub dataset: DatasetSection,
    pub provider: ProviderSection,
    #[serde(alias = "trainer")]
    pub student: StudentSection,
    pub policy: PolicySection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            max_iterations: 12,
            max_steps: 200,
            saturation_patience: 3,
            environment: EnvironmentSection::default(),
            dataset: DatasetSection::default(),
            provider: ProviderSection::default(),
            student: StudentSection::default(),
            policy: PolicySection::default(),
            ablation: AblationSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentSection {
    pub variant: EnvVariant,
    /// Specs per GenerateData action.
    pub budget: usize,
    /// User-specified target skills; discovered when absent.
    pub skills: Option<Vec<String>>,
    pub max_categories: usize,
    pub forest: ForestCaps,
}

impl Default for EnvironmentSection {
    fn default() -> Self {
        EnvironmentSection {
            variant: EnvVariant::SkillTree,
            budget: 500,
            skills: None,
            max_categories: 15,
            forest: ForestCaps::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorldKind {
    Standard,
    DifficultyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Simulated,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub world: WorldKind,
    /// Seed for the simulated world; the experiment seed when absent.
    pub world_seed: Option<u64>,
    pub subskills_per_skill: usize,
    pub validation_items: usize,
    pub test_items: usize,
    /// Pool for the no-state ablation's random samples.
    pub train_items: usize,
    /// JSON Lines of task items, for `kind = "files"`.
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub domain: TaskDomainId,
    pub comparison: Option<ComparisonMode>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Simulated,
            world: WorldKind::Standard,
            world_seed: None,
            subskills_per_skill: 3,
            validation_items: 200,
            test_items: 200,
            train_items: 400,
            validation: None,
            test: None,
            train: None,
            domain: TaskDomainId::Simulated,
            comparison: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Mock,
    Transcript,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    pub confusion_rate: f64,
    /// Transcript to replay from (`kind = "transcript"`).
    pub transcript: Option<PathBuf>,
    /// Log every call to `transcript.jsonl` in the episode directory.
    pub record_transcript: bool,
    pub max_in_flight: usize,
    pub templates_dir: Option<PathBuf>,
    pub live: LiveConfig,
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            kind: ProviderKind::Mock,
            confusion_rate: 0.0,
            transcript: None,
            record_transcript: true,
            max_in_flight: 8,
            templates_dir: None,
            live: LiveConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentKind {
    Simulated,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSection {
    pub kind: StudentKind,
    pub params: SimParams,
    /// Worker command for a stdio external trainer.
    pub command: Vec<String>,
    /// Endpoint for an HTTP external trainer.
    pub url: Option<String>,
}

impl Default for StudentSection {
    fn default() -> Self {
        StudentSection {
            kind: StudentKind::Simulated,
            params: SimParams::default(),
            command: Vec::new(),
            url: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Hand-crafted for skill-tree, provider-backed otherwise.
    Default,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    pub k_new: u32,
    pub start_with_explore: bool,
    pub error_sample_cap: usize,
    pub errors_per_skill: usize,
    pub command: Vec<String>,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            kind: PolicyKind::Default,
            k_new: 2,
            start_with_explore: true,
            error_sample_cap: 50,
            errors_per_skill: 5,
            command: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Hide student feedback from the policy.
    pub no_state: bool,
    /// Random training samples shown in place of errors.
    pub no_state_samples: usize,
    pub epochs: u32,
    pub data_fraction: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            no_state: false,
            no_state_samples: 50,
            epochs: 1,
            data_fraction: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and resolve relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Set one dotted key, e.g. `environment.forest.per_action_cap=50`. The
    /// value is read as a TOML literal, or as a bare string if it is not one.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts
            .split_last()
            .ok_or_else(|| Error::Config("empty key".into()))?;
        let mut cur = &mut root;
        for p in path {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
            cur = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        cur.as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: not a table")))?
            .insert(last.to_string(), parsed);
        let text = toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?;
        *self = Self::from_toml(&text).map_err(|e| Error::Config(format!("{key}={value}: {e}")))?;
        Ok(())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.dataset.validation);
        fix(&mut self.dataset.test);
        fix(&mut self.dataset.train);
        fix(&mut self.provider.transcript);
        fix(&mut self.provider.templates_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        if self.saturation_patience < 1 {
            return bad("saturation_patience must be at least 1");
        }
        if self.environment.budget < 1 {
            return bad("environment.budget must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.provider.confusion_rate) {
            return bad("provider.confusion_rate must lie in [0, 1]");
        }
        if !(self.ablation.data_fraction > 0.0 && self.ablation.data_fraction <= 1.0) {
            return bad("ablation.data_fraction must lie in (0, 1]");
        }
        if self.ablation.epochs < 1 {
            return bad("ablation.epochs must be at least 1");
        }
        let p = &self.student.params;
        if !(p.eta > 0.0 && p.sigma > 0.0 && p.rho >= 0.0 && (0.0..=1.0).contains(&p.cap)) {
            return bad("student.params out of range");
        }
        if self.dataset.kind == DatasetKind::Files && self.dataset.validation.is_none() {
            return bad("dataset.validation is required for kind = \"files\"");
        }
        if self.provider.kind == ProviderKind::Transcript && self.provider.transcript.is_none() {
            return bad("provider.transcript is required for kind = \"transcript\"");
        }
        if self.student.kind == StudentKind::External
            && self.student.command.is_empty()
            && self.student.url.is_none()
        {
            return bad("an external student needs a command or a url");
        }
        if self.policy.kind == PolicyKind::External && self.policy.command.is_empty() {
            return bad("an external policy needs a command");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
seed = 4
[environment]
variant = "skill-list"
[environment.forest]
per_action_cap = 50
per_subskill_cap = 100
max_subskills_per_tree = 3
[trainer]
kind = "external"
command = ["python3", "-m", "worker"]
"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.environment.variant, EnvVariant::SkillList);
        assert_eq!(cfg.saturation_patience, 3);
        assert_eq!(cfg.student.kind, StudentKind::External);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("environment.forest.per_action_cap", "50").unwrap();
        cfg.set("environment.variant", "skill-list").unwrap();
        cfg.set("environment.skills", "[\"A\", \"B\"]").unwrap();
        cfg.set("ablation.no_state", "true").unwrap();
        assert_eq!(cfg.environment.forest.per_action_cap, 50);
        assert_eq!(cfg.environment.variant, EnvVariant::SkillList);
        assert_eq!(cfg.environment.skills, Some(vec!["A".into(), "B".into()]));
        assert!(cfg.ablation.no_state);
        assert!(cfg.set("seed", "-1").is_err());
        assert!(cfg.set("nonsense.key", "1").is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml("max_iterations = 0").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[provider]\nconfusion_rate = 2.0").is_err());
    }
}
