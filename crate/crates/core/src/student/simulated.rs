//! Deterministic proficiency model.
//!
//! Each subskill `s` has a base proficiency `p0`, and after an effective
//! exposure of `N` datums its proficiency is
//!
//! ```text
//! p = p0 + (cap - p0) * (1 - exp(-eta * e(d) * f(r) * N))
//! e(d) = exp(-(d - mu)^2 / (2 sigma^2))    d: mean item difficulty of s
//! f(r) = (1 - r)^rho                       r: 1 - validation share of s's skill
//! ```
//!
//! An item is answered correctly iff the proficiency of its subskill exceeds
//! the item's latent pass threshold.

use std::collections::BTreeMap;
use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, CheckpointState, Student, StudentError, SubskillState, TrainOptions};
use crate::canonical::digest;
use crate::model::{Dataset, TaskItem, TrainingDatum};
use crate::num::Real;
use crate::sim::SimWorld;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub cap: f64,
    pub eta: f64,
    pub sigma: f64,
    pub mu: f64,
    pub rho: f64,
    /// Epoch multipliers beyond this bring nothing extra.
    pub k_sat: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            cap: 0.9,
            eta: 0.01,
            sigma: 1.0,
            mu: 3.5,
            rho: 0.5,
            k_sat: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubskillProfile {
    pub skill: String,
    pub p0: f64,
    pub mean_difficulty: f64,
    pub rarity: f64,
}

/// `p0 + (cap - p0) * (1 - exp(-rate * n))`.
pub fn learning_curve<T: Real>(p0: T, cap: T, rate: T, n: T) -> T {
    p0 + (cap - p0) * (T::one() - (-(rate * n)).exp())
}

/// Gaussian bump around the difficulty sweet spot.
pub fn difficulty_response<T: Real>(d: T, mu: T, sigma: T) -> T {
    let two = T::one() + T::one();
    (-((d - mu) * (d - mu)) / (two * sigma * sigma)).exp()
}

/// Rarity penalty.
pub fn rarity_response<T: Real>(r: T, rho: T) -> T {
    (T::one() - r).max(T::zero()).powf(rho)
}

#[derive(Debug, Clone)]
pub struct SimStudent<T: Real> {
    params: SimParams,
    profiles: BTreeMap<String, SubskillProfile>,
    by_skill: BTreeMap<String, Vec<String>>,
    _scalar: PhantomData<T>,
}

impl<T: Real> SimStudent<T> {
    pub fn new(params: SimParams, profiles: BTreeMap<String, SubskillProfile>) -> Self {
        let mut by_skill: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (name, p) in &profiles {
            by_skill.entry(p.skill.clone()).or_default().push(name.clone());
        }
        SimStudent {
            params,
            profiles,
            by_skill,
            _scalar: PhantomData,
        }
    }

    /// Profiles from a world's base proficiencies and the validation split's
    /// difficulty and skill frequencies.
    pub fn from_world(world: &SimWorld, validation: &Dataset, params: SimParams) -> Self {
        let mut diff: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        let mut skill_count: BTreeMap<&str, usize> = BTreeMap::new();
        for item in &validation.items {
            if let Some(sub) = item.true_subskill.as_deref() {
                let e = diff.entry(sub).or_default();
                e.0 += item.difficulty.unwrap_or(0) as f64;
                e.1 += 1;
            }
            if let Some(skill) = item.true_skill.as_deref() {
                *skill_count.entry(skill).or_default() += 1;
            }
        }
        let total = validation.items.len().max(1) as f64;
        let mut profiles = BTreeMap::new();
        for skill in &world.skills {
            let share = skill_count.get(skill.name.as_str()).copied().unwrap_or(0) as f64 / total;
            for sub in &skill.subskills {
                let mean_difficulty = match diff.get(sub.name.as_str()) {
                    Some((sum, n)) if *n > 0 => sum / *n as f64,
                    _ => {
                        sub.difficulties.iter().map(|d| *d as f64).sum::<f64>()
                            / sub.difficulties.len().max(1) as f64
                    }
                };
                profiles.insert(
                    sub.name.clone(),
                    SubskillProfile {
                        skill: skill.name.clone(),
                        p0: sub.p0,
                        mean_difficulty,
                        rarity: 1.0 - share,
                    },
                );
            }
        }
        SimStudent::new(params, profiles)
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn profiles(&self) -> &BTreeMap<String, SubskillProfile> {
        &self.profiles
    }

    /// `eta * e(d) * f(r)` for one subskill.
    pub fn rate(&self, subskill: &str) -> Option<T> {
        let p = self.profiles.get(subskill)?;
        let f = |v: f64| T::from_f64_lossy(v);
        Some(
            f(self.params.eta)
                * difficulty_response(f(p.mean_difficulty), f(self.params.mu), f(self.params.sigma))
                * rarity_response(f(p.rarity), f(self.params.rho)),
        )
    }

    pub fn proficiency_at(&self, subskill: &str, exposure: f64) -> Option<f64> {
        let p = self.profiles.get(subskill)?;
        let f = |v: f64| T::from_f64_lossy(v);
        let cap = f(self.params.cap.max(p.p0));
        Some(learning_curve(f(p.p0), cap, self.rate(subskill)?, f(exposure)).to_f64_lossy())
    }

    fn state<'a>(
        &self,
        checkpoint: &'a Checkpoint,
    ) -> Result<&'a BTreeMap<String, SubskillState>, StudentError> {
        match &checkpoint.state {
            CheckpointState::Simulated { subskills } => Ok(subskills),
            CheckpointState::External { .. } => {
                Err(StudentError::ForeignCheckpoint(checkpoint.checkpoint_id.clone()))
            }
        }
    }

    /// Datum credit per subskill: the provenance subskill when it is known;
    /// a skill-only datum is split evenly over that skill's subskills; a
    /// datum naming an unknown subskill teaches nothing.
    pub fn credits(&self, datums: &[TrainingDatum]) -> BTreeMap<String, f64> {
        let mut credit: BTreeMap<String, f64> = BTreeMap::new();
        for d in datums {
            match (&d.provenance.subskill, &d.provenance.skill) {
                (Some(sub), _) => {
                    if self.profiles.contains_key(sub) {
                        *credit.entry(sub.clone()).or_default() += 1.0;
                    }
                }
                (None, Some(skill)) => {
                    if let Some(subs) = self.by_skill.get(skill) {
                        let share = 1.0 / subs.len() as f64;
                        for s in subs {
                            *credit.entry(s.clone()).or_default() += share;
                        }
                    }
                }
                (None, None) => {}
            }
        }
        credit
    }

    fn expected(&self, state: &BTreeMap<String, SubskillState>, datum: &TrainingDatum) -> Option<f64> {
        let p = |s: &str| state.get(s).map(|x| x.proficiency);
        match (&datum.provenance.subskill, &datum.provenance.skill) {
            (Some(sub), _) => p(sub),
            (None, Some(skill)) => {
                let subs = self.by_skill.get(skill)?;
                let vals: Vec<f64> = subs.iter().filter_map(|s| p(s)).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            }
            (None, None) => None,
        }
    }

    fn checkpoint(iteration: u32, subskills: BTreeMap<String, SubskillState>) -> Checkpoint {
        let d = digest(&subskills);
        Checkpoint {
            checkpoint_id: format!("sim-{iteration:04}-{}", &d[..12]),
            iteration,
            state: CheckpointState::Simulated { subskills },
        }
    }
}

impl<T: Real> Student for SimStudent<T> {
    fn initial_checkpoint(&mut self) -> Result<Checkpoint, StudentError> {
        let subskills = self
            .profiles
            .iter()
            .map(|(name, p)| {
                (
                    name.clone(),
                    SubskillState {
                        exposure: 0.0,
                        proficiency: p.p0,
                    },
                )
            })
            .collect();
        Ok(Self::checkpoint(0, subskills))
    }

    fn train(
        &mut self,
        checkpoint: &Checkpoint,
        datums: &[TrainingDatum],
        options: TrainOptions,
    ) -> Result<Checkpoint, StudentError> {
        let mut state = self.state(checkpoint)?.clone();
        if datums.is_empty() {
            return Ok(checkpoint.clone());
        }
        let scale = (options.epochs.max(1) as f64).min(self.params.k_sat.max(1.0));
        for (sub, credit) in self.credits(datums) {
            let entry = state.entry(sub.clone()).or_insert(SubskillState {
                exposure: 0.0,
                proficiency: self.profiles[&sub].p0,
            });
            entry.exposure += credit * scale;
            entry.proficiency = self
                .proficiency_at(&sub, entry.exposure)
                .expect("credited subskills have profiles");
        }
        Ok(Self::checkpoint(options.iteration, state))
    }

    fn predict(&mut self, checkpoint: &Checkpoint, items: &[TaskItem]) -> Result<Vec<String>, StudentError> {
        let state = self.state(checkpoint)?;
        items
            .iter()
            .map(|item| {
                item.true_subskill
                    .as_ref()
                    .and_then(|s| state.get(s))
                    .map(|s| s.proficiency.to_string())
                    .ok_or_else(|| StudentError::UnknownSubskill {
                        item_id: item.item_id.clone(),
                        subskill: item.true_subskill.clone(),
                    })
            })
            .collect()
    }

    /// Expected accuracy on the datums: the mean proficiency of the
    /// subskills they exercise.
    fn score_datums(
        &mut self,
        checkpoint: &Checkpoint,
        datums: &[TrainingDatum],
    ) -> Result<Option<f64>, StudentError> {
        let state = self.state(checkpoint)?;
        let vals: Vec<f64> = datums.iter().filter_map(|d| self.expected(state, d)).collect();
        Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Provenance;

    fn datum(skill: Option<&str>, sub: Option<&str>) -> TrainingDatum {
        TrainingDatum {
            instruction: "q".into(),
            response: "a".into(),
            media_ref: None,
            provenance: Provenance {
                iteration: 1,
                skill: skill.map(String::from),
                subskill: sub.map(String::from),
                spec_digest: String::new(),
            },
        }
    }

    fn two_subskill_student() -> SimStudent<f64> {
        let profiles = ["A::sub1", "A::sub2"]
            .iter()
            .map(|n| {
                (
                    n.to_string(),
                    SubskillProfile {
                        skill: "A".into(),
                        p0: 0.2,
                        mean_difficulty: 3.5,
                        rarity: 0.0,
                    },
                )
            })
            .collect();
        SimStudent::new(SimParams::default(), profiles)
    }

    #[test]
    fn closed_form_point() {
        // Oracle evaluated independently: 0.2 + 0.7 * (1 - e^-1).
        let oracle = 0.2 + 0.7 * (1.0 - (-1.0f64).exp());
        let p: f64 = learning_curve(0.2, 0.9, 0.01, 100.0);
        assert!((p - oracle).abs() < 1e-15);
        assert!((p - 0.6424).abs() < 1e-4);
        let p32: f32 = learning_curve(0.2, 0.9, 0.01, 100.0);
        assert!((p32 as f64 - oracle).abs() < 1e-6);
    }

    #[test]
    fn asymptote() {
        let p: f64 = learning_curve(0.2, 0.9, 1.0, 1e6);
        assert!((p - 0.9).abs() < 1e-12);
    }

    #[test]
    fn credit_rules() {
        let s = two_subskill_student();
        let c = s.credits(&[
            datum(Some("A"), Some("A::sub1")),
            datum(Some("A"), None),
            datum(Some("A"), Some("A::sub9")),
            datum(None, None),
        ]);
        assert_eq!(c["A::sub1"], 1.5);
        assert_eq!(c["A::sub2"], 0.5);
    }

    #[test]
    fn empty_training_is_identity() {
        let mut s = two_subskill_student();
        let c0 = s.initial_checkpoint().unwrap();
        let c1 = s.train(&c0, &[], TrainOptions::default()).unwrap();
        assert_eq!(c0, c1);
    }

    #[test]
    fn epochs_saturate() {
        let mut s = two_subskill_student();
        let c0 = s.initial_checkpoint().unwrap();
        let d = vec![datum(Some("A"), Some("A::sub1")); 10];
        let exp = |c: &Checkpoint| match &c.state {
            CheckpointState::Simulated { subskills } => subskills["A::sub1"].exposure,
            _ => unreachable!(),
        };
        let opts = |epochs| TrainOptions { iteration: 1, epochs };
        assert_eq!(exp(&s.train(&c0, &d, opts(1)).unwrap()), 10.0);
        assert_eq!(exp(&s.train(&c0, &d, opts(2)).unwrap()), 20.0);
        assert_eq!(exp(&s.train(&c0, &d, opts(5)).unwrap()), 20.0);
    }

    #[test]
    fn forward_score_levels() {
        let mut s = two_subskill_student();
        let c0 = s.initial_checkpoint().unwrap();
        let d = vec![datum(Some("A"), Some("A::sub1"))];
        assert_eq!(s.score_datums(&c0, &d).unwrap(), Some(0.2));
        assert_eq!(s.score_datums(&c0, &[datum(None, None)]).unwrap(), None);
    }
}
