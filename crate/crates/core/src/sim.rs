//! Synthetic task worlds for the simulated domain.
//!
//! A world fixes the hidden skill/subskill structure, each subskill's base
//! proficiency and item difficulties, and how often each skill shows up.
//! Items carry their hidden labels as a `[[skill=..;subskill=..]]` tag in the
//! instruction so that the mock provider can "read" them.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::hash_u64;
use crate::model::{ComparisonMode, Dataset, ModelError, TaskDomain, TaskDomainId, TaskItem};
use crate::policy::largest_remainder;

/// Render the hidden-label tag.
pub fn embed_tag(skill: &str, subskill: Option<&str>) -> String {
    match subskill {
        Some(sub) if !sub.is_empty() => format!("[[skill={skill};subskill={sub}]]"),
        _ => format!("[[skill={skill}]]"),
    }
}

/// Parse the first hidden-label tag in `text`.
pub fn parse_tag(text: &str) -> Option<(String, Option<String>)> {
    let start = text.find("[[skill=")?;
    let body = &text[start + 2..];
    let end = body.find("]]")?;
    let mut skill = None;
    let mut subskill = None;
    for part in body[..end].split(';') {
        match part.split_once('=') {
            Some(("skill", v)) if !v.is_empty() => skill = Some(v.to_string()),
            Some(("subskill", v)) if !v.is_empty() => subskill = Some(v.to_string()),
            _ => {}
        }
    }
    Some((skill?, subskill))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSubskill {
    pub name: String,
    /// Item difficulty levels, cycled over the subskill's items.
    pub difficulties: Vec<u8>,
    /// Base proficiency before any training.
    pub p0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSkill {
    pub name: String,
    /// Relative frequency of the skill in generated splits.
    pub weight: f64,
    pub subskills: Vec<SimSubskill>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub seed: u64,
    pub skills: Vec<SimSkill>,
}

pub const DEFAULT_SKILLS: [&str; 4] = ["Algebra", "Geometry", "Number Theory", "Counting and Probability"];

impl SimWorld {
    /// Four skills with weights 4:3:2:1 and `subskills` subskills each.
    /// Base difficulties and proficiencies are drawn from `seed`.
    pub fn standard(seed: u64, subskills: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_u64(&[b"world", &seed.to_le_bytes()]));
        let skills = DEFAULT_SKILLS
            .iter()
            .zip([4.0, 3.0, 2.0, 1.0])
            .map(|(name, weight)| SimSkill {
                name: name.to_string(),
                weight,
                subskills: (1..=subskills)
                    .map(|i| {
                        let b: u8 = rng.gen_range(1..=4);
                        SimSubskill {
                            name: format!("{name}::sub{i}"),
                            difficulties: vec![b, b + 1],
                            p0: rng.gen_range(0.2..0.5),
                        }
                    })
                    .collect(),
            })
            .collect();
        SimWorld { seed, skills }
    }

    /// Fifteen single-subskill skills: five difficulty levels crossed with
    /// three frequency tiers (weights 3:2:1), all with the same base
    /// proficiency. Used to look at gain against difficulty and rarity.
    pub fn difficulty_grid(seed: u64) -> Self {
        const NAMES: [&str; 15] = [
            "Alpha", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot", "Golf", "Hotel", "India", "Juliet",
            "Kilo", "Lima", "Mike", "November", "Oscar",
        ];
        const LEVELS: [[u8; 2]; 5] = [[1, 2], [2, 3], [3, 4], [4, 5], [5, 5]];
        let mut skills = Vec::new();
        for (tier, weight) in [3.0, 2.0, 1.0].into_iter().enumerate() {
            for (li, level) in LEVELS.iter().enumerate() {
                let name = NAMES[tier * LEVELS.len() + li];
                skills.push(SimSkill {
                    name: name.to_string(),
                    weight,
                    subskills: vec![SimSubskill {
                        name: format!("{name}::sub1"),
                        difficulties: level.to_vec(),
                        p0: 0.3,
                    }],
                });
            }
        }
        SimWorld { seed, skills }
    }

    pub fn skill_names(&self) -> Vec<String> {
        self.skills.iter().map(|s| s.name.clone()).collect()
    }

    pub fn base_proficiency(&self) -> BTreeMap<String, f64> {
        self.skills
            .iter()
            .flat_map(|s| s.subskills.iter().map(|ss| (ss.name.clone(), ss.p0)))
            .collect()
    }

    /// Build an `n`-item split. Items are spread over skills by weight
    /// (largest remainder) and evenly over subskills. Pass thresholds are
    /// stratified within each subskill, `(perm_i + u_i) / m`, so a subskill's
    /// accuracy tracks its proficiency to within `1/m`.
    pub fn build_split(&self, split: &str, n: usize) -> Result<Dataset, ModelError> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(hash_u64(&[b"split", &self.seed.to_le_bytes(), split.as_bytes()]));
        let weights: Vec<(String, f64)> = self.skills.iter().map(|s| (s.name.clone(), s.weight)).collect();
        let per_skill = largest_remainder(&weights, n as u64);
        let mut items = Vec::with_capacity(n);
        for skill in &self.skills {
            let count = per_skill.get(&skill.name).copied().unwrap_or(0);
            let even: Vec<(String, f64)> = skill.subskills.iter().map(|s| (s.name.clone(), 1.0)).collect();
            let per_sub = largest_remainder(&even, count);
            for sub in &skill.subskills {
                let m = per_sub.get(&sub.name).copied().unwrap_or(0) as usize;
                let mut perm: Vec<usize> = (0..m).collect();
                perm.shuffle(&mut rng);
                for (j, slot) in perm.into_iter().enumerate() {
                    let u: f64 = rng.gen();
                    let threshold = (slot as f64 + u) / m as f64;
                    let difficulty = sub.difficulties[j % sub.difficulties.len()];
                    items.push(TaskItem {
                        item_id: String::new(),
                        instruction: format!(
                            "{} Simulated {split} question {j} on {}.",
                            embed_tag(&skill.name, Some(&sub.name)),
                            sub.name
                        ),
                        media_ref: None,
                        gold_answer: threshold.to_string(),
                        difficulty: Some(difficulty),
                        true_skill: Some(skill.name.clone()),
                        true_subskill: Some(sub.name.clone()),
                        latent_pass_threshold: Some(threshold),
                    });
                }
            }
        }
        items.shuffle(&mut rng);
        for (i, item) in items.iter_mut().enumerate() {
            item.item_id = format!("{split}-{i:05}");
        }
        Dataset::new(
            TaskDomain::with_mode(TaskDomainId::Simulated, ComparisonMode::ProficiencyThreshold)?,
            items,
        )
    }
}
