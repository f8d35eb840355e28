//! The skill forest: a depth-2 skill → subskill hierarchy carrying per-subskill
//! data allocations, with two transitions (grow and rebalance) and strict
//! budget accounting.
//!
//! All transitions are pure: they borrow a forest and return a new one, so a
//! forest value can be shared read-only and replayed step for step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::digest;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("unknown skill {0:?}")]
    UnknownSkill(String),
    #[error("skill {0:?} already has a tree")]
    DuplicateSkill(String),
    #[error("skill {skill:?} has no subskill {subskill:?}")]
    UnknownSubskill { skill: String, subskill: String },
    #[error("growth of {skill:?} needs at least one subskill name")]
    EmptyGrowth { skill: String },
    #[error("tree {skill:?} would hold {requested} subskills, cap is {cap}")]
    TreeCapacity {
        skill: String,
        cap: usize,
        requested: usize,
    },
    #[error("{skill}/{subskill}: allocation would become {value}, below zero")]
    NegativeAllocation {
        skill: String,
        subskill: String,
        value: i64,
    },
    #[error("{skill}/{subskill}: |delta| {delta} exceeds the per-action cap {cap}")]
    ActionCapExceeded {
        skill: String,
        subskill: String,
        delta: i64,
        cap: u64,
    },
    #[error("{skill}/{subskill}: allocation {value} exceeds the per-subskill cap {cap}")]
    SubskillCapExceeded {
        skill: String,
        subskill: String,
        value: u64,
        cap: u64,
    },
    #[error("{skill}/{subskill}: training performance {value} outside [0, 1]")]
    BadPerformance {
        skill: String,
        subskill: String,
        value: f64,
    },
    #[error("tree {skill:?} has duplicate subskill {subskill:?}")]
    DuplicateSubskill { skill: String, subskill: String },
}

/// Budget limits for a forest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestCaps {
    pub per_action_cap: u64,
    pub per_subskill_cap: u64,
    pub max_subskills_per_tree: usize,
}

impl Default for ForestCaps {
    fn default() -> Self {
        ForestCaps {
            per_action_cap: 100,
            per_subskill_cap: 300,
            max_subskills_per_tree: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubskillNode {
    pub subskill_name: String,
    pub data_allocation: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_performance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillTree {
    pub skill_name: String,
    pub subskills: Vec<SubskillNode>,
    pub created_at_iteration: u32,
}

impl SkillTree {
    pub fn new(skill_name: impl Into<String>, created_at_iteration: u32) -> Self {
        SkillTree {
            skill_name: skill_name.into(),
            subskills: Vec::new(),
            created_at_iteration,
        }
    }

    pub fn subskill(&self, name: &str) -> Option<&SubskillNode> {
        self.subskills.iter().find(|s| s.subskill_name == name)
    }

    pub fn subskill_names(&self) -> Vec<String> {
        self.subskills.iter().map(|s| s.subskill_name.clone()).collect()
    }

    pub fn allocation(&self) -> u64 {
        self.subskills.iter().map(|s| s.data_allocation).sum()
    }

    fn contains_ci(&self, name: &str) -> bool {
        let lower = name.to_lowercase();
        self.subskills
            .iter()
            .any(|s| s.subskill_name.to_lowercase() == lower)
    }
}

/// What a grow transition did with each proposed name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowReport {
    pub added: Vec<String>,
    pub dropped_duplicates: Vec<String>,
}

/// Datums still owed to one subskill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotaEntry {
    pub skill: String,
    pub subskill: String,
    pub count: u64,
}

/// skill → subskill → datums produced so far in the episode.
pub type ProducedCounts = BTreeMap<String, BTreeMap<String, u64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillForest {
    /// Trees in insertion order; skill names are unique.
    pub trees: Vec<SkillTree>,
    pub per_action_cap: u64,
    pub per_subskill_cap: u64,
    pub max_subskills_per_tree: usize,
}

impl Default for SkillForest {
    fn default() -> Self {
        SkillForest::new(ForestCaps::default())
    }
}

impl SkillForest {
    pub fn new(caps: ForestCaps) -> Self {
        SkillForest {
            trees: Vec::new(),
            per_action_cap: caps.per_action_cap,
            per_subskill_cap: caps.per_subskill_cap,
            max_subskills_per_tree: caps.max_subskills_per_tree,
        }
    }

    /// One empty tree per skill.
    pub fn with_skills<S: AsRef<str>>(
        skills: &[S],
        caps: ForestCaps,
        iteration: u32,
    ) -> Result<Self, ForestError> {
        let mut f = SkillForest::new(caps);
        for s in skills {
            f = f.add_tree(s.as_ref(), iteration)?;
        }
        Ok(f)
    }

    pub fn caps(&self) -> ForestCaps {
        ForestCaps {
            per_action_cap: self.per_action_cap,
            per_subskill_cap: self.per_subskill_cap,
            max_subskills_per_tree: self.max_subskills_per_tree,
        }
    }

    pub fn add_tree(&self, skill: &str, iteration: u32) -> Result<Self, ForestError> {
        if self.tree(skill).is_some() {
            return Err(ForestError::DuplicateSkill(skill.to_string()));
        }
        let mut next = self.clone();
        next.trees.push(SkillTree::new(skill, iteration));
        Ok(next)
    }

    pub fn tree(&self, skill: &str) -> Option<&SkillTree> {
        self.trees.iter().find(|t| t.skill_name == skill)
    }

    fn tree_index(&self, skill: &str) -> Result<usize, ForestError> {
        self.trees
            .iter()
            .position(|t| t.skill_name == skill)
            .ok_or_else(|| ForestError::UnknownSkill(skill.to_string()))
    }

    pub fn skill_names(&self) -> Vec<String> {
        self.trees.iter().map(|t| t.skill_name.clone()).collect()
    }

    /// Append genuinely new subskills with zero allocation. Names that collide
    /// case-insensitively with existing subskills (or with each other) are
    /// dropped and reported.
    pub fn grow_tree<S: AsRef<str>>(
        &self,
        skill: &str,
        new_subskill_names: &[S],
    ) -> Result<(Self, GrowReport), ForestError> {
        let ti = self.tree_index(skill)?;
        if new_subskill_names.is_empty() {
            return Err(ForestError::EmptyGrowth {
                skill: skill.to_string(),
            });
        }
        let tree = &self.trees[ti];
        let mut report = GrowReport::default();
        let mut fresh_lower = BTreeSet::new();
        for name in new_subskill_names {
            let name = name.as_ref();
            let lower = name.to_lowercase();
            if name.trim().is_empty() || tree.contains_ci(name) || !fresh_lower.insert(lower) {
                report.dropped_duplicates.push(name.to_string());
            } else {
                report.added.push(name.to_string());
            }
        }
        let requested = tree.subskills.len() + report.added.len();
        if requested > self.max_subskills_per_tree {
            return Err(ForestError::TreeCapacity {
                skill: skill.to_string(),
                cap: self.max_subskills_per_tree,
                requested,
            });
        }
        let mut next = self.clone();
        next.trees[ti]
            .subskills
            .extend(report.added.iter().map(|n| SubskillNode {
                subskill_name: n.clone(),
                data_allocation: 0,
                training_performance: None,
            }));
        Ok((next, report))
    }

    /// Apply signed allocation deltas to existing subskills of one tree.
    pub fn rebalance_tree(&self, skill: &str, deltas: &BTreeMap<String, i64>) -> Result<Self, ForestError> {
        let ti = self.tree_index(skill)?;
        let mut next = self.clone();
        let tree = &mut next.trees[ti];
        for (sub, &delta) in deltas {
            let node = tree
                .subskills
                .iter_mut()
                .find(|s| &s.subskill_name == sub)
                .ok_or_else(|| ForestError::UnknownSubskill {
                    skill: skill.to_string(),
                    subskill: sub.clone(),
                })?;
            if delta.unsigned_abs() > self.per_action_cap {
                return Err(ForestError::ActionCapExceeded {
                    skill: skill.to_string(),
                    subskill: sub.clone(),
                    delta,
                    cap: self.per_action_cap,
                });
            }
            let value = node.data_allocation as i64 + delta;
            if value < 0 {
                return Err(ForestError::NegativeAllocation {
                    skill: skill.to_string(),
                    subskill: sub.clone(),
                    value,
                });
            }
            let value = value as u64;
            if value > self.per_subskill_cap {
                return Err(ForestError::SubskillCapExceeded {
                    skill: skill.to_string(),
                    subskill: sub.clone(),
                    value,
                    cap: self.per_subskill_cap,
                });
            }
            node.data_allocation = value;
        }
        Ok(next)
    }

    /// Zero every allocation in one tree.
    pub fn reset_allocations(&self, skill: &str) -> Result<Self, ForestError> {
        let ti = self.tree_index(skill)?;
        let mut next = self.clone();
        for s in &mut next.trees[ti].subskills {
            s.data_allocation = 0;
        }
        Ok(next)
    }

    pub fn set_training_performance(
        &self,
        skill: &str,
        subskill: &str,
        value: f64,
    ) -> Result<Self, ForestError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(ForestError::BadPerformance {
                skill: skill.into(),
                subskill: subskill.into(),
                value,
            });
        }
        let ti = self.tree_index(skill)?;
        let mut next = self.clone();
        let node = next.trees[ti]
            .subskills
            .iter_mut()
            .find(|s| s.subskill_name == subskill)
            .ok_or_else(|| ForestError::UnknownSubskill {
                skill: skill.into(),
                subskill: subskill.into(),
            })?;
        node.training_performance = Some(value);
        Ok(next)
    }

    /// Datums still owed per subskill, in tree then subskill order.
    pub fn materialize_quota(&self, produced: &ProducedCounts) -> Vec<QuotaEntry> {
        let mut out = Vec::new();
        for tree in &self.trees {
            let done = produced.get(&tree.skill_name);
            for s in &tree.subskills {
                let made = done.and_then(|m| m.get(&s.subskill_name)).copied().unwrap_or(0);
                let count = s.data_allocation.saturating_sub(made);
                if count > 0 {
                    out.push(QuotaEntry {
                        skill: tree.skill_name.clone(),
                        subskill: s.subskill_name.clone(),
                        count,
                    });
                }
            }
        }
        out
    }

    pub fn total_allocation(&self) -> u64 {
        self.trees.iter().map(SkillTree::allocation).sum()
    }

    pub fn subskill_count(&self) -> usize {
        self.trees.iter().map(|t| t.subskills.len()).sum()
    }

    /// Every tree holds the maximum number of subskills, each at the
    /// per-subskill cap. Nothing further can be allocated.
    pub fn is_full(&self) -> bool {
        self.trees.iter().all(|t| {
            t.subskills.len() == self.max_subskills_per_tree
                && t.subskills
                    .iter()
                    .all(|s| s.data_allocation == self.per_subskill_cap)
        })
    }

    /// Check every structural invariant and cap.
    pub fn validate(&self) -> Result<(), ForestError> {
        let mut skills = BTreeSet::new();
        for t in &self.trees {
            if !skills.insert(t.skill_name.as_str()) {
                return Err(ForestError::DuplicateSkill(t.skill_name.clone()));
            }
            if t.subskills.len() > self.max_subskills_per_tree {
                return Err(ForestError::TreeCapacity {
                    skill: t.skill_name.clone(),
                    cap: self.max_subskills_per_tree,
                    requested: t.subskills.len(),
                });
            }
            let mut names = BTreeSet::new();
            for s in &t.subskills {
                if !names.insert(s.subskill_name.to_lowercase()) {
                    return Err(ForestError::DuplicateSubskill {
                        skill: t.skill_name.clone(),
                        subskill: s.subskill_name.clone(),
                    });
                }
                if s.data_allocation > self.per_subskill_cap {
                    return Err(ForestError::SubskillCapExceeded {
                        skill: t.skill_name.clone(),
                        subskill: s.subskill_name.clone(),
                        value: s.data_allocation,
                        cap: self.per_subskill_cap,
                    });
                }
                if let Some(p) = s.training_performance {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(ForestError::BadPerformance {
                            skill: t.skill_name.clone(),
                            subskill: s.subskill_name.clone(),
                            value: p,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest(self)
    }

    /// Aligned text table: skill, subskill, allocation, training performance.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<[String; 4]> = vec![[
            "skill".into(),
            "subskill".into(),
            "allocation".into(),
            "train_perf".into(),
        ]];
        for t in &self.trees {
            if t.subskills.is_empty() {
                rows.push([t.skill_name.clone(), "-".into(), "0".into(), "-".into()]);
            }
            for s in &t.subskills {
                rows.push([
                    t.skill_name.clone(),
                    s.subskill_name.clone(),
                    s.data_allocation.to_string(),
                    s.training_performance
                        .map(|p| format!("{p:.3}"))
                        .unwrap_or_else(|| "-".into()),
                ]);
            }
        }
        let widths: Vec<usize> = (0..4)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let _ = writeln!(
                out,
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}",
                r[0],
                r[1],
                r[2],
                r[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
        }
        let _ = writeln!(out, "total allocation: {}", self.total_allocation());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deltas(pairs: &[(&str, i64)]) -> BTreeMap<String, i64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn forest_ab(a: u64, b: u64) -> SkillForest {
        let f = SkillForest::with_skills(&["S"], ForestCaps::default(), 0).unwrap();
        let (f, _) = f.grow_tree("S", &["a", "b"]).unwrap();
        let mut f = f;
        f.trees[0].subskills[0].data_allocation = a;
        f.trees[0].subskills[1].data_allocation = b;
        f
    }

    #[test]
    fn grow_empty_algebra_tree() {
        let f = SkillForest::with_skills(&["Algebra"], ForestCaps::default(), 0).unwrap();
        let (g, rep) = f
            .grow_tree(
                "Algebra",
                &["Solving Linear Equations", "Polynomial Factorization"],
            )
            .unwrap();
        let t = g.tree("Algebra").unwrap();
        assert_eq!(t.subskills.len(), 2);
        assert!(t.subskills.iter().all(|s| s.data_allocation == 0));
        assert!(t.subskills.iter().all(|s| s.training_performance.is_none()));
        assert_eq!(rep.dropped_duplicates.len(), 0);
    }

    #[test]
    fn duplicate_growth_is_dropped() {
        let f = SkillForest::with_skills(&["T"], ForestCaps::default(), 0).unwrap();
        let (f, _) = f.grow_tree("T", &["X"]).unwrap();
        let (g, rep) = f.grow_tree("T", &["x"]).unwrap();
        assert_eq!(g, f);
        assert_eq!(rep.dropped_duplicates, vec!["x".to_string()]);
    }

    #[test]
    fn growth_over_capacity_errors() {
        let caps = ForestCaps {
            max_subskills_per_tree: 6,
            ..ForestCaps::default()
        };
        let f = SkillForest::with_skills(&["T"], caps, 0).unwrap();
        let (f, _) = f.grow_tree("T", &["a", "b", "c"]).unwrap();
        let err = f.grow_tree("T", &["d", "e", "f", "g", "h"]).unwrap_err();
        // 3 existing + 5 fresh, counted by construction
        assert_eq!(
            err,
            ForestError::TreeCapacity {
                skill: "T".into(),
                cap: 6,
                requested: 8
            }
        );
    }

    #[test]
    fn zero_delta_is_identity() {
        let f = forest_ab(50, 100);
        let g = f.rebalance_tree("S", &deltas(&[("a", 0), ("b", 0)])).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn negative_allocation_rejected() {
        let f = forest_ab(50, 0);
        assert!(matches!(
            f.rebalance_tree("S", &deltas(&[("a", -60)])),
            Err(ForestError::NegativeAllocation { .. })
        ));
    }

    #[test]
    fn rebalance_adds_exactly() {
        let caps = ForestCaps {
            per_action_cap: 100,
            per_subskill_cap: 50,
            max_subskills_per_tree: 5,
        };
        let f = SkillForest::with_skills(&["S"], caps, 0).unwrap();
        let (f, _) = f.grow_tree("S", &["a", "b"]).unwrap();
        let g = f.rebalance_tree("S", &deltas(&[("a", 50), ("b", 50)])).unwrap();
        let t = g.tree("S").unwrap();
        assert_eq!(t.subskill("a").unwrap().data_allocation, 50);
        assert_eq!(t.subskill("b").unwrap().data_allocation, 50);
        assert_eq!(g.total_allocation() - f.total_allocation(), 100);
    }

    #[test]
    fn rebalance_error_paths() {
        let f = forest_ab(250, 0);
        assert!(matches!(
            f.rebalance_tree("S", &deltas(&[("b", 101)])),
            Err(ForestError::ActionCapExceeded { .. })
        ));
        assert!(matches!(
            f.rebalance_tree("S", &deltas(&[("a", 60)])),
            Err(ForestError::SubskillCapExceeded { .. })
        ));
        assert!(matches!(
            f.rebalance_tree("S", &deltas(&[("zz", 1)])),
            Err(ForestError::UnknownSubskill { .. })
        ));
        assert!(matches!(
            f.rebalance_tree("Q", &deltas(&[])),
            Err(ForestError::UnknownSkill(_))
        ));
    }

    #[test]
    fn reset_zeroes_one_tree_only() {
        let f = SkillForest::with_skills(&["A", "B", "C"], ForestCaps::default(), 0).unwrap();
        let (f, _) = f.grow_tree("A", &["a1", "a2"]).unwrap();
        let (f, _) = f.grow_tree("B", &["b1"]).unwrap();
        let (f, _) = f.grow_tree("C", &["c1"]).unwrap();
        let f = f.rebalance_tree("A", &deltas(&[("a1", 50), ("a2", 30)])).unwrap();
        let f = f.rebalance_tree("B", &deltas(&[("b1", 20)])).unwrap();
        let f = f.rebalance_tree("C", &deltas(&[("c1", 10)])).unwrap();
        let g = f.reset_allocations("A").unwrap();
        assert_eq!(g.tree("A").unwrap().allocation(), 0);
        assert_eq!(g.tree("A").unwrap().subskill_names(), vec!["a1", "a2"]);
        for s in ["B", "C"] {
            assert_eq!(
                crate::canonical::digest(g.tree(s).unwrap()),
                crate::canonical::digest(f.tree(s).unwrap())
            );
        }
        assert_eq!(g.reset_allocations("A").unwrap(), g);
        assert!(g.reset_allocations("nope").is_err());
    }

    #[test]
    fn quota_accounts_for_production() {
        let f = forest_ab(40, 0);
        let q = f.materialize_quota(&ProducedCounts::new());
        assert_eq!(
            q,
            vec![QuotaEntry {
                skill: "S".into(),
                subskill: "a".into(),
                count: 40
            }]
        );
        let mut produced = ProducedCounts::new();
        produced.entry("S".into()).or_default().insert("a".into(), 40);
        assert!(f.materialize_quota(&produced).is_empty());
    }

    #[test]
    fn quota_over_two_trees() {
        let f = SkillForest::with_skills(&["A", "B"], ForestCaps::default(), 0).unwrap();
        let (f, _) = f.grow_tree("A", &["a1", "a2"]).unwrap();
        let (f, _) = f.grow_tree("B", &["b1"]).unwrap();
        let f = f.rebalance_tree("A", &deltas(&[("a1", 10), ("a2", 20)])).unwrap();
        let f = f.rebalance_tree("B", &deltas(&[("b1", 5)])).unwrap();
        let q = f.materialize_quota(&ProducedCounts::new());
        assert_eq!(q.len(), 3);
        assert_eq!(q.iter().map(|e| e.count).sum::<u64>(), f.total_allocation());
        assert_eq!(f.total_allocation(), 35);
    }

    #[test]
    fn totals() {
        assert_eq!(SkillForest::default().total_allocation(), 0);
        assert_eq!(forest_ab(50, 100).total_allocation(), 150);
    }

    #[test]
    fn empty_growth_rejected() {
        let f = SkillForest::with_skills(&["S"], ForestCaps::default(), 0).unwrap();
        let none: [&str; 0] = [];
        assert!(matches!(
            f.grow_tree("S", &none),
            Err(ForestError::EmptyGrowth { .. })
        ));
    }

    #[test]
    fn table_lists_every_subskill() {
        let t = forest_ab(50, 100).render_table();
        assert!(t.contains("S"));
        assert!(t.lines().count() >= 4);
        assert!(t.contains("total allocation: 150"));
    }
}
