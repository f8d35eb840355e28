//! Post-hoc analysis of a trajectory: per-skill before/after accuracy, gain
//! by difficulty and by rarity, and the per-step series.
//!
//! Everything is computed from integer tallies, so `Analysis<Ratio<i64>>`
//! is exact and `Analysis<f64>` differs from it only by float rounding.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::episode::{select_best, TrajectoryRecord};
use crate::error::{IoError, Result};
use crate::model::{Dataset, PerformanceReport, Tally};
use crate::num::Scalar;

/// Equal-width rarity bins used by [`Analysis::compute`].
pub const RARITY_BINS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SkillRow<T> {
    pub skill: String,
    pub before: Tally,
    pub after: Tally,
    pub before_accuracy: T,
    pub after_accuracy: T,
    pub delta: T,
}

impl<T: Scalar> SkillRow<T> {
    pub fn new(skill: impl Into<String>, before: Tally, after: Tally) -> Self {
        let b: T = before.accuracy_as();
        let a: T = after.accuracy_as();
        SkillRow {
            skill: skill.into(),
            before,
            after,
            delta: a.clone() - b.clone(),
            before_accuracy: b,
            after_accuracy: a,
        }
    }
}

/// Gain pooled over the items of every skill in the bin.
#[derive(Debug, Clone, PartialEq)]
pub struct GainBin<T> {
    pub bin: usize,
    /// Bin bounds: difficulty `[lo, lo+1)`, or a rarity interval.
    pub lo: T,
    pub hi: T,
    pub skills: Vec<String>,
    pub items: u64,
    pub gain: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint<T> {
    pub step: u32,
    pub iteration: u32,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis<T = f64> {
    pub before_step: u32,
    pub after_step: u32,
    pub overall: SkillRow<T>,
    pub per_skill: Vec<SkillRow<T>>,
    pub difficulty: Vec<GainBin<T>>,
    pub rarity: Vec<GainBin<T>>,
    /// Validation accuracy after the reset and after every training step.
    pub validation_series: Vec<SeriesPoint<T>>,
    /// Pre-training accuracy on each training step's generated data.
    pub forward_series: Vec<SeriesPoint<f64>>,
}

/// Hidden skill of every hidden subskill in the dataset.
fn subskill_owner(validation: &Dataset) -> BTreeMap<&str, &str> {
    validation
        .items
        .iter()
        .filter_map(|i| Some((i.true_subskill.as_deref()?, i.true_skill.as_deref()?)))
        .collect()
}

/// Tallies per hidden skill, summed from the hidden-subskill tallies.
fn hidden_skill_tallies(report: &PerformanceReport, owner: &BTreeMap<&str, &str>) -> BTreeMap<String, Tally> {
    let mut out: BTreeMap<String, Tally> = BTreeMap::new();
    for (sub, t) in &report.per_subskill {
        if let Some(skill) = owner.get(sub.as_str()) {
            let e = out.entry(skill.to_string()).or_default();
            e.correct += t.correct;
            e.total += t.total;
        }
    }
    out
}

fn pooled_gain<T: Scalar>(
    skills: &[String],
    before: &BTreeMap<String, Tally>,
    after: &BTreeMap<String, Tally>,
) -> (u64, T) {
    let mut gained: i64 = 0;
    let mut items: u64 = 0;
    for s in skills {
        let b = before.get(s).copied().unwrap_or_default();
        let a = after.get(s).copied().unwrap_or_default();
        gained += a.correct as i64 - b.correct as i64;
        items += b.total.max(a.total);
    }
    let gain = if items == 0 {
        T::zero()
    } else {
        T::ratio(gained, items as i64)
    };
    (items, gain)
}

impl<T: Scalar> Analysis<T> {
    /// Analyze `records` against the validation split. `best_step` names
    /// the selected checkpoint; when absent it is recomputed from the
    /// trajectory. An empty trajectory yields an empty analysis.
    pub fn compute(records: &[TrajectoryRecord], validation: &Dataset, best_step: Option<u32>) -> Self {
        Self::compute_with_bins(records, validation, best_step, RARITY_BINS)
    }

    pub fn compute_with_bins(
        records: &[TrajectoryRecord],
        validation: &Dataset,
        best_step: Option<u32>,
        rarity_bins: usize,
    ) -> Self {
        let candidates: Vec<&TrajectoryRecord> = records
            .iter()
            .enumerate()
            .filter(|(i, r)| *i == 0 || r.trained)
            .map(|(_, r)| r)
            .collect();
        let Some(first) = records.first() else {
            return Analysis {
                before_step: 0,
                after_step: 0,
                overall: SkillRow::new("overall", Tally::default(), Tally::default()),
                per_skill: Vec::new(),
                difficulty: Vec::new(),
                rarity: Vec::new(),
                validation_series: Vec::new(),
                forward_series: Vec::new(),
            };
        };
        let after = best_step
            .and_then(|s| records.iter().find(|r| r.step == s))
            .or_else(|| {
                let accs: Vec<f64> = candidates.iter().map(|r| r.report.overall_accuracy).collect();
                select_best(&accs).map(|i| candidates[i])
            })
            .unwrap_or(first);
        Self::from_reports(
            &first.report,
            &after.report,
            validation,
            rarity_bins,
            first.step,
            after.step,
        )
        .with_series(&candidates, records)
    }

    /// Before/after tables from two reports alone.
    pub fn from_reports(
        before: &PerformanceReport,
        after: &PerformanceReport,
        validation: &Dataset,
        rarity_bins: usize,
        before_step: u32,
        after_step: u32,
    ) -> Self {
        let keys: BTreeSet<&String> = before.per_skill.keys().chain(after.per_skill.keys()).collect();
        let per_skill = keys
            .into_iter()
            .map(|k| {
                SkillRow::new(
                    k.clone(),
                    before.per_skill.get(k).copied().unwrap_or_default(),
                    after.per_skill.get(k).copied().unwrap_or_default(),
                )
            })
            .collect();

        let owner = subskill_owner(validation);
        let tb = hidden_skill_tallies(before, &owner);
        let ta = hidden_skill_tallies(after, &owner);

        // Skill difficulty: floor of the mean item difficulty, in integers.
        let mut diff: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
        let mut count: BTreeMap<&str, u64> = BTreeMap::new();
        for item in &validation.items {
            let Some(skill) = item.true_skill.as_deref() else {
                continue;
            };
            *count.entry(skill).or_default() += 1;
            if let Some(d) = item.difficulty {
                let e = diff.entry(skill).or_default();
                e.0 += d as u64;
                e.1 += 1;
            }
        }
        let mut by_level: BTreeMap<u64, Vec<String>> = BTreeMap::new();
        for (skill, (sum, n)) in &diff {
            by_level.entry(sum / n).or_default().push(skill.to_string());
        }
        let difficulty = by_level
            .into_iter()
            .map(|(level, skills)| {
                let (items, gain) = pooled_gain::<T>(&skills, &tb, &ta);
                GainBin {
                    bin: level as usize,
                    lo: T::ratio(level as i64, 1),
                    hi: T::ratio(level as i64 + 1, 1),
                    skills,
                    items,
                    gain,
                }
            })
            .collect();

        // Rarity = 1 - count/N. Bin k of B covers
        // [rmin + k(rmax-rmin)/B, rmin + (k+1)(rmax-rmin)/B).
        let mut rarity = Vec::new();
        let n = validation.items.len() as i64;
        if let (Some(cmax), Some(cmin), true) = (count.values().max(), count.values().min(), rarity_bins > 0)
        {
            let (cmax, cmin, b) = (*cmax as i64, *cmin as i64, rarity_bins as i64);
            let span = cmax - cmin;
            let mut bins: BTreeMap<usize, Vec<String>> = BTreeMap::new();
            for (skill, c) in &count {
                let k = if span == 0 {
                    0
                } else {
                    (((cmax - *c as i64) * b) / span).min(b - 1)
                };
                bins.entry(k as usize).or_default().push(skill.to_string());
            }
            for (k, skills) in bins {
                let (items, gain) = pooled_gain::<T>(&skills, &tb, &ta);
                let k = k as i64;
                rarity.push(GainBin {
                    bin: k as usize,
                    lo: T::ratio((n - cmax) * b + span * k, n * b),
                    hi: T::ratio((n - cmax) * b + span * (k + 1), n * b),
                    skills,
                    items,
                    gain,
                });
            }
        }

        Analysis {
            before_step,
            after_step,
            overall: SkillRow::new("overall", before.overall, after.overall),
            per_skill,
            difficulty,
            rarity,
            validation_series: Vec::new(),
            forward_series: Vec::new(),
        }
    }

    fn with_series(mut self, candidates: &[&TrajectoryRecord], records: &[TrajectoryRecord]) -> Self {
        self.validation_series = candidates
            .iter()
            .map(|r| SeriesPoint {
                step: r.step,
                iteration: r.iteration,
                value: r.report.overall.accuracy_as(),
            })
            .collect();
        self.forward_series = records
            .iter()
            .filter_map(|r| {
                Some(SeriesPoint {
                    step: r.step,
                    iteration: r.iteration,
                    value: r.forward_accuracy?,
                })
            })
            .collect();
        self
    }

    /// Difficulty bin with the largest gain, lowest bin on ties.
    pub fn peak_difficulty_bin(&self) -> Option<usize> {
        let gains: Vec<T> = self.difficulty.iter().map(|b| b.gain.clone()).collect();
        crate::num::argmax_earliest(&gains).map(|i| self.difficulty[i].bin)
    }

    /// Whether gain never rises from one rarity bin to the next.
    pub fn gain_non_increasing_in_rarity(&self) -> bool {
        self.rarity.windows(2).all(|w| w[1].gain <= w[0].gain)
    }

    pub fn summary_text(&self) -> String {
        let pct = |v: &T| format!("{:.2}", v.to_f64_lossy() * 100.0);
        let signed = |v: &T| format!("{:+.2}", v.to_f64_lossy() * 100.0);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "before: step {}  after: step {}",
            self.before_step, self.after_step
        );
        let _ = writeln!(
            s,
            "\n{:<28} {:>8} {:>8} {:>8}",
            "skill", "before", "after", "delta"
        );
        for r in self.per_skill.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                s,
                "{:<28} {:>8} {:>8} {:>8}",
                r.skill,
                pct(&r.before_accuracy),
                pct(&r.after_accuracy),
                signed(&r.delta)
            );
        }
        let _ = writeln!(s, "\ngain by difficulty");
        for b in &self.difficulty {
            let _ = writeln!(
                s,
                "  [{}, {})  items {:>5}  gain {}",
                b.bin,
                b.bin + 1,
                b.items,
                signed(&b.gain)
            );
        }
        let _ = writeln!(s, "\ngain by rarity");
        for b in &self.rarity {
            let _ = writeln!(
                s,
                "  [{:.3}, {:.3})  items {:>5}  gain {}",
                b.lo.to_f64_lossy(),
                b.hi.to_f64_lossy(),
                b.items,
                signed(&b.gain)
            );
        }
        let _ = writeln!(s, "\nvalidation accuracy by iteration");
        for p in &self.validation_series {
            let _ = writeln!(
                s,
                "  iter {:>3} (step {:>3})  {}",
                p.iteration,
                p.step,
                pct(&p.value)
            );
        }
        if !self.forward_series.is_empty() {
            let _ = writeln!(s, "\ngenerated-data accuracy before training");
            for p in &self.forward_series {
                let _ = writeln!(
                    s,
                    "  iter {:>3} (step {:>3})  {:.2}",
                    p.iteration,
                    p.step,
                    p.value * 100.0
                );
            }
        }
        s
    }

    /// Write the CSVs and `summary.txt` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
        #[derive(Serialize)]
        struct SkillCsv<'a> {
            skill: &'a str,
            before_correct: u64,
            before_total: u64,
            after_correct: u64,
            after_total: u64,
            before: f64,
            after: f64,
            delta: f64,
        }
        #[derive(Serialize)]
        struct BinCsv {
            bin: usize,
            lo: f64,
            hi: f64,
            items: u64,
            gain: f64,
            skills: String,
        }
        #[derive(Serialize)]
        struct PointCsv {
            step: u32,
            iteration: u32,
            value: f64,
        }
        let skill_rows: Vec<SkillCsv> = self
            .per_skill
            .iter()
            .chain(std::iter::once(&self.overall))
            .map(|r| SkillCsv {
                skill: &r.skill,
                before_correct: r.before.correct,
                before_total: r.before.total,
                after_correct: r.after.correct,
                after_total: r.after.total,
                before: r.before_accuracy.to_f64_lossy(),
                after: r.after_accuracy.to_f64_lossy(),
                delta: r.delta.to_f64_lossy(),
            })
            .collect();
        let bins = |v: &[GainBin<T>]| -> Vec<BinCsv> {
            v.iter()
                .map(|b| BinCsv {
                    bin: b.bin,
                    lo: b.lo.to_f64_lossy(),
                    hi: b.hi.to_f64_lossy(),
                    items: b.items,
                    gain: b.gain.to_f64_lossy(),
                    skills: b.skills.join(";"),
                })
                .collect()
        };
        let points = |v: &[SeriesPoint<f64>]| -> Vec<PointCsv> {
            v.iter()
                .map(|p| PointCsv {
                    step: p.step,
                    iteration: p.iteration,
                    value: p.value,
                })
                .collect()
        };
        let validation: Vec<SeriesPoint<f64>> = self
            .validation_series
            .iter()
            .map(|p| SeriesPoint {
                step: p.step,
                iteration: p.iteration,
                value: p.value.to_f64_lossy(),
            })
            .collect();
        write_csv(&dir.join("per_skill.csv"), &skill_rows)?;
        write_csv(&dir.join("gain_by_difficulty.csv"), &bins(&self.difficulty))?;
        write_csv(&dir.join("gain_by_rarity.csv"), &bins(&self.rarity))?;
        write_csv(&dir.join("validation_accuracy.csv"), &points(&validation))?;
        write_csv(&dir.join("forward_accuracy.csv"), &points(&self.forward_series))?;
        let p = dir.join("summary.txt");
        std::fs::write(&p, self.summary_text()).map_err(|e| IoError::io(&p, e))?;
        Ok(())
    }
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let err = |m: String| IoError::Io {
        path: path.display().to_string(),
        message: m,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn report(correct: u64, total: u64) -> PerformanceReport {
        let t = Tally { correct, total };
        PerformanceReport {
            iteration: 0,
            overall: t,
            overall_accuracy: t.accuracy(),
            per_skill: [("GQA".to_string(), t)].into(),
            per_subskill: BTreeMap::new(),
            per_difficulty_bin: BTreeMap::new(),
        }
    }

    #[test]
    fn exact_delta() {
        let empty = Dataset {
            domain: crate::model::TaskDomain::new(crate::model::TaskDomainId::Vqa),
            items: Vec::new(),
        };
        let a: Analysis<Ratio<i64>> = Analysis::from_reports(
            &report(4418, 10000),
            &report(4790, 10000),
            &empty,
            RARITY_BINS,
            0,
            1,
        );
        assert_eq!(a.overall.delta, Ratio::new(372, 10000));
        assert_eq!(a.per_skill[0].after_accuracy, Ratio::new(479, 1000));
    }

    #[test]
    fn empty_trajectory() {
        let empty = Dataset {
            domain: crate::model::TaskDomain::new(crate::model::TaskDomainId::Vqa),
            items: Vec::new(),
        };
        let a: Analysis = Analysis::compute(&[], &empty, None);
        assert!(a.validation_series.is_empty());
    }
}
