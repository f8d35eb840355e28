//! Episode orchestration: build the pieces from a config, run the
//! reset/step loop, pick the best checkpoint and write the episode
//! directory.
//!
//! Layout of an episode directory:
//!
//! ```text
//! config.toml        resolved config copy
//! world.json         simulated world (simulated datasets only)
//! validation.jsonl   validation split
//! assignments.json   validation item -> skill
//! trajectory.jsonl   one TrajectoryRecord per step
//! data/              generated datums per step
//! snapshots/         state digest, forest and report per step
//! checkpoints/       checkpoint documents
//! transcript.jsonl   provider calls, when recorded
//! summary.json       status, best checkpoint, test report
//! analysis/          CSVs and a text summary
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::Analysis;
use crate::canonical::{digest, read_jsonl, write_json, write_jsonl};
use crate::config::{DatasetKind, ExperimentConfig, PolicyKind, ProviderKind, StudentKind, WorldKind};
use crate::discovery::SkillDiscovery;
use crate::engine::{DroppedSpec, Engine};
use crate::env::{EnvConfig, Environment, SkillSource};
use crate::error::{Error, IoError, Result};
use crate::forest::ProducedCounts;
use crate::model::{Action, Dataset, EnvVariant, PerformanceReport, TaskDomain, TaskDomainId, TaskItem};
use crate::num::argmax_earliest;
use crate::policy::{
    ExternalPolicy, HandcraftedConfig, HandcraftedTreePolicy, NoStateMask, OpenEndedPolicy, Policy,
    PolicyContext, RandomTreePolicy, SkillListPolicy,
};
use crate::provider::{
    BackendKind, LiveBackend, LlmClient, MockBackend, MockConfig, TemplateStore, TranscriptBackend,
    TranscriptLog,
};
use crate::sim::SimWorld;
use crate::student::protocol::{HttpTransport, StdioTransport};
use crate::student::{evaluate, Checkpoint, ProtocolStudent, SimStudent, Student};

/// One line of `trajectory.jsonl`. Step 0 is the evaluation after reset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u32,
    /// Training iterations completed after this step.
    pub iteration: u32,
    /// Digest of the state the action was chosen from.
    pub state_digest: String,
    pub action: Option<Action>,
    pub manifest: ProducedCounts,
    pub dropped: Vec<DroppedSpec>,
    pub trained: bool,
    pub checkpoint_id: String,
    pub report: PerformanceReport,
    pub reward: f64,
    pub delta: f64,
    pub forward_accuracy: Option<f64>,
    pub wall_clock_ms: u64,
}

impl TrajectoryRecord {
    /// Digest over everything but wall-clock time.
    pub fn digest(&self) -> String {
        let mut r = self.clone();
        r.wall_clock_ms = 0;
        digest(&r)
    }
}

pub fn trajectory_digest(records: &[TrajectoryRecord]) -> String {
    let per: Vec<String> = records.iter().map(TrajectoryRecord::digest).collect();
    digest(&per)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpisodeStatus {
    Completed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    Saturated,
    ForestComplete,
    MaxSteps,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub status: EpisodeStatus,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub policy: String,
    pub skills: Vec<String>,
    pub steps: u32,
    pub training_iterations: u32,
    pub initial_validation_accuracy: Option<f64>,
    /// Index into the trajectory of the selected checkpoint.
    pub best_step: Option<u32>,
    pub best_iteration: Option<u32>,
    pub best_checkpoint_id: Option<String>,
    pub best_validation_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_report: Option<PerformanceReport>,
    pub trajectory_digest: String,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub summary: EpisodeSummary,
    pub records: Vec<TrajectoryRecord>,
    pub best_checkpoint: Option<Checkpoint>,
    pub validation: Dataset,
    pub world: Option<SimWorld>,
    pub assigned: BTreeMap<String, String>,
}

impl EpisodeResult {
    pub fn final_validation_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.report.overall_accuracy)
    }
}

/// Index of the checkpoint to keep: highest accuracy, earliest on ties.
pub fn select_best(accuracies: &[f64]) -> Option<usize> {
    argmax_earliest(accuracies)
}

/// The datasets an episode runs on.
#[derive(Debug, Clone)]
pub struct Splits {
    pub world: Option<SimWorld>,
    pub validation: Dataset,
    pub test: Option<Dataset>,
    pub train: Option<Dataset>,
}

pub fn domain_name(id: TaskDomainId) -> &'static str {
    match id {
        TaskDomainId::Math => "math",
        TaskDomainId::Vqa => "vqa",
        TaskDomainId::Code => "code",
        TaskDomainId::Simulated => "simulated",
    }
}

pub fn build_world(config: &ExperimentConfig) -> SimWorld {
    let seed = config.dataset.world_seed.unwrap_or(config.seed);
    match config.dataset.world {
        WorldKind::Standard => SimWorld::standard(seed, config.dataset.subskills_per_skill),
        WorldKind::DifficultyGrid => SimWorld::difficulty_grid(seed),
    }
}

pub fn load_splits(config: &ExperimentConfig) -> Result<Splits> {
    let ds = &config.dataset;
    match ds.kind {
        DatasetKind::Simulated => {
            let world = build_world(config);
            let validation = world.build_split("validation", ds.validation_items)?;
            let test = (ds.test_items > 0)
                .then(|| world.build_split("test", ds.test_items))
                .transpose()?;
            let train = (ds.train_items > 0)
                .then(|| world.build_split("train", ds.train_items))
                .transpose()?;
            Ok(Splits {
                world: Some(world),
                validation,
                test,
                train,
            })
        }
        DatasetKind::Files => {
            let domain = match ds.comparison {
                Some(mode) => TaskDomain::with_mode(ds.domain, mode)?,
                None => TaskDomain::new(ds.domain),
            };
            let load = |p: &Option<PathBuf>| -> Result<Option<Dataset>> {
                match p {
                    Some(path) => {
                        let items: Vec<TaskItem> = read_jsonl(path)?;
                        Ok(Some(Dataset::new(domain, items)?))
                    }
                    None => Ok(None),
                }
            };
            let validation = load(&ds.validation)?
                .ok_or_else(|| Error::Config("dataset.validation is required".into()))?;
            Ok(Splits {
                world: None,
                validation,
                test: load(&ds.test)?,
                train: load(&ds.train)?,
            })
        }
    }
}

/// Provider client for the config. `transcript_out` receives every call
/// when recording is on.
pub fn build_llm(
    config: &ExperimentConfig,
    world: Option<&SimWorld>,
    transcript_out: Option<&Path>,
) -> Result<LlmClient> {
    let p = &config.provider;
    let client = match p.kind {
        ProviderKind::Mock => {
            let cfg = MockConfig {
                seed: config.seed,
                confusion_rate: p.confusion_rate,
                label_pool: world.map(SimWorld::skill_names).unwrap_or_default(),
            };
            LlmClient::new(Arc::new(MockBackend::new(cfg)))
        }
        ProviderKind::Transcript => {
            let path = p
                .transcript
                .as_ref()
                .ok_or_else(|| Error::Config("provider.transcript is required".into()))?;
            LlmClient::new(Arc::new(TranscriptBackend::from_file(path)?))
        }
        ProviderKind::Live => LlmClient::new(Arc::new(LiveBackend::new(p.live.clone())?)),
    };
    let mut client = client.with_max_in_flight(p.max_in_flight);
    if let Some(dir) = &p.templates_dir {
        client = client.with_templates(TemplateStore::with_overrides(dir)?);
    }
    if p.record_transcript {
        let log = match transcript_out {
            Some(path) => TranscriptLog::to_file(path),
            None => TranscriptLog::in_memory(),
        };
        client = client.with_transcript(log);
    }
    Ok(client)
}

pub fn build_student(config: &ExperimentConfig, splits: &Splits) -> Result<Box<dyn Student>> {
    let s = &config.student;
    match s.kind {
        StudentKind::Simulated => {
            let world = splits
                .world
                .as_ref()
                .ok_or_else(|| Error::Config("the simulated student needs a simulated dataset".into()))?;
            Ok(Box::new(SimStudent::<f64>::from_world(
                world,
                &splits.validation,
                s.params,
            )))
        }
        StudentKind::External => {
            if let Some(url) = &s.url {
                Ok(Box::new(ProtocolStudent::new(HttpTransport::new(url.clone())?)))
            } else {
                Ok(Box::new(ProtocolStudent::new(StdioTransport::spawn(&s.command)?)))
            }
        }
    }
}

pub fn build_policy(config: &ExperimentConfig, llm: &LlmClient, splits: &Splits) -> Result<Box<dyn Policy>> {
    let pc = &config.policy;
    if pc.kind == PolicyKind::External {
        return Ok(Box::new(ExternalPolicy {
            command: pc.command.clone(),
        }));
    }
    let no_state = config.ablation.no_state;
    let pool: Vec<String> = splits
        .train
        .as_ref()
        .map(|d| d.items.iter().map(|i| i.item_id.clone()).collect())
        .unwrap_or_default();
    let mask_seed = config.seed;
    let samples = config.ablation.no_state_samples;
    Ok(match config.environment.variant {
        EnvVariant::SkillTree if no_state => Box::new(RandomTreePolicy::new(config.seed, pc.k_new)),
        EnvVariant::SkillTree => Box::new(HandcraftedTreePolicy::new(HandcraftedConfig {
            k_new: pc.k_new,
            start_with_explore: pc.start_with_explore,
        })),
        EnvVariant::OpenEnded => {
            let mut p = OpenEndedPolicy::new(llm.clone());
            p.error_sample_cap = pc.error_sample_cap;
            if no_state {
                Box::new(NoStateMask::new(p, pool, samples, mask_seed))
            } else {
                Box::new(p)
            }
        }
        EnvVariant::SkillList => {
            let mut p = SkillListPolicy::new(llm.clone());
            p.errors_per_skill = pc.errors_per_skill;
            if no_state {
                Box::new(NoStateMask::new(p, pool, samples, mask_seed))
            } else {
                Box::new(p)
            }
        }
    })
}

pub fn env_config(config: &ExperimentConfig) -> EnvConfig {
    let e = &config.environment;
    EnvConfig {
        variant: e.variant,
        budget: e.budget,
        caps: e.forest,
        skill_source: match &e.skills {
            Some(skills) => SkillSource::UserSpecified {
                skills: skills.clone(),
            },
            None => SkillSource::Discovered {
                max_categories: e.max_categories,
            },
        },
        epochs: config.ablation.epochs,
        data_fraction: config.ablation.data_fraction,
    }
}

/// Episode directory writer; every method is a no-op without a directory.
struct Sink {
    dir: Option<PathBuf>,
}

impl Sink {
    fn create(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            for sub in ["", "data", "snapshots", "checkpoints"] {
                let p = d.join(sub);
                std::fs::create_dir_all(&p).map_err(|e| IoError::io(&p, e))?;
            }
            let traj = d.join("trajectory.jsonl");
            std::fs::write(&traj, b"").map_err(|e| IoError::io(&traj, e))?;
        }
        Ok(Sink {
            dir: dir.map(Path::to_path_buf),
        })
    }

    fn path(&self, rel: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(rel))
    }

    fn text(&self, rel: &str, body: &str) -> Result<()> {
        if let Some(p) = self.path(rel) {
            std::fs::write(&p, body).map_err(|e| IoError::io(&p, e))?;
        }
        Ok(())
    }

    fn json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        if let Some(p) = self.path(rel) {
            write_json(&p, value)?;
        }
        Ok(())
    }

    fn jsonl<T: Serialize>(&self, rel: &str, items: &[T]) -> Result<()> {
        if let Some(p) = self.path(rel) {
            write_jsonl(&p, items)?;
        }
        Ok(())
    }

    fn record(&self, record: &TrajectoryRecord) -> Result<()> {
        if let Some(p) = self.path("trajectory.jsonl") {
            crate::canonical::append_jsonl(&p, record)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Snapshot<'a> {
    step: u32,
    state_digest: &'a str,
    forest: Option<&'a crate::forest::SkillForest>,
    report: &'a PerformanceReport,
}

/// Run one episode. With `dir`, the full episode directory is written.
pub fn run_episode(config: &ExperimentConfig, dir: Option<&Path>) -> Result<EpisodeResult> {
    run_episode_with(config, dir, None)
}

/// As [`run_episode`], with an optional student replacing the configured one.
pub fn run_episode_with(
    config: &ExperimentConfig,
    dir: Option<&Path>,
    student: Option<Box<dyn Student>>,
) -> Result<EpisodeResult> {
    config.validate()?;
    let sink = Sink::create(dir)?;
    sink.text("config.toml", &config.to_toml())?;
    let splits = load_splits(config)?;
    if let Some(w) = &splits.world {
        sink.json("world.json", w)?;
    }
    sink.jsonl("validation.jsonl", &splits.validation.items)?;
    let llm = build_llm(
        config,
        splits.world.as_ref(),
        sink.path("transcript.jsonl").as_deref(),
    )?;
    let domain = splits.validation.domain.id;
    let discovery = SkillDiscovery::new(llm.clone(), domain_name(domain));
    let engine = Engine::new(domain, (domain != TaskDomainId::Simulated).then(|| llm.clone()))?;
    let student = match student {
        Some(s) => s,
        None => build_student(config, &splits)?,
    };
    let mut policy = build_policy(config, &llm, &splits)?;
    let mut env = Environment::new(
        env_config(config),
        splits.validation.clone(),
        discovery,
        engine,
        student,
    );

    let mut items: BTreeMap<String, TaskItem> = BTreeMap::new();
    for ds in [Some(&splits.validation), splits.train.as_ref()]
        .into_iter()
        .flatten()
    {
        for it in &ds.items {
            items.insert(it.item_id.clone(), it.clone());
        }
    }

    let mut records: Vec<TrajectoryRecord> = Vec::new();
    // Candidate checkpoints: step 0 and every training step.
    let mut candidates: Vec<(usize, Checkpoint, f64)> = Vec::new();
    let mut error: Option<String> = None;
    let mut stop: StopReason;

    let started = Instant::now();
    let reset = env.reset();
    match reset {
        Err(e) => {
            error = Some(e.to_string());
            stop = StopReason::Error;
        }
        Ok(state0) => {
            let report = env.report().cloned().expect("reset evaluates");
            let ckpt = env.checkpoint().cloned().expect("reset checkpoints");
            sink.json("assignments.json", &env.assigned())?;
            let rec = TrajectoryRecord {
                step: 0,
                iteration: 0,
                state_digest: state0.digest(),
                action: None,
                manifest: BTreeMap::new(),
                dropped: Vec::new(),
                trained: false,
                checkpoint_id: ckpt.checkpoint_id.clone(),
                reward: report.overall_accuracy,
                delta: 0.0,
                forward_accuracy: None,
                report,
                wall_clock_ms: started.elapsed().as_millis() as u64,
            };
            write_step(&sink, &rec, env.forest(), &[])?;
            sink.json(&format!("checkpoints/{}.json", ckpt.checkpoint_id), &ckpt)?;
            candidates.push((0, ckpt, rec.reward));
            records.push(rec);

            let mut state = state0;
            let mut best_so_far = records[0].reward;
            let mut stale = 0u32;
            let mut step = 0u32;
            loop {
                if env.iteration() >= config.max_iterations {
                    stop = StopReason::MaxIterations;
                    break;
                }
                if step >= config.max_steps {
                    stop = StopReason::MaxSteps;
                    break;
                }
                step += 1;
                let t0 = Instant::now();
                let ctx = PolicyContext {
                    budget: config.environment.budget,
                    domain,
                    caps: config.environment.forest,
                    items: &items,
                };
                let action = match policy.act(&state, &ctx) {
                    Ok(a) => a,
                    Err(e) => {
                        error = Some(e.to_string());
                        stop = StopReason::Error;
                        break;
                    }
                };
                if action.is_noop_exploit() && env.forest().is_some_and(|f| f.is_full()) {
                    stop = StopReason::ForestComplete;
                    break;
                }
                let state_digest = state.digest();
                let outcome = match env.step(&action) {
                    Ok(o) => o,
                    Err(e) => {
                        error = Some(e.to_string());
                        stop = StopReason::Error;
                        break;
                    }
                };
                let info = outcome.info;
                let rec = TrajectoryRecord {
                    step,
                    iteration: env.iteration(),
                    state_digest,
                    action: Some(action),
                    manifest: info.manifest,
                    dropped: info.dropped,
                    trained: info.trained,
                    checkpoint_id: info.checkpoint_id,
                    report: info.report,
                    reward: outcome.reward,
                    delta: info.delta,
                    forward_accuracy: info.forward_accuracy,
                    wall_clock_ms: t0.elapsed().as_millis() as u64,
                };
                write_step(&sink, &rec, env.forest(), &outcome.datums)?;
                state = outcome.state;
                if rec.trained {
                    let ckpt = env.checkpoint().cloned().expect("trained");
                    sink.json(&format!("checkpoints/{}.json", ckpt.checkpoint_id), &ckpt)?;
                    candidates.push((records.len(), ckpt, rec.reward));
                    if rec.reward > best_so_far {
                        best_so_far = rec.reward;
                        stale = 0;
                    } else {
                        stale += 1;
                    }
                }
                records.push(rec);
                if stale >= config.saturation_patience {
                    stop = StopReason::Saturated;
                    break;
                }
            }
        }
    }

    let accs: Vec<f64> = candidates.iter().map(|c| c.2).collect();
    let best = select_best(&accs).map(|i| &candidates[i]);
    let mut test_report = None;
    if let (Some((_, ckpt, _)), Some(test)) = (best, &splits.test) {
        if error.is_none() {
            let assigned = test_assignment(&env, test);
            match evaluate(env.student_mut(), ckpt, test, &assigned, ckpt.iteration) {
                Ok((_, report)) => test_report = Some(report),
                Err(e) => {
                    error = Some(e.to_string());
                    stop = StopReason::Error;
                }
            }
        }
    }
    let summary = EpisodeSummary {
        status: if error.is_some() {
            EpisodeStatus::Aborted
        } else {
            EpisodeStatus::Completed
        },
        stop_reason: stop,
        error,
        policy: policy.name(),
        skills: env.skills().to_vec(),
        steps: records.last().map_or(0, |r| r.step),
        training_iterations: env.iteration(),
        initial_validation_accuracy: records.first().map(|r| r.reward),
        best_step: best.map(|b| records[b.0].step),
        best_iteration: best.map(|b| records[b.0].iteration),
        best_checkpoint_id: best.map(|b| b.1.checkpoint_id.clone()),
        best_validation_accuracy: best.map(|b| b.2),
        test_accuracy: test_report.as_ref().map(|r| r.overall_accuracy),
        test_report,
        trajectory_digest: trajectory_digest(&records),
    };
    sink.json("summary.json", &summary)?;
    let result = EpisodeResult {
        best_checkpoint: best.map(|b| b.1.clone()),
        summary,
        records,
        validation: splits.validation,
        world: splits.world,
        assigned: env.assigned(),
    };
    if let Some(d) = dir {
        if !result.records.is_empty() {
            let analysis: Analysis =
                Analysis::compute(&result.records, &result.validation, result.summary.best_step);
            analysis.write_dir(&d.join("analysis"))?;
        }
    }
    Ok(result)
}

/// Test items take the skill of their hidden tag when the episode's skills
/// include it; otherwise the report falls back to the item's own label.
fn test_assignment(env: &Environment, test: &Dataset) -> BTreeMap<String, String> {
    let skills = env.skills();
    test.items
        .iter()
        .filter_map(|i| {
            let s = i.true_skill.as_ref()?;
            skills.contains(s).then(|| (i.item_id.clone(), s.clone()))
        })
        .collect()
}

fn write_step(
    sink: &Sink,
    rec: &TrajectoryRecord,
    forest: Option<&crate::forest::SkillForest>,
    datums: &[crate::model::TrainingDatum],
) -> Result<()> {
    sink.record(rec)?;
    if !datums.is_empty() {
        sink.jsonl(&format!("data/step-{:04}.jsonl", rec.step), datums)?;
    }
    sink.json(
        &format!("snapshots/step-{:04}.json", rec.step),
        &Snapshot {
            step: rec.step,
            state_digest: &rec.state_digest,
            forest,
            report: &rec.report,
        },
    )
}

pub fn read_trajectory(dir: &Path) -> Result<Vec<TrajectoryRecord>> {
    Ok(read_jsonl(&dir.join("trajectory.jsonl"))?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayOptions {
    /// Answer provider calls from the episode's own `transcript.jsonl`
    /// instead of the configured provider.
    pub from_recorded_transcript: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub recorded_steps: usize,
    pub replayed_steps: usize,
    pub recorded_digest: String,
    pub replayed_digest: String,
    /// First step whose record differs, if any.
    pub first_mismatch: Option<u32>,
    pub identical: bool,
}

/// Re-run an episode directory in memory and compare trajectories.
pub fn replay(dir: &Path, options: ReplayOptions) -> Result<ReplayReport> {
    let recorded = read_trajectory(dir)?;
    if recorded.is_empty() {
        let d = trajectory_digest(&[]);
        return Ok(ReplayReport {
            recorded_steps: 0,
            replayed_steps: 0,
            recorded_digest: d.clone(),
            replayed_digest: d,
            first_mismatch: None,
            identical: true,
        });
    }
    let mut config = ExperimentConfig::load(&dir.join("config.toml"))?;
    if options.from_recorded_transcript {
        config.provider.kind = ProviderKind::Transcript;
        config.provider.transcript = Some(dir.join("transcript.jsonl"));
    }
    if config.provider.kind == ProviderKind::Live {
        return Err(Error::ReplayRequiresDeterministicBackends(
            "provider.kind = \"live\"; replay from the recorded transcript instead".into(),
        ));
    }
    config.provider.record_transcript = false;
    let result = run_episode(&config, None)?;
    Ok(compare(&recorded, &result.records))
}

pub fn compare(recorded: &[TrajectoryRecord], replayed: &[TrajectoryRecord]) -> ReplayReport {
    let first_mismatch = recorded
        .iter()
        .zip(replayed)
        .find(|(a, b)| a.digest() != b.digest())
        .map(|(a, _)| a.step)
        .or_else(|| {
            (recorded.len() != replayed.len()).then(|| {
                let n = recorded.len().min(replayed.len());
                recorded.get(n).or(replayed.get(n)).map_or(n as u32, |r| r.step)
            })
        });
    let recorded_digest = trajectory_digest(recorded);
    let replayed_digest = trajectory_digest(replayed);
    ReplayReport {
        recorded_steps: recorded.len(),
        replayed_steps: replayed.len(),
        identical: recorded_digest == replayed_digest,
        recorded_digest,
        replayed_digest,
        first_mismatch,
    }
}

/// Whether the configured provider is reproducible without a transcript.
pub fn provider_is_deterministic(config: &ExperimentConfig) -> bool {
    match config.provider.kind {
        ProviderKind::Mock => BackendKind::Mock.is_deterministic(),
        ProviderKind::Transcript => BackendKind::Transcript.is_deterministic(),
        ProviderKind::Live => BackendKind::Live.is_deterministic(),
    }
}
