use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use teachenv::analysis::Analysis;
use teachenv::canonical::{read_json, read_jsonl};
use teachenv::discovery::SkillDiscovery;
use teachenv::episode::{
    build_llm, domain_name, load_splits, read_trajectory, replay, run_episode, EpisodeSummary, ReplayOptions,
};
use teachenv::forest::SkillForest;
use teachenv::model::{Dataset, TaskItem};
use teachenv::student::protocol::{run_conformance, HttpTransport, StdioTransport};
use teachenv::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "teachenv",
    version,
    about = "Teacher environments with a simulated student"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one episode and write its directory.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Episode directory (default: runs/<variant>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run an episode directory and compare trajectories.
    Replay {
        dir: PathBuf,
        /// Answer provider calls from the episode's transcript.
        #[arg(long)]
        from_transcript: bool,
    },
    /// Recompute the analysis bundle of an episode directory.
    Analyze {
        dir: PathBuf,
        /// Validation items (default: <dir>/validation.jsonl).
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Output directory (default: <dir>/analysis).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Skill discovery utilities.
    Skills {
        #[command(subcommand)]
        command: SkillsCmd,
    },
    /// Skill forest utilities.
    Forest {
        #[command(subcommand)]
        command: ForestCmd,
    },
    /// With-state vs no-state comparison over several seeds.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        /// Parallel worker processes.
        #[arg(long, default_value_t = 4)]
        jobs: usize,
    },
    /// External trainer utilities.
    Trainer {
        #[command(subcommand)]
        command: TrainerCmd,
    },
}

#[derive(Subcommand)]
enum SkillsCmd {
    /// Discover skills over the configured validation split.
    Discover {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand)]
enum ForestCmd {
    /// Print the forest snapshot of an episode step.
    Dump {
        dir: PathBuf,
        /// Step to show (default: last).
        #[arg(long)]
        step: Option<u32>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

#[derive(Subcommand)]
enum TrainerCmd {
    /// Run the wire-protocol conformance suite against a trainer.
    Check {
        /// HTTP endpoint instead of a worker command.
        #[arg(long)]
        url: Option<String>,
        /// Worker command and arguments.
        #[arg(trailing_var_arg = true)]
        command: Vec<String>,
    },
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iterations: Option<u32>,
    /// Any config key, e.g. `--set environment.variant=skill-list`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.max_iterations {
            cfg.max_iterations = n;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set {kv}: expected KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Run { cfg, out } => cmd_run(&cfg, out),
        Cmd::Replay { dir, from_transcript } => cmd_replay(&dir, from_transcript),
        Cmd::Analyze { dir, validation, out } => cmd_analyze(&dir, validation, out),
        Cmd::Skills {
            command: SkillsCmd::Discover { cfg },
        } => cmd_discover(&cfg),
        Cmd::Forest {
            command: ForestCmd::Dump { dir, step, format },
        } => cmd_forest_dump(&dir, step, format),
        Cmd::Sweep {
            cfg,
            seeds,
            first_seed,
            out,
            jobs,
        } => cmd_sweep(&cfg, first_seed, seeds, &out, jobs),
        Cmd::Trainer {
            command: TrainerCmd::Check { url, command },
        } => cmd_trainer_check(url, command),
    }
}

fn variant_name(cfg: &ExperimentConfig) -> String {
    serde_json::to_value(cfg.environment.variant)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_else(|| "episode".into())
}

fn cmd_run(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let cfg = args.load()?;
    let dir = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", variant_name(&cfg), cfg.seed)));
    let result = run_episode(&cfg, Some(&dir))?;
    let s = &result.summary;
    println!("episode: {}", dir.display());
    println!("status: {:?} ({:?})", s.status, s.stop_reason);
    if let Some(e) = &s.error {
        println!("error: {e}");
    }
    println!("policy: {}", s.policy);
    println!("skills: {}", s.skills.join(", "));
    println!(
        "steps: {}  training iterations: {}",
        s.steps, s.training_iterations
    );
    if let (Some(a0), Some(best)) = (s.initial_validation_accuracy, s.best_validation_accuracy) {
        println!(
            "validation: {:.2} -> {:.2} (best at step {})",
            a0 * 100.0,
            best * 100.0,
            s.best_step.unwrap_or(0)
        );
    }
    if let Some(t) = s.test_accuracy {
        println!("test (best checkpoint): {:.2}", t * 100.0);
    }
    println!("trajectory digest: {}", s.trajectory_digest);
    if s.error.is_some() {
        std::process::exit(2);
    }
    Ok(())
}

fn cmd_replay(dir: &Path, from_transcript: bool) -> Result<()> {
    let rep = replay(
        dir,
        ReplayOptions {
            from_recorded_transcript: from_transcript,
        },
    )?;
    println!(
        "recorded steps: {}  replayed steps: {}",
        rep.recorded_steps, rep.replayed_steps
    );
    println!("recorded digest: {}", rep.recorded_digest);
    println!("replayed digest: {}", rep.replayed_digest);
    if rep.identical {
        println!("identical");
        Ok(())
    } else {
        match rep.first_mismatch {
            Some(step) => println!("first mismatch at step {step}"),
            None => println!("digests differ"),
        }
        std::process::exit(1);
    }
}

fn cmd_analyze(dir: &Path, validation: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let records = read_trajectory(dir)?;
    let vpath = validation.unwrap_or_else(|| dir.join("validation.jsonl"));
    let items: Vec<TaskItem> = read_jsonl(&vpath)?;
    let summary: Option<EpisodeSummary> = read_json(&dir.join("summary.json")).ok();
    let config = ExperimentConfig::load(&dir.join("config.toml")).ok();
    let domain = match config {
        Some(c) => load_splits(&c).map(|s| s.validation.domain).ok(),
        None => None,
    }
    .unwrap_or_else(|| teachenv::model::TaskDomain::new(teachenv::model::TaskDomainId::Simulated));
    let validation = Dataset { domain, items };
    let analysis: Analysis<f64> = Analysis::compute(&records, &validation, summary.and_then(|s| s.best_step));
    let out = out.unwrap_or_else(|| dir.join("analysis"));
    analysis.write_dir(&out)?;
    print!("{}", analysis.summary_text());
    println!("\nwritten to {}", out.display());
    Ok(())
}

fn cmd_discover(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let splits = load_splits(&cfg)?;
    let llm = build_llm(&cfg, splits.world.as_ref(), None)?;
    let discovery = SkillDiscovery::new(llm, domain_name(splits.validation.domain.id))
        .with_max_categories(cfg.environment.max_categories);
    let found = discovery.discover(&splits.validation)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for skill in found.assignment.assigned().values() {
        *counts.entry(skill.clone()).or_default() += 1;
    }
    let doc = serde_json::json!({
        "skills": found.skills,
        "items_per_skill": counts,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn cmd_forest_dump(dir: &Path, step: Option<u32>, format: Format) -> Result<()> {
    let step = match step {
        Some(s) => s,
        None => read_trajectory(dir)?
            .last()
            .map(|r| r.step)
            .context("empty trajectory")?,
    };
    let path = dir.join("snapshots").join(format!("step-{step:04}.json"));
    let snap: serde_json::Value = read_json(&path)?;
    let forest = snap.get("forest").cloned().unwrap_or(serde_json::Value::Null);
    if forest.is_null() {
        bail!("no forest in {}", path.display());
    }
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&forest)?),
        Format::Table => {
            let f: SkillForest = serde_json::from_value(forest)?;
            print!("{}", f.render_table());
        }
    }
    Ok(())
}

fn cmd_sweep(args: &ConfigArgs, first: u64, seeds: u64, out: &Path, jobs: usize) -> Result<()> {
    let base = args.load()?;
    std::fs::create_dir_all(out)?;
    let base_path = out.join("base.toml");
    std::fs::write(&base_path, base.to_toml())?;
    let exe = std::env::current_exe()?;
    let mut runs: Vec<(u64, bool, PathBuf)> = Vec::new();
    for seed in first..first + seeds {
        for no_state in [false, true] {
            let tag = if no_state { "no-state" } else { "with-state" };
            runs.push((seed, no_state, out.join(format!("seed{seed:03}-{tag}"))));
        }
    }
    for chunk in runs.chunks(jobs.max(1)) {
        let mut children = Vec::new();
        for (seed, no_state, dir) in chunk {
            let child = Command::new(&exe)
                .arg("run")
                .arg("--config")
                .arg(&base_path)
                .arg("--seed")
                .arg(seed.to_string())
                .arg("--set")
                .arg(format!("ablation.no_state={no_state}"))
                .arg("--out")
                .arg(dir)
                .stdout(std::process::Stdio::null())
                .spawn()
                .with_context(|| format!("spawning {}", exe.display()))?;
            children.push((dir.clone(), child));
        }
        for (dir, mut child) in children {
            let status = child.wait()?;
            if !status.success() {
                bail!("episode {} failed with {status}", dir.display());
            }
        }
    }
    let acc = |dir: &Path| -> Result<f64> {
        let s: EpisodeSummary = read_json(&dir.join("summary.json"))?;
        s.best_validation_accuracy.context("no checkpoint selected")
    };
    println!(
        "{:>6} {:>12} {:>12} {:>8}",
        "seed", "with-state", "no-state", "diff"
    );
    let (mut sw, mut sn) = (0.0, 0.0);
    for pair in runs.chunks(2) {
        let w = acc(&pair[0].2)?;
        let n = acc(&pair[1].2)?;
        sw += w;
        sn += n;
        println!(
            "{:>6} {:>12.2} {:>12.2} {:>+8.2}",
            pair[0].0,
            w * 100.0,
            n * 100.0,
            (w - n) * 100.0
        );
    }
    let k = seeds.max(1) as f64;
    println!(
        "{:>6} {:>12.2} {:>12.2} {:>+8.2}",
        "mean",
        sw / k * 100.0,
        sn / k * 100.0,
        (sw - sn) / k * 100.0
    );
    Ok(())
}

fn cmd_trainer_check(url: Option<String>, command: Vec<String>) -> Result<()> {
    let report = match url {
        Some(u) => run_conformance(&mut HttpTransport::new(u)?),
        None => {
            if command.is_empty() {
                bail!("give a worker command or --url");
            }
            run_conformance(&mut StdioTransport::spawn(&command)?)
        }
    };
    for c in &report.checks {
        println!(
            "{} {}{}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            if c.detail.is_empty() {
                String::new()
            } else {
                format!(": {}", c.detail)
            }
        );
    }
    if !report.all_passed() {
        std::process::exit(1);
    }
    Ok(())
}
