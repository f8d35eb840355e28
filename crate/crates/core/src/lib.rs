//! Teacher environments for data-generation agents.
//!
//! A policy observes how a student performs on a validation split, plans
//! training data, and an engine renders the plan. The student trains on it
//! and is evaluated again. Three environments expose increasingly
//! structured state: raw errors, errors grouped by skill, and a skill
//! forest with explore/exploit actions.
//!
//! Everything runs offline against a deterministic simulated student and a
//! mock provider, and can be pointed at a live chat endpoint or an external
//! trainer process instead.

pub mod analysis;
pub mod canonical;
pub mod config;
pub mod discovery;
pub mod engine;
pub mod env;
pub mod episode;
pub mod error;
pub mod forest;
pub mod model;
pub mod num;
pub mod policy;
pub mod provider;
pub mod sim;
pub mod student;

pub use config::ExperimentConfig;
pub use env::{EnvConfig, Environment};
pub use episode::{replay, run_episode, EpisodeResult, TrajectoryRecord};
pub use error::{Error, Result};
pub use forest::{ForestCaps, SkillForest};
pub use model::{Action, Dataset, State};
pub use num::{Real, Scalar};

/// Simulated student in double precision.
pub type SimulatedStudent = student::SimStudent<f64>;
/// Simulated student in single precision.
pub type SimulatedStudentF32 = student::SimStudent<f32>;
/// Analysis in double precision.
pub type Analysis = analysis::Analysis<f64>;
/// Analysis on exact rationals.
pub type ExactAnalysis = analysis::Analysis<num_rational::Ratio<i64>>;
