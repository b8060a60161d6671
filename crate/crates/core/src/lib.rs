//! Anchored one-step flow matching for multimodal trajectory forecasting.
//!
//! The pipeline has three learned stages that share one parameter set:
//!
//! * [`encoder`] maps an agent's history and junction geometry to a context vector,
//! * [`prior`] turns the context into `K` mode-specialized anchor distributions,
//! * [`flowfield`] is a step-conditioned displacement field that transports each
//!   anchor to a refined trajectory, trained with straight-line flow matching and a
//!   two-half-steps-equal-one-full-step consistency term against an EMA teacher.
//!
//! [`selector`] scores, prunes and ranks candidates and hosts the metrics suite.
//! [`scenesynth`] generates the synthetic junction scenes everything is trained on,
//! and [`diffcore`] holds the reverse-mode tape, optimizer, EMA and checkpoints.

pub mod ablation;
pub mod config;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod flowfield;
pub mod model;
pub mod prior;
pub mod report;
pub mod scenesynth;
pub mod selector;
pub mod train;

pub use config::{RunConfig, Variant};
pub use error::{FlowsError, Result};
pub use eval::{evaluate, EvalOptions};
pub use model::Model;
pub use scenesynth::{SceneSample, ScenarioConfig, Trajectory};
pub use selector::MetricsReport;
pub use train::{train, TrainOutcome};
