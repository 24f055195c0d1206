//! Generative planning agent: an actor that emits multi-step plans, a critic
//! that values every plan prefix, and a rollout controller that decides when
//! to drop the current plan for a fresh one.
//!
//! Module map:
//! - [`plangen`]: the plan generator
//! - [`planvalue`]: the plan-value critic and TD pieces
//! - [`replanner`]: commit-or-switch logic and the learned threshold
//! - [`replay`]: transition storage and sub-plan sampling
//! - [`envs`]: pendulum, mountain car and point-mass tasks
//! - [`baselines`]: SAC, fixed and random-duration action repeat
//! - [`agent`], [`runner`], [`config`], [`artifacts`]: training harness

pub mod agent;
pub mod artifacts;
pub mod baselines;
pub mod config;
pub mod envs;
pub mod error;
pub mod plan;
pub mod plangen;
pub mod planvalue;
pub mod replanner;
pub mod replay;
pub mod runner;

pub use agent::{Agent, Losses, UnitBatch};
pub use config::{AgentConfig, AgentKind};
pub use error::{GpmError, Result};
pub use plan::{omega, rho, ActionScale, Plan};
pub use replanner::Mode;
pub use runner::{evaluate, rollout_step, run, RunOutput, RunSummary};
