//! Desk-scale continuous-control environments.
//!
//! All environments are deterministic given the reset seed and the action
//! sequence. Constants are listed in `docs/environments.md`.

mod mountaincar;
mod pendulum;
mod pointmass;

pub use mountaincar::MountainCar;
pub use pendulum::Pendulum;
pub use pointmass::{shrink_setpoint, PointMass, SHRINK_DELTA};

use serde::{Deserialize, Serialize};

use crate::error::{GpmError, Result};

/// How an episode ended at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    #[default]
    None,
    /// A genuine absorbing state; no bootstrapping past it.
    Terminal,
    /// Step-limit truncation; the value of the next state still counts.
    Timeout,
}

impl TerminalKind {
    pub fn ends_episode(self) -> bool {
        self != TerminalKind::None
    }

    pub fn as_u8(self) -> u8 {
        match self {
            TerminalKind::None => 0,
            TerminalKind::Terminal => 1,
            TerminalKind::Timeout => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(TerminalKind::None),
            1 => Some(TerminalKind::Terminal),
            2 => Some(TerminalKind::Timeout),
            _ => None,
        }
    }
}

/// Coordinate frame a plan's actions are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlanFrame {
    /// Primitive actions; time-forwarding is a plain shift.
    #[default]
    RawAction,
    /// Positional setpoints relative to the agent; time-forwarding also
    /// re-expresses them around the agent's new position.
    EgoSetpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_steps: usize,
    pub dt: Option<f64>,
    pub frame: PlanFrame,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(GpmError::Config(format!("{}: action bounds do not match action width", self.name)));
        }
        let finite = self.action_low.iter().chain(&self.action_high).all(|b| b.is_finite());
        let ordered = self.action_low.iter().zip(&self.action_high).all(|(l, h)| l < h);
        if !finite || !ordered {
            return Err(GpmError::Config(format!("{}: action bounds must be finite and ordered", self.name)));
        }
        if self.max_steps == 0 {
            return Err(GpmError::Config(format!("{}: max_steps must be at least 1", self.name)));
        }
        Ok(())
    }

    /// Clips an action into the box.
    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (l, h))| a.clamp(*l, *h))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: TerminalKind,
    /// Low-dimensional position used for visitation logging.
    pub position: Vec<f64>,
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode; the initial state is a pure function of `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    fn step(&mut self, action: &[f64]) -> StepResult;

    /// Steps taken since the last reset.
    fn steps(&self) -> usize;

    /// Position used for visitation logging.
    fn position(&self) -> Vec<f64>;

    /// Per-dimension `(low, high, bins)` grid over [`position`](Self::position)
    /// used for visitation counts.
    fn position_grid(&self) -> Vec<(f64, f64, usize)>;

    /// Origin of the ego frame (the agent position). Empty for raw-action
    /// tasks.
    fn frame_origin(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Task names accepted by [`make_env`].
pub const TASKS: &[&str] = &["pendulum", "mountaincar", "pointmass"];

/// Grid cell of `position`, clamping outliers into the edge cells.
pub fn position_bin(grid: &[(f64, f64, usize)], position: &[f64]) -> Vec<usize> {
    grid.iter()
        .zip(position)
        .map(|(&(lo, hi, n), &x)| {
            let t = ((x - lo) / (hi - lo) * n as f64).floor();
            t.clamp(0.0, (n - 1) as f64) as usize
        })
        .collect()
}

pub fn make_env(task: &str) -> Result<Box<dyn Environment>> {
    match task {
        "pendulum" => Ok(Box::new(Pendulum::new())),
        "mountaincar" => Ok(Box::new(MountainCar::new())),
        "pointmass" => Ok(Box::new(PointMass::new())),
        other => Err(GpmError::Config(format!(
            "unknown task `{other}` (expected one of {})",
            TASKS.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_task_builds_a_valid_spec() {
        for task in TASKS {
            let env = make_env(task).unwrap();
            env.spec().validate().unwrap();
        }
        assert!(make_env("cartpole").is_err());
        for task in TASKS {
            let env = make_env(task).unwrap();
            assert_eq!(env.position_grid().len(), env.position().len());
        }
    }

    #[test]
    fn terminal_kind_codes_round_trip() {
        for k in [TerminalKind::None, TerminalKind::Terminal, TerminalKind::Timeout] {
            assert_eq!(TerminalKind::from_u8(k.as_u8()), Some(k));
        }
        assert_eq!(TerminalKind::from_u8(7), None);
    }

    #[test]
    fn position_bins_clamp_to_grid() {
        let grid = [(0.0, 1.0, 10), (-1.0, 1.0, 4)];
        assert_eq!(position_bin(&grid, &[0.05, 0.99]), vec![0, 3]);
        assert_eq!(position_bin(&grid, &[-3.0, 7.0]), vec![0, 3]);
        assert_eq!(position_bin(&grid, &[0.55, 0.0]), vec![5, 2]);
    }
}
