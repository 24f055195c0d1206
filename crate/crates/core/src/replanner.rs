//! Commit-or-switch bookkeeping and the learned replanning threshold.

use gpm_diffcore::sigmoid;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::PlanFrame;
use crate::error::{GpmError, Result};
use crate::plan::Plan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Value-based switching with the learned threshold.
    #[default]
    Standard,
    /// Switch only when the current plan is used up.
    Commit,
    /// Switch at every step.
    Mpc,
}

impl std::str::FromStr for Mode {
    type Err = GpmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Mode::Standard),
            "commit" => Ok(Mode::Commit),
            "mpc" => Ok(Mode::Mpc),
            other => Err(GpmError::Config(format!("mode: unknown value `{other}` (standard, commit, mpc)"))),
        }
    }
}

/// Remaining part of the adopted plan and how long it has been followed.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanCursor {
    pub remaining: Plan,
    pub steps_committed: usize,
}

impl PlanCursor {
    pub fn new(frame: PlanFrame) -> Self {
        Self {
            remaining: Plan::empty(frame),
            steps_committed: 0,
        }
    }

    /// Drops the plan; returns the length of the segment that was cut short.
    pub fn clear(&mut self) -> Option<usize> {
        self.remaining.actions.clear();
        let seg = std::mem::take(&mut self.steps_committed);
        (seg > 0).then_some(seg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchState {
    pub epsilon: f64,
    pub l_commit_ema: f64,
    pub l_commit_target: f64,
    pub ema_coeff: f64,
    pub kappa: f64,
    pub mode: Mode,
}

impl SwitchState {
    pub fn new(mode: Mode, l_commit_target: f64) -> Self {
        Self {
            epsilon: 1.0,
            l_commit_ema: l_commit_target,
            l_commit_target,
            ema_coeff: 0.95,
            kappa: 1.0,
            mode,
        }
    }

    /// Probability of adopting the new plan given the value gap
    /// `Q(s, new) - Q(s, old)` at the old plan's length.
    pub fn switch_probability(&self, gap: f64) -> f64 {
        sigmoid((gap - self.epsilon) / self.kappa)
    }

    /// Replanning signal. `old_len` is the number of actions left in the old
    /// plan; `gap` is only consulted when a real choice is made. With
    /// `greedy` the categorical's mode is taken instead of a draw.
    pub fn decide<R: Rng + ?Sized>(&self, old_len: usize, gap: impl FnOnce() -> Result<f64>, greedy: bool, rng: &mut R) -> Result<bool> {
        if old_len == 0 {
            return Ok(true);
        }
        match self.mode {
            Mode::Commit => Ok(false),
            Mode::Mpc => Ok(true),
            Mode::Standard => {
                let gap = gap()?;
                if greedy {
                    Ok(gap > self.epsilon)
                } else {
                    Ok(rng.random::<f64>() < self.switch_probability(gap))
                }
            }
        }
    }

    /// `ema <- c * ema + (1 - c) * segment`
    pub fn record_commitment(&mut self, segment: usize) {
        self.l_commit_ema = self.ema_coeff * self.l_commit_ema + (1.0 - self.ema_coeff) * segment as f64;
    }

    /// One gradient step on `eps * (ema - target)`, projected onto `eps >= 0`.
    pub fn update_epsilon(&mut self, lr: f64) {
        self.epsilon = (self.epsilon - lr * (self.l_commit_ema - self.l_commit_target)).max(0.0);
    }
}
