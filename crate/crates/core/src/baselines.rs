//! Comparison agents. SAC is the planning agent with one-step plans that are
//! replaced every step, trained on plain transitions; FAR and EZ wrap SAC's
//! acting with fixed and random-duration action repeats. None of them change
//! the learning losses.

use rand::Rng;
use rand_distr::{Distribution, Zeta};

use crate::config::{AgentConfig, AgentKind};
use crate::error::{GpmError, Result};
use crate::replay::{ReplayBuffer, SampledPlanBatch};

/// How long each fresh action is held.
#[derive(Debug, Clone, PartialEq)]
pub enum RepeatLaw {
    Fixed(usize),
    /// Zeta-distributed durations with the given exponent, capped.
    Zeta { exponent: f64, cap: usize },
}

impl RepeatLaw {
    pub fn from_config(cfg: &AgentConfig) -> Option<Self> {
        match cfg.agent {
            AgentKind::Far => Some(RepeatLaw::Fixed(cfg.far_repeat)),
            AgentKind::Ez => Some(RepeatLaw::Zeta {
                exponent: cfg.ez_exponent,
                cap: cfg.ez_cap(),
            }),
            AgentKind::Gpm | AgentKind::Sac => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        match *self {
            RepeatLaw::Fixed(k) if k >= 1 => Ok(k),
            RepeatLaw::Fixed(_) => Err(GpmError::Config("far_repeat must be at least 1".into())),
            // nothing to draw, so the acting stream stays in step with SAC
            RepeatLaw::Zeta { cap: 0 | 1, .. } => Ok(1),
            RepeatLaw::Zeta { exponent, cap } => {
                let z = Zeta::new(exponent).map_err(|e| GpmError::Config(format!("ez_exponent: {e}")))?;
                let n = z.sample(rng);
                Ok(if n >= cap as f64 { cap } else { n as usize }.max(1))
            }
        }
    }

    /// Probability of each duration `1..=cap` (or just `k` when fixed).
    pub fn pmf(&self) -> Vec<f64> {
        match *self {
            RepeatLaw::Fixed(k) => {
                let mut p = vec![0.0; k];
                p[k - 1] = 1.0;
                p
            }
            RepeatLaw::Zeta { exponent, cap } => {
                let norm = riemann_zeta(exponent);
                let mut p: Vec<f64> = (1..cap).map(|k| (k as f64).powf(-exponent) / norm).collect();
                let head: f64 = p.iter().sum();
                p.push(1.0 - head);
                p
            }
        }
    }
}

/// Riemann zeta for `s > 1`: partial sum plus an Euler-Maclaurin tail.
pub fn riemann_zeta(s: f64) -> f64 {
    let n = 1000u32;
    let partial: f64 = (1..n).map(|k| (k as f64).powf(-s)).sum();
    let nf = n as f64;
    partial + nf.powf(1.0 - s) / (s - 1.0) + 0.5 * nf.powf(-s) + s / 12.0 * nf.powf(-s - 1.0)
}

/// Acting-time action repeat over a one-step policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionRepeater {
    pub law: RepeatLaw,
    cached: Option<Vec<f64>>,
    remaining: usize,
}

impl ActionRepeater {
    pub fn new(law: RepeatLaw) -> Self {
        Self {
            law,
            cached: None,
            remaining: 0,
        }
    }

    /// Returns the action to execute and whether the policy was queried.
    /// EZ acts greedily without repeats in evaluation; FAR keeps its fixed
    /// schedule.
    pub fn act<R: Rng + ?Sized>(
        &mut self,
        query: impl FnOnce(&mut R) -> Result<Vec<f64>>,
        rng: &mut R,
        eval: bool,
    ) -> Result<(Vec<f64>, bool)> {
        if eval && matches!(self.law, RepeatLaw::Zeta { .. }) {
            return Ok((query(rng)?, true));
        }
        if self.remaining == 0 || self.cached.is_none() {
            let a = query(rng)?;
            self.remaining = self.law.sample(rng)?;
            self.cached = Some(a);
            self.remaining -= 1;
            return Ok((self.cached.clone().unwrap(), true));
        }
        self.remaining -= 1;
        Ok((self.cached.clone().unwrap(), false))
    }

    /// Forgets the cached action at an episode boundary.
    pub fn reset(&mut self) {
        self.cached = None;
        self.remaining = 0;
    }
}

/// Training batch for an agent kind: plans for the planning agent, plain
/// transitions for the baselines.
pub fn sample_batch<R: Rng + ?Sized>(
    kind: AgentKind,
    replay: &ReplayBuffer,
    batch: usize,
    plan_len: usize,
    rng: &mut R,
) -> Result<SampledPlanBatch> {
    match kind {
        AgentKind::Gpm => replay.sample_plan_batch(batch, plan_len, rng),
        _ => replay.sample_transitions(batch, rng),
    }
}
