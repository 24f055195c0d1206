//! The plan generator: an autoregressive stochastic actor.
//!
//! The encoder feeds a squashed-Gaussian head for the first action and a
//! recurrent decoder that unrolls the rest of the plan with a residual
//! update, so a freshly initialized generator emits pure action repeats.
//! All actions live in the `[-1, 1]` box; callers rescale to environment
//! units.

use std::f64::consts::{LN_2, PI};

use gpm_diffcore::{
    Activation, CellKind, Init, Linear, Matrix, Mlp, MlpSpec, ParamStore, Params, RecurrentCell, RecurrentCellSpec,
    RecurrentState, Tape, Var,
};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GpmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderPrior {
    /// `a_i = a_{i-1} + g`
    #[default]
    Repeat,
    /// `a_i = a_{i-1} + (a_{i-1} - a_{i-2}) + g`
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub plan_len: usize,
    /// Encoder hidden widths.
    pub hidden: Vec<usize>,
    pub rnn_hidden: usize,
    pub prior: DecoderPrior,
    /// Multiplier on the residual decoder output.
    pub g_scale: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl GeneratorConfig {
    pub fn new(obs_dim: usize, action_dim: usize, plan_len: usize, hidden: Vec<usize>, rnn_hidden: usize) -> Self {
        Self {
            obs_dim,
            action_dim,
            plan_len,
            hidden,
            rnn_hidden,
            prior: DecoderPrior::Repeat,
            g_scale: 0.1,
            log_std_min: -20.0,
            log_std_max: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.plan_len == 0 {
            return Err(GpmError::Config("plan_len must be at least 1".into()));
        }
        if self.obs_dim == 0 || self.action_dim == 0 || self.rnn_hidden == 0 {
            return Err(GpmError::Config("generator widths must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(GpmError::Config(format!("hidden widths must be non-empty and positive: {:?}", self.hidden)));
        }
        if self.log_std_min >= self.log_std_max {
            return Err(GpmError::Config("log_std_min must be below log_std_max".into()));
        }
        Ok(())
    }
}

/// One residual decoding step on plain values, clamped to `[lo, hi]`.
///
/// `delta` is the last action difference under the linear prior and `None`
/// under the repeat prior; `g` is the already-scaled residual.
pub fn decode_step(prev: &[f64], delta: Option<&[f64]>, g: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    prev.iter()
        .enumerate()
        .map(|(j, p)| (p + delta.map_or(0.0, |d| d[j]) + g[j]).clamp(lo, hi))
        .collect()
}

/// A sampled plan with the first-step quantities the losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSample {
    pub actions: Vec<Vec<f64>>,
    pub first_step_log_prob: f64,
    pub pre_squash_noise: Vec<f64>,
}

/// Recorded forward pass over a batch.
pub struct PlanForward {
    /// One `B x action_dim` node per plan step.
    pub actions: Vec<Var>,
    /// `B x 1` log-density of the first action.
    pub log_prob: Var,
    pub mean: Var,
    pub log_std: Var,
    /// Values fed to the recurrent cell at each decoding step.
    pub fed: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanGenerator {
    pub config: GeneratorConfig,
    pub encoder: Mlp,
    pub mean: Linear,
    pub log_std: Linear,
    pub init: Linear,
    pub cell: RecurrentCell,
    pub g: Linear,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

impl PlanGenerator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let a = config.action_dim;
        let k = *config.hidden.last().unwrap();
        let mut widths = vec![config.obs_dim];
        widths.extend(&config.hidden);
        let encoder = Mlp::new(
            store,
            "actor.encoder",
            MlpSpec::new(widths, Activation::Relu, Activation::Relu),
            Init::FanIn,
            rng,
        )?;
        let mean = Linear::new(store, "actor.mean", k, a, Init::FanIn, rng);
        let log_std = Linear::new(store, "actor.log_std", k, a, Init::FanIn, rng);
        let init = Linear::new(store, "actor.init", k, config.rnn_hidden, Init::FanIn, rng);
        let fed_width = match config.prior {
            DecoderPrior::Repeat => a,
            DecoderPrior::Linear => 2 * a,
        };
        let cell = RecurrentCell::new(
            store,
            "actor.gru",
            RecurrentCellSpec {
                kind: CellKind::Gru,
                input: fed_width,
                hidden: config.rnn_hidden,
            },
            rng,
        )?;
        let g = Linear::new(store, "actor.g", config.rnn_hidden + fed_width, a, Init::Zeros, rng);
        Ok(Self {
            config,
            encoder,
            mean,
            log_std,
            init,
            cell,
            g,
        })
    }

    /// Records a forward pass for `len` plan steps. `noise` is the
    /// pre-squash standard-normal draw; zeros give the mode.
    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, obs: Var, noise: &Matrix, len: usize) -> Result<PlanForward> {
        self.forward_with_feed(tape, p, obs, noise, len, None)
    }

    /// As [`forward`](Self::forward), optionally substituting the values fed
    /// to the recurrent cell. Because that input is detached, feeding the
    /// recorded values back in reproduces the pass and its gradients.
    pub fn forward_with_feed(
        &self,
        tape: &mut Tape,
        p: Params<'_>,
        obs: Var,
        noise: &Matrix,
        len: usize,
        feed: Option<&[Matrix]>,
    ) -> Result<PlanForward> {
        let cfg = &self.config;
        let (rows, width) = tape.value(obs).shape();
        if width != cfg.obs_dim {
            return Err(GpmError::Config(format!("observation width {width}, generator expects {}", cfg.obs_dim)));
        }
        if noise.shape() != (rows, cfg.action_dim) {
            return Err(GpmError::Config(format!(
                "noise shape {:?}, expected ({rows}, {})",
                noise.shape(),
                cfg.action_dim
            )));
        }
        if len == 0 {
            return Err(GpmError::Usage("plan length must be at least 1".into()));
        }
        let z = self.encoder.forward(tape, p, obs);
        let mean = self.mean.forward(tape, p, z);
        let raw_log_std = self.log_std.forward(tape, p, z);
        let log_std = tape.clamp(raw_log_std, cfg.log_std_min, cfg.log_std_max);
        let std = tape.exp(log_std);
        let n = tape.constant(noise.clone());
        let spread = tape.mul(std, n);
        let u = tape.add(mean, spread);
        let a0 = tape.tanh(u);

        // log N(n) - log_std - log(1 - tanh(u)^2), with the squash term in the
        // overflow-free form 2 (ln 2 - u - softplus(-2u)).
        let neg2u = tape.scale(u, -2.0);
        let sp = tape.softplus(neg2u);
        let two_u = tape.scale(u, 2.0);
        let two_sp = tape.scale(sp, 2.0);
        let corr = tape.add(two_u, two_sp);
        let per_dim = tape.sub(corr, log_std);
        let gauss = tape.constant(noise.map(|x| -0.5 * x * x - HALF_LN_2PI - 2.0 * LN_2));
        let per_dim = tape.add(per_dim, gauss);
        let log_prob = tape.row_sum(per_dim);

        let mut actions = vec![a0];
        let mut fed = Vec::new();
        if len > 1 {
            let h0_pre = self.init.forward(tape, p, z);
            let h0 = tape.tanh(h0_pre);
            let mut state = RecurrentState { h: h0, c: None };
            let mut prev = a0;
            let mut prev2: Option<Var> = None;
            for i in 1..len {
                let delta = match cfg.prior {
                    DecoderPrior::Repeat => None,
                    DecoderPrior::Linear => Some(match prev2 {
                        Some(p2) => tape.sub(prev, p2),
                        None => tape.constant(Matrix::zeros(rows, cfg.action_dim)),
                    }),
                };
                let input = match feed {
                    Some(f) => tape.constant(f[i - 1].clone()),
                    None => {
                        let prev_d = tape.detach(prev);
                        match delta {
                            Some(d) => {
                                let d_d = tape.detach(d);
                                tape.concat(&[prev_d, d_d])
                            }
                            None => prev_d,
                        }
                    }
                };
                fed.push(tape.value(input).clone());
                let (next_state, out) = self.cell.step(tape, p, state, input)?;
                state = next_state;
                let g_in = tape.concat(&[out, input]);
                let g_raw = self.g.forward(tape, p, g_in);
                let g = tape.scale(g_raw, cfg.g_scale);
                let base = match delta {
                    Some(d) => tape.add(prev, d),
                    None => prev,
                };
                let pre = tape.add(base, g);
                let a = tape.clamp(pre, -1.0, 1.0);
                prev2 = Some(prev);
                prev = a;
                actions.push(a);
            }
        }
        for &a in &actions {
            if !tape.value(a).is_finite() {
                return Err(GpmError::NonFinite("plan generator output".into()));
            }
        }
        Ok(PlanForward {
            actions,
            log_prob,
            mean,
            log_std,
            fed,
        })
    }

    /// Draws a `rows x action_dim` standard-normal matrix.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Matrix {
        let data = (0..rows * self.config.action_dim).map(|_| rng.sample(StandardNormal)).collect();
        Matrix::from_vec(rows, self.config.action_dim, data)
    }

    fn single(&self, store: &ParamStore, obs: &[f64], noise: &Matrix) -> Result<(Vec<Vec<f64>>, f64)> {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(obs));
        let out = self.forward(&mut tape, Params::frozen(store), x, noise, self.config.plan_len)?;
        let actions = out.actions.iter().map(|&a| tape.value(a).data().to_vec()).collect();
        Ok((actions, tape.value(out.log_prob).item()))
    }

    /// Samples a full-length plan for one observation.
    pub fn sample_plan<R: Rng + ?Sized>(&self, store: &ParamStore, obs: &[f64], rng: &mut R) -> Result<PlanSample> {
        let noise = self.draw_noise(1, rng);
        let (actions, lp) = self.single(store, obs, &noise)?;
        if !lp.is_finite() {
            return Err(GpmError::NonFinite("first-step log-probability".into()));
        }
        Ok(PlanSample {
            actions,
            first_step_log_prob: lp,
            pre_squash_noise: noise.into_vec(),
        })
    }

    /// The noiseless plan.
    pub fn mode_plan(&self, store: &ParamStore, obs: &[f64]) -> Result<Vec<Vec<f64>>> {
        let noise = Matrix::zeros(1, self.config.action_dim);
        Ok(self.single(store, obs, &noise)?.0)
    }

    /// Mean and clamped log-std of the first-step Gaussian before squashing.
    pub fn first_step_params(&self, store: &ParamStore, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(obs));
        let noise = Matrix::zeros(1, self.config.action_dim);
        let out = self.forward(&mut tape, Params::frozen(store), x, &noise, 1)?;
        Ok((tape.value(out.mean).data().to_vec(), tape.value(out.log_std).data().to_vec()))
    }

    /// Log-density of `action` under the first-step policy at `obs`.
    pub fn first_step_log_prob(&self, store: &ParamStore, obs: &[f64], action: &[f64]) -> Result<f64> {
        let (mean, log_std) = self.first_step_params(store, obs)?;
        Ok(squashed_gaussian_log_prob(&mean, &log_std, action))
    }
}

/// Log-density of `tanh(mean + exp(log_std) n)` at `action`; actions on or
/// past the bounds are pulled into the open interior first.
pub fn squashed_gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let edge = 1.0 - f64::EPSILON;
    let mut total = 0.0;
    for ((m, ls), a) in mean.iter().zip(log_std).zip(action) {
        let a = a.clamp(-edge, edge);
        let u = a.atanh();
        let n = (u - m) / ls.exp();
        total += -0.5 * n * n - ls - 0.5 * (2.0 * PI).ln() - (1.0 - a * a).ln();
    }
    total
}
