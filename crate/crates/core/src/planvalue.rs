//! The plan-value critic: values of every prefix of a plan.
//!
//! The first prefix is scored by a dedicated decoder on the encoded state and
//! the first action. An LSTM seeded with the state encoding then consumes the
//! actions one by one, and each later prefix adds a shared decoder's output
//! to the previous prefix value.

use gpm_diffcore::{
    Activation, CellKind, Init, Linear, Matrix, Mlp, MlpSpec, ParamStore, Params, RecurrentCell, RecurrentCellSpec,
    RecurrentState, Tape, Var,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Decoder hidden widths.
    pub hidden: Vec<usize>,
    /// State encoding and LSTM width.
    pub rnn_hidden: usize,
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.action_dim == 0 || self.rnn_hidden == 0 {
            return Err(GpmError::Config("critic widths must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(GpmError::Config(format!("hidden widths must be non-empty and positive: {:?}", self.hidden)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanValueNet {
    pub encoder: Linear,
    pub first: Mlp,
    pub cell: RecurrentCell,
    pub step: Mlp,
}

/// Recorded critic pass.
pub struct ValueForward {
    /// `B x len` prefix values.
    pub values: Var,
    /// `B x 1` shared-decoder increments for prefixes `2..=len`.
    pub increments: Vec<Var>,
}

impl PlanValueNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &CriticConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.rnn_hidden;
        let encoder = Linear::new(store, &format!("{name}.encoder"), cfg.obs_dim, h, Init::FanIn, rng);
        let mut w0 = vec![h + cfg.action_dim];
        w0.extend(&cfg.hidden);
        w0.push(1);
        let first = Mlp::new(
            store,
            &format!("{name}.first"),
            MlpSpec::new(w0, Activation::Relu, Activation::Identity),
            Init::FanIn,
            rng,
        )?;
        let cell = RecurrentCell::new(
            store,
            &format!("{name}.lstm"),
            RecurrentCellSpec {
                kind: CellKind::Lstm,
                input: cfg.action_dim,
                hidden: h,
            },
            rng,
        )?;
        let mut ws = vec![h];
        ws.extend(&cfg.hidden);
        ws.push(1);
        let step = Mlp::new(
            store,
            &format!("{name}.step"),
            MlpSpec::new(ws, Activation::Relu, Activation::Identity),
            Init::FanIn,
            rng,
        )?;
        Ok(Self {
            encoder,
            first,
            cell,
            step,
        })
    }

    /// Values of every prefix of `actions` (each `B x action_dim`).
    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, obs: Var, actions: &[Var]) -> Result<ValueForward> {
        let Some(&a0) = actions.first() else {
            return Err(GpmError::Usage("value of an empty plan".into()));
        };
        let enc = self.encoder.forward(tape, p, obs);
        let z = tape.relu(enc);
        let x0 = tape.concat(&[z, a0]);
        let mut v = self.first.forward(tape, p, x0);
        let mut values = vec![v];
        let mut increments = Vec::new();
        if actions.len() > 1 {
            let rows = tape.value(obs).rows();
            let c0 = tape.constant(Matrix::zeros(rows, self.cell.spec.hidden));
            let mut state = RecurrentState { h: z, c: Some(c0) };
            let (s, _) = self.cell.step(tape, p, state, a0)?;
            state = s;
            for &a in &actions[1..] {
                let (s, out) = self.cell.step(tape, p, state, a)?;
                state = s;
                let d = self.step.forward(tape, p, out);
                v = tape.add(v, d);
                values.push(v);
                increments.push(d);
            }
        }
        let values = if values.len() == 1 { values[0] } else { tape.concat(&values) };
        if !tape.value(values).is_finite() {
            return Err(GpmError::NonFinite("plan values".into()));
        }
        Ok(ValueForward { values, increments })
    }
}

/// Twin plan-value networks sharing one parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticEnsemble {
    pub config: CriticConfig,
    pub nets: [PlanValueNet; 2],
}

impl CriticEnsemble {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: CriticConfig, rng: &mut R) -> Result<Self> {
        let q1 = PlanValueNet::new(store, "q1", &config, rng)?;
        let q2 = PlanValueNet::new(store, "q2", &config, rng)?;
        Ok(Self { config, nets: [q1, q2] })
    }

    /// `B x len` prefix values of both critics.
    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, obs: Var, actions: &[Var]) -> Result<[Var; 2]> {
        let q1 = self.nets[0].forward(tape, p, obs, actions)?.values;
        let q2 = self.nets[1].forward(tape, p, obs, actions)?.values;
        Ok([q1, q2])
    }

    /// Elementwise minimum of the two critics' prefix values.
    pub fn forward_min(&self, tape: &mut Tape, p: Params<'_>, obs: Var, actions: &[Var]) -> Result<Var> {
        let [q1, q2] = self.forward(tape, p, obs, actions)?;
        Ok(tape.min(q1, q2))
    }

    /// Per-critic value sequences for one state and plan (unit actions).
    pub fn value_sequences(&self, store: &ParamStore, obs: &[f64], plan: &[Vec<f64>]) -> Result<[Vec<f64>; 2]> {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(obs));
        let acts: Vec<Var> = plan.iter().map(|a| tape.constant(Matrix::row_vector(a))).collect();
        let [q1, q2] = self.forward(&mut tape, Params::frozen(store), x, &acts)?;
        Ok([tape.value(q1).data().to_vec(), tape.value(q2).data().to_vec()])
    }

    /// Twin minimum at prefix length `l` (1-based).
    pub fn min_value(&self, store: &ParamStore, obs: &[f64], plan: &[Vec<f64>], l: usize) -> Result<f64> {
        if l == 0 || l > plan.len() {
            return Err(GpmError::Usage(format!("prefix length {l} outside 1..={}", plan.len())));
        }
        let [a, b] = self.value_sequences(store, obs, &plan[..l])?;
        Ok(a[l - 1].min(b[l - 1]))
    }

    /// Twin minimum at prefix `l` for several plans from one state, in one
    /// batched pass. Every plan must have at least `l` actions.
    pub fn min_values_at(&self, store: &ParamStore, obs: &[f64], plans: &[&[Vec<f64>]], l: usize) -> Result<Vec<f64>> {
        if l == 0 || plans.iter().any(|p| p.len() < l) {
            return Err(GpmError::Usage(format!("prefix length {l} exceeds a plan")));
        }
        let rows = plans.len();
        let mut tape = Tape::new();
        let obs_rows: Vec<&[f64]> = (0..rows).map(|_| obs).collect();
        let x = tape.constant(Matrix::from_rows(&obs_rows));
        let acts: Vec<Var> = (0..l)
            .map(|k| {
                let rows_k: Vec<&[f64]> = plans.iter().map(|p| p[k].as_slice()).collect();
                tape.constant(Matrix::from_rows(&rows_k))
            })
            .collect();
        let q = self.forward_min(&mut tape, Params::frozen(store), x, &acts)?;
        let v = tape.value(q);
        Ok((0..rows).map(|r| v.get(r, l - 1)).collect())
    }
}

/// Mean over critics of the batch-mean squared error between each critic's
/// `B x 1` prediction and the shared target.
pub fn critic_loss(tape: &mut Tape, predictions: &[Var], target: Var) -> Result<Var> {
    if predictions.is_empty() {
        return Err(GpmError::Usage("critic loss needs at least one prediction".into()));
    }
    let mut total: Option<Var> = None;
    for &q in predictions {
        if tape.value(q).shape() != tape.value(target).shape() {
            return Err(GpmError::Usage("one target per prediction row".into()));
        }
        let d = tape.sub(q, target);
        let sq = tape.square(d);
        let m = tape.mean(sq);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m),
        });
    }
    let loss = tape.scale(total.unwrap(), 1.0 / predictions.len() as f64);
    if !tape.value(loss).item().is_finite() {
        return Err(GpmError::NonFinite("critic loss".into()));
    }
    Ok(loss)
}

/// `sum_k gamma^(k-1) r_k + gamma^l * bootstrap` where `bootstrap` already
/// folds in the entropy term, or is `None` at a true terminal.
pub fn discounted_target(rewards: &[f64], gamma: f64, bootstrap: Option<f64>) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total + bootstrap.map_or(0.0, |b| discount * b)
}
