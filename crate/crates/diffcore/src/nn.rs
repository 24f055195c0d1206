//! Parameterized building blocks: affine layers, MLPs and recurrent cells.
//!
//! A block only remembers the [`ParamId`]s it registered; the values live in a
//! [`ParamStore`]. Any store with the same layout (live, target, or snapshot
//! copies) can be bound at call time through [`Params`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Params, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero bias.
    FanIn,
    Zeros,
}

fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, init: Init, rng: &mut R) -> Matrix {
    match init {
        Init::Zeros => Matrix::zeros(rows, cols),
        Init::FanIn => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
            Matrix::from_vec(rows, cols, data)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_matrix(input, output, input, init, rng));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, output));
        Self {
            input,
            output,
            weight,
            bias,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Var {
        let w = p.get(tape, self.weight);
        let b = p.get(tape, self.bias);
        tape.affine(x, w, b)
    }
}

/// Layer widths of a feed-forward network. `widths[0]` is the input width and
/// the last entry the output width, so `[3, 100, 100, 1]` has two hidden
/// layers of 100 units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        Self { widths, hidden, output }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(DiffError::Config("an MLP needs an input width and at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(DiffError::Config(format!("MLP widths must be positive: {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Registers the layers. `last_init` initializes the final layer, which
    /// lets residual heads start at exactly zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: MlpSpec,
        last_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let n = spec.widths.len() - 1;
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i + 1 == n { last_init } else { Init::FanIn };
                Linear::new(store, &format!("{name}.{i}"), w[0], w[1], init, rng)
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Var {
        let n = self.layers.len();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h);
            let act = if i + 1 == n { self.spec.output } else { self.spec.hidden };
            h = act.apply(tape, h);
        }
        h
    }

    /// Evaluates on a plain matrix without keeping a tape around.
    pub fn eval(&self, store: &ParamStore, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.spec.input() {
            return Err(DiffError::Shape {
                context: "mlp input".into(),
                expected: (input.rows(), self.spec.input()),
                actual: input.shape(),
            });
        }
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, Params::frozen(store), x);
        Ok(tape.value(y).clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Gru,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentCellSpec {
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
}

impl RecurrentCellSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 {
            return Err(DiffError::Config(format!("recurrent widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Hidden state of a recurrent cell. `cell` is only present for LSTMs.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentState {
    pub h: Var,
    pub c: Option<Var>,
}

/// A GRU or LSTM cell with fused gate matrices.
///
/// GRU gates are laid out `[reset | update | candidate]`, LSTM gates
/// `[input | forget | cell | output]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentCell {
    pub spec: RecurrentCellSpec,
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
}

impl RecurrentCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: RecurrentCellSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let gates = match spec.kind {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        } * spec.hidden;
        // Both weight blocks scale with the hidden width, as in common RNN
        // implementations.
        let w_input = store.add(
            format!("{name}.w_input"),
            init_matrix(spec.input, gates, spec.hidden, Init::FanIn, rng),
        );
        let w_hidden = store.add(
            format!("{name}.w_hidden"),
            init_matrix(spec.hidden, gates, spec.hidden, Init::FanIn, rng),
        );
        let b_input = store.add(format!("{name}.b_input"), Matrix::zeros(1, gates));
        let b_hidden = store.add(format!("{name}.b_hidden"), Matrix::zeros(1, gates));
        Ok(Self {
            spec,
            w_input,
            w_hidden,
            b_input,
            b_hidden,
        })
    }

    /// Zero state for a batch of `rows`.
    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> RecurrentState {
        let h = tape.constant(Matrix::zeros(rows, self.spec.hidden));
        let c = match self.spec.kind {
            CellKind::Gru => None,
            CellKind::Lstm => Some(tape.constant(Matrix::zeros(rows, self.spec.hidden))),
        };
        RecurrentState { h, c }
    }

    /// One step; returns the new state and the step output (`h`).
    pub fn step(&self, tape: &mut Tape, p: Params<'_>, state: RecurrentState, x: Var) -> Result<(RecurrentState, Var)> {
        let k = self.spec.hidden;
        let (xr, xc) = tape.value(x).shape();
        let hs = tape.value(state.h).shape();
        if xc != self.spec.input {
            return Err(DiffError::Shape {
                context: "recurrent input".into(),
                expected: (xr, self.spec.input),
                actual: (xr, xc),
            });
        }
        if hs != (xr, k) {
            return Err(DiffError::Shape {
                context: "recurrent hidden state".into(),
                expected: (xr, k),
                actual: hs,
            });
        }
        let wi = p.get(tape, self.w_input);
        let wh = p.get(tape, self.w_hidden);
        let bi = p.get(tape, self.b_input);
        let bh = p.get(tape, self.b_hidden);
        let gx = tape.affine(x, wi, bi);
        let gh = tape.affine(state.h, wh, bh);
        match self.spec.kind {
            CellKind::Gru => {
                let xr_ = tape.slice(gx, 0, k);
                let hr = tape.slice(gh, 0, k);
                let r_pre = tape.add(xr_, hr);
                let r = tape.sigmoid(r_pre);
                let xz = tape.slice(gx, k, 2 * k);
                let hz = tape.slice(gh, k, 2 * k);
                let z_pre = tape.add(xz, hz);
                let z = tape.sigmoid(z_pre);
                let xn = tape.slice(gx, 2 * k, 3 * k);
                let hn = tape.slice(gh, 2 * k, 3 * k);
                let rhn = tape.mul(r, hn);
                let n_pre = tape.add(xn, rhn);
                let n = tape.tanh(n_pre);
                // h' = (1 - z) * n + z * h = n + z * (h - n)
                let diff = tape.sub(state.h, n);
                let zd = tape.mul(z, diff);
                let h = tape.add(n, zd);
                Ok((RecurrentState { h, c: None }, h))
            }
            CellKind::Lstm => {
                let c_prev = state.c.ok_or_else(|| DiffError::Config("LSTM step without cell state".into()))?;
                let gates = tape.add(gx, gh);
                let i_pre = tape.slice(gates, 0, k);
                let f_pre = tape.slice(gates, k, 2 * k);
                let g_pre = tape.slice(gates, 2 * k, 3 * k);
                let o_pre = tape.slice(gates, 3 * k, 4 * k);
                let i = tape.sigmoid(i_pre);
                let f = tape.sigmoid(f_pre);
                let g = tape.tanh(g_pre);
                let o = tape.sigmoid(o_pre);
                let fc = tape.mul(f, c_prev);
                let ig = tape.mul(i, g);
                let c = tape.add(fc, ig);
                let tc = tape.tanh(c);
                let h = tape.mul(o, tc);
                Ok((RecurrentState { h, c: Some(c) }, h))
            }
        }
    }
}
