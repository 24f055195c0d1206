//! Reverse-mode differentiation over dense batched matrices, with the
//! feed-forward and recurrent blocks used by the planning agent.

pub mod error;
pub mod matrix;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use error::{DiffError, Result};
pub use matrix::Matrix;
pub use nn::{Activation, CellKind, Init, Linear, Mlp, MlpSpec, RecurrentCell, RecurrentCellSpec, RecurrentState};
pub use optim::Adam;
pub use params::{soft_update, ParamId, ParamStore, StoreId};
pub use tape::{sigmoid, softplus, Gradients, Params, Tape, Var};
