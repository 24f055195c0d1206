use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::matrix::Matrix;
use crate::tape::Gradients;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`ParamStore`]. Clones get a fresh id so that
/// gradients recorded against one copy never leak into another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StoreId(u64);

impl StoreId {
    fn fresh() -> Self {
        StoreId(NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Index of a parameter inside its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    /// Shared with any tape that recorded it; writes copy on demand.
    pub value: Arc<Matrix>,
    #[serde(skip)]
    grad: Option<Matrix>,
}

impl Param {
    pub fn grad(&self) -> Matrix {
        self.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(self.value.rows(), self.value.cols()))
    }
}

/// Named parameter arrays, each with a gradient slot of the same shape.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamStore {
    #[serde(skip, default = "StoreId::fresh")]
    id: StoreId,
    params: Vec<Param>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: StoreId::fresh(),
            params: self.params.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: StoreId::fresh(),
            params: Vec::new(),
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Matrix> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn grad(&self, id: ParamId) -> Matrix {
        self.params[id.0].grad()
    }

    pub(crate) fn grad_slot(&self, id: ParamId) -> Option<&Matrix> {
        self.params[id.0].grad.as_ref()
    }

    /// Adds the gradients recorded for this store. Parameters the loss did not
    /// reach keep their slots unchanged.
    pub fn accumulate(&mut self, grads: &Gradients) {
        let Some(per_param) = grads.for_store(self.id) else {
            return;
        };
        for (idx, g) in per_param {
            let p = &mut self.params[*idx];
            match &mut p.grad {
                Some(slot) => slot.add_assign(g),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .map(Matrix::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    /// Flattened view over all parameters, in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Reads scalar `k` of the flattened parameter vector.
    pub fn get_flat(&self, k: usize) -> f64 {
        let (i, off) = self.locate(k);
        self.params[i].value.data()[off]
    }

    pub fn set_flat(&mut self, k: usize, v: f64) {
        let (i, off) = self.locate(k);
        Arc::make_mut(&mut self.params[i].value).data_mut()[off] = v;
    }

    /// Gradient for scalar `k` of the flattened parameter vector.
    pub fn grad_flat(&self, k: usize) -> f64 {
        let (i, off) = self.locate(k);
        self.params[i].grad.as_ref().map_or(0.0, |g| g.data()[off])
    }

    /// Parameter name owning flat index `k`.
    pub fn name_of_flat(&self, k: usize) -> &str {
        &self.params[self.locate(k).0].name
    }

    fn locate(&self, mut k: usize) -> (usize, usize) {
        for (i, p) in self.params.iter().enumerate() {
            if k < p.value.len() {
                return (i, k);
            }
            k -= p.value.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(DiffError::Layout(format!(
                "{} parameters vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(DiffError::Layout(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Overwrites every value with `source`'s.
    pub fn copy_from(&mut self, source: &ParamStore) -> Result<()> {
        soft_update(self, source, 1.0)
    }
}

/// `target <- eta * source + (1 - eta) * target`, elementwise.
pub fn soft_update(target: &mut ParamStore, source: &ParamStore, eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(DiffError::Config(format!("soft-update rate {eta} outside [0, 1]")));
    }
    target.check_layout(source)?;
    for (t, s) in target.params.iter_mut().zip(&source.params) {
        if eta == 1.0 {
            Arc::make_mut(&mut t.value).data_mut().copy_from_slice(s.value.data());
            continue;
        }
        for (tv, sv) in Arc::make_mut(&mut t.value).data_mut().iter_mut().zip(s.value.data()) {
            *tv = eta * sv + (1.0 - eta) * *tv;
        }
    }
    Ok(())
}
