//! Plans and the operators that read and time-forward them.

use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, PlanFrame};
use crate::error::{GpmError, Result};

/// An ordered sequence of actions in environment units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub actions: Vec<Vec<f64>>,
    pub frame: PlanFrame,
}

impl Plan {
    pub fn new(actions: Vec<Vec<f64>>, frame: PlanFrame) -> Self {
        Self { actions, frame }
    }

    pub fn empty(frame: PlanFrame) -> Self {
        Self::new(Vec::new(), frame)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// First `l` actions.
    pub fn prefix(&self, l: usize) -> Plan {
        Plan::new(self.actions[..l.min(self.len())].to_vec(), self.frame)
    }
}

/// The action to execute now.
pub fn omega(plan: &Plan) -> Result<&[f64]> {
    plan.actions
        .first()
        .map(Vec::as_slice)
        .ok_or_else(|| GpmError::Usage("omega of an empty plan".into()))
}

/// Time-forwards a plan by one step.
///
/// Raw-action plans are shifted. Setpoint plans are moved to the world frame
/// at `old_origin`, shifted, and re-expressed around `new_origin`.
pub fn rho(plan: &Plan, old_origin: &[f64], new_origin: &[f64]) -> Plan {
    if plan.is_empty() {
        return plan.clone();
    }
    let rest = &plan.actions[1..];
    let actions = match plan.frame {
        PlanFrame::RawAction => rest.to_vec(),
        PlanFrame::EgoSetpoint => rest
            .iter()
            .map(|a| world_to_ego(&ego_to_world(a, old_origin), new_origin))
            .collect(),
    };
    Plan::new(actions, plan.frame)
}

pub fn ego_to_world(a: &[f64], origin: &[f64]) -> Vec<f64> {
    a.iter().zip(origin).map(|(x, o)| x + o).collect()
}

pub fn world_to_ego(a: &[f64], origin: &[f64]) -> Vec<f64> {
    a.iter().zip(origin).map(|(x, o)| x - o).collect()
}

/// Affine map between the network's `[-1, 1]` box and environment units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionScale {
    pub center: Vec<f64>,
    pub half: Vec<f64>,
}

impl ActionScale {
    pub fn from_spec(spec: &EnvSpec) -> Self {
        let center = spec.action_low.iter().zip(&spec.action_high).map(|(l, h)| 0.5 * (l + h)).collect();
        let half = spec.action_low.iter().zip(&spec.action_high).map(|(l, h)| 0.5 * (h - l)).collect();
        Self { center, half }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            half: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn to_env(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(self.center.iter().zip(&self.half)).map(|(x, (c, h))| c + h * x).collect()
    }

    pub fn to_unit(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(self.center.iter().zip(&self.half)).map(|(x, (c, h))| (x - c) / h).collect()
    }
}
