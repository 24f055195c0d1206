use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSpec, Environment, PlanFrame, StepResult, TerminalKind};

/// Continuous mountain car: sparse goal bonus on the right hill, quadratic
/// action cost every step.
#[derive(Debug, Clone)]
pub struct MountainCar {
    spec: EnvSpec,
    pub power: f64,
    pub min_position: f64,
    pub max_position: f64,
    pub max_speed: f64,
    pub goal_position: f64,
    pub goal_bonus: f64,
    pub action_cost: f64,
    position: f64,
    velocity: f64,
    steps: usize,
}

impl Default for MountainCar {
    fn default() -> Self {
        Self::new()
    }
}

impl MountainCar {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "mountaincar".into(),
                obs_dim: 2,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_steps: 999,
                dt: None,
                frame: PlanFrame::RawAction,
            },
            power: 0.0015,
            min_position: -1.2,
            max_position: 0.6,
            max_speed: 0.07,
            goal_position: 0.45,
            goal_bonus: 100.0,
            action_cost: 0.1,
            position: -0.5,
            velocity: 0.0,
            steps: 0,
        }
    }

    pub fn state(&self) -> (f64, f64) {
        (self.position, self.velocity)
    }

    /// Position and velocity, the latter divided by the speed limit so both
    /// entries have comparable range.
    fn observe(&self) -> Vec<f64> {
        vec![self.position, self.velocity / self.max_speed]
    }

    pub fn set_state(&mut self, position: f64, velocity: f64) {
        self.position = position;
        self.velocity = velocity;
    }
}

impl Environment for MountainCar {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.position = rng.random_range(-0.6..-0.4);
        self.velocity = 0.0;
        self.steps = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let force = action[0].clamp(-1.0, 1.0);
        self.velocity += force * self.power - 0.0025 * (3.0 * self.position).cos();
        self.velocity = self.velocity.clamp(-self.max_speed, self.max_speed);
        self.position = (self.position + self.velocity).clamp(self.min_position, self.max_position);
        if self.position == self.min_position && self.velocity < 0.0 {
            self.velocity = 0.0;
        }
        self.steps += 1;
        let goal = self.position >= self.goal_position && self.velocity >= 0.0;
        let mut reward = -self.action_cost * force * force;
        if goal {
            reward += self.goal_bonus;
        }
        let terminal = if goal {
            TerminalKind::Terminal
        } else if self.steps >= self.spec.max_steps {
            TerminalKind::Timeout
        } else {
            TerminalKind::None
        };
        StepResult {
            observation: self.observe(),
            reward,
            terminal,
            position: self.position(),
        }
    }

    fn position_grid(&self) -> Vec<(f64, f64, usize)> {
        vec![(self.min_position, self.max_position, 36), (-self.max_speed, self.max_speed, 28)]
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn position(&self) -> Vec<f64> {
        vec![self.position, self.velocity]
    }
}
