use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSpec, Environment, PlanFrame, StepResult, TerminalKind};

/// Torque-limited swing-up pendulum. Angle 0 is upright.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub max_speed: f64,
    pub max_torque: f64,
    /// Velocity-Verlet substeps per control step.
    pub substeps: usize,
    angle: f64,
    velocity: f64,
    steps: usize,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

pub fn normalize_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "pendulum".into(),
                obs_dim: 3,
                action_dim: 1,
                action_low: vec![-2.0],
                action_high: vec![2.0],
                max_steps: 200,
                dt: Some(0.05),
                frame: PlanFrame::RawAction,
            },
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            damping: 0.0,
            max_speed: 8.0,
            max_torque: 2.0,
            substeps: 20,
            angle: PI,
            velocity: 0.0,
            steps: 0,
        }
    }

    pub fn state(&self) -> (f64, f64) {
        (self.angle, self.velocity)
    }

    pub fn set_state(&mut self, angle: f64, velocity: f64) {
        self.angle = angle;
        self.velocity = velocity;
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.angle.cos(), self.angle.sin(), self.velocity]
    }

    fn accel(&self, angle: f64, velocity: f64, torque: f64) -> f64 {
        let (g, m, l) = (self.gravity, self.mass, self.length);
        3.0 * g / (2.0 * l) * angle.sin() + 3.0 / (m * l * l) * torque - self.damping * velocity
    }

    /// Mechanical energy per unit inertia, `0.5 w^2 + (3g / 2l) cos(theta)`.
    pub fn energy(&self) -> f64 {
        0.5 * self.velocity * self.velocity + 3.0 * self.gravity / (2.0 * self.length) * self.angle.cos()
    }

    pub fn reward(angle: f64, velocity: f64, torque: f64) -> f64 {
        let th = normalize_angle(angle);
        -(th * th + 0.1 * velocity * velocity + 0.001 * torque * torque)
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.angle = rng.random_range(-PI..PI);
        self.velocity = rng.random_range(-1.0..1.0);
        self.steps = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let u = action[0].clamp(-self.max_torque, self.max_torque);
        let reward = Self::reward(self.angle, self.velocity, u);
        let dt = self.spec.dt.unwrap_or(0.05);
        let h = dt / self.substeps as f64;
        let (mut th, mut w) = (self.angle, self.velocity);
        for _ in 0..self.substeps {
            let half = w + 0.5 * h * self.accel(th, w, u);
            th += h * half;
            w = half + 0.5 * h * self.accel(th, half, u);
        }
        self.angle = th;
        self.velocity = w.clamp(-self.max_speed, self.max_speed);
        self.steps += 1;
        let terminal = if self.steps >= self.spec.max_steps {
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
        vec![(-PI, PI, 24), (-self.max_speed, self.max_speed, 32)]
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn position(&self) -> Vec<f64> {
        vec![normalize_angle(self.angle), self.velocity]
    }
}
