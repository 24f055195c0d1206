use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSpec, Environment, PlanFrame, StepResult, TerminalKind};

/// Radius of the setpoint dead zone.
pub const SHRINK_DELTA: f64 = 3.0;

/// Radial dead zone: `a * max(|a| - delta, 0) / |a|`.
pub fn shrink_setpoint(a: &[f64], delta: f64) -> Vec<f64> {
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= delta {
        return vec![0.0; a.len()];
    }
    let k = (norm - delta) / norm;
    a.iter().map(|x| x * k).collect()
}

/// Closest point on a polyline, as (arc length, squared distance).
fn project(route: &[[f64; 2]], p: [f64; 2]) -> (f64, f64) {
    let mut best = (0.0, f64::INFINITY);
    let mut base = 0.0;
    for w in route.windows(2) {
        let (a, b) = (w[0], w[1]);
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
        let q = [a[0] + t * d[0], a[1] + t * d[1]];
        let dist2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        if dist2 < best.1 {
            best = (base + t * len2.sqrt(), dist2);
        }
        base += len2.sqrt();
    }
    best
}

fn point_at(route: &[[f64; 2]], mut s: f64) -> [f64; 2] {
    for w in route.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        if s <= len {
            let t = s / len;
            return [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        }
        s -= len;
    }
    *route.last().unwrap()
}

/// Planar point mass steered by ego-frame positional setpoints along a
/// piecewise-linear route.
///
/// The commanded velocity is the shrunk setpoint divided by `horizon`,
/// capped at `max_speed`; the actual velocity follows it with a first-order
/// lag of time constant `lag`.
#[derive(Debug, Clone)]
pub struct PointMass {
    spec: EnvSpec,
    pub route: Vec<[f64; 2]>,
    pub delta: f64,
    pub horizon: f64,
    pub max_speed: f64,
    pub lag: f64,
    pub goal_radius: f64,
    pub stop_speed: f64,
    pub goal_bonus: f64,
    /// Observation scale for positions.
    pub obs_scale: f64,
    pub world_min: f64,
    pub world_max: f64,
    pos: [f64; 2],
    vel: [f64; 2],
    progress: f64,
    steps: usize,
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl PointMass {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "pointmass".into(),
                obs_dim: 8,
                action_dim: 2,
                action_low: vec![-10.0, -10.0],
                action_high: vec![10.0, 10.0],
                max_steps: 400,
                dt: Some(0.05),
                frame: PlanFrame::EgoSetpoint,
            },
            route: vec![[0.0, 0.0], [15.0, 0.0], [15.0, 15.0], [30.0, 15.0]],
            delta: SHRINK_DELTA,
            horizon: 1.0,
            max_speed: 5.0,
            lag: 0.25,
            goal_radius: 1.0,
            stop_speed: 0.05,
            goal_bonus: 100.0,
            obs_scale: 0.1,
            world_min: -10.0,
            world_max: 40.0,
            pos: [0.0; 2],
            vel: [0.0; 2],
            progress: 0.0,
            steps: 0,
        }
    }

    pub fn state(&self) -> ([f64; 2], [f64; 2]) {
        (self.pos, self.vel)
    }

    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.progress = self.arc_length(pos);
    }

    /// Arc length of the route point closest to `p`.
    pub fn arc_length(&self, p: [f64; 2]) -> f64 {
        project(&self.route, p).0
    }

    pub fn route_length(&self) -> f64 {
        self.route
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum()
    }

    fn observe(&self) -> Vec<f64> {
        let k = self.obs_scale;
        let goal = *self.route.last().unwrap();
        let near = point_at(&self.route, self.progress);
        let ahead = point_at(&self.route, self.progress + 5.0);
        let mut obs = vec![self.vel[0] / self.max_speed, self.vel[1] / self.max_speed];
        for q in [near, ahead, goal] {
            obs.push(k * (q[0] - self.pos[0]));
            obs.push(k * (q[1] - self.pos[1]));
        }
        obs
    }
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = self.route[0];
        let pos = [start[0] + rng.random_range(-1.0..1.0), start[1] + rng.random_range(-1.0..1.0)];
        self.set_state(pos, [0.0, 0.0]);
        self.steps = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let a = self.spec.clip_action(action);
        let target = shrink_setpoint(&a, self.delta);
        let mut v_des = [target[0] / self.horizon, target[1] / self.horizon];
        let speed = (v_des[0] * v_des[0] + v_des[1] * v_des[1]).sqrt();
        if speed > self.max_speed {
            v_des = [v_des[0] * self.max_speed / speed, v_des[1] * self.max_speed / speed];
        }
        let dt = self.spec.dt.unwrap_or(0.05);
        let k = dt / self.lag;
        for ((v, p), want) in self.vel.iter_mut().zip(&mut self.pos).zip(v_des) {
            *v += k * (want - *v);
            *p = (*p + dt * *v).clamp(self.world_min, self.world_max);
        }
        let progress = self.arc_length(self.pos);
        let mut reward = progress - self.progress;
        self.progress = progress;
        self.steps += 1;

        let goal = *self.route.last().unwrap();
        let dist = ((self.pos[0] - goal[0]).powi(2) + (self.pos[1] - goal[1]).powi(2)).sqrt();
        let speed = (self.vel[0] * self.vel[0] + self.vel[1] * self.vel[1]).sqrt();
        let terminal = if dist <= self.goal_radius && speed < self.stop_speed {
            reward += self.goal_bonus;
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
        vec![(self.world_min, self.world_max, 50), (self.world_min, self.world_max, 50)]
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn position(&self) -> Vec<f64> {
        self.pos.to_vec()
    }

    fn frame_origin(&self) -> Vec<f64> {
        self.pos.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shrinkage_examples() {
        assert_eq!(shrink_setpoint(&[4.0, 0.0], 3.0), vec![1.0, 0.0]);
        assert_eq!(shrink_setpoint(&[2.0, 0.0], 3.0), vec![0.0, 0.0]);
        let s = shrink_setpoint(&[0.0, -8.0], 3.0);
        assert!((s[1] + 5.0).abs() < 1e-12 && s[0] == 0.0);
    }

    #[test]
    fn progress_reward_matches_hand_integrated_path() {
        // On the first leg the arc length is the x coordinate, and the
        // velocity lag has a closed form: v_k = 5 (1 - 0.8^k).
        let mut env = PointMass::new();
        env.reset(0);
        env.set_state([1.0, 0.0], [0.0, 0.0]);
        let mut total = 0.0;
        for _ in 0..30 {
            total += env.step(&[8.0, 0.0]).reward;
        }
        let mut x: f64 = 1.0;
        for k in 1..=30 {
            x += 0.05 * 5.0 * (1.0 - 0.8f64.powi(k));
        }
        assert!((total - (x - 1.0)).abs() < 1e-9, "{total} vs {}", x - 1.0);
        assert!((env.state().0[0] - x).abs() < 1e-9);
    }

    #[test]
    fn stopping_at_goal_is_a_true_terminal() {
        let mut env = PointMass::new();
        env.reset(0);
        env.set_state([30.0, 15.0], [0.0, 0.0]);
        let r = env.step(&[0.0, 0.0]);
        assert_eq!(r.terminal, TerminalKind::Terminal);
        assert!((r.reward - 100.0).abs() < 1e-12);
    }

    #[test]
    fn arc_length_of_route_corners() {
        let env = PointMass::new();
        assert_eq!(env.arc_length([15.0, 0.0]), 15.0);
        assert_eq!(env.arc_length([15.0, 15.0]), 30.0);
        assert_eq!(env.arc_length([30.0, 15.0]), env.route_length());
        assert_eq!(env.arc_length([-3.0, 0.5]), 0.0);
    }

    #[test]
    fn dead_zone_command_brakes() {
        let mut env = PointMass::new();
        env.reset(0);
        env.set_state([5.0, 0.0], [4.0, 0.0]);
        for _ in 0..100 {
            env.step(&[1.0, -2.0]);
        }
        assert!(env.state().1[0].abs() < 1e-6);
    }
}
