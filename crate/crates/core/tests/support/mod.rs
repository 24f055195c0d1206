//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

use gpm_core::envs::{make_env, TerminalKind};
use gpm_core::replay::{ReplayBuffer, Transition};
use gpm_core::AgentConfig;
use gpm_diffcore::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

pub fn config(pairs: &[(&str, &str)]) -> AgentConfig {
    AgentConfig::load(None, &ov(pairs)).expect("valid test configuration")
}

/// Fills a buffer with uniformly random actions on `task`.
pub fn random_replay(task: &str, steps: usize, seed: u64) -> ReplayBuffer {
    let mut env = make_env(task).unwrap();
    let spec = env.spec().clone();
    let mut replay = ReplayBuffer::new(1_000_000, spec.frame).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = env.reset(seed);
    let mut episode = 0;
    for _ in 0..steps {
        let action: Vec<f64> = (0..spec.action_dim)
            .map(|j| rng.random_range(spec.action_low[j]..=spec.action_high[j]))
            .collect();
        let origin = env.frame_origin();
        let step_index = env.steps() as u64;
        let r = env.step(&action);
        let stored = match spec.frame {
            gpm_core::envs::PlanFrame::RawAction => action,
            gpm_core::envs::PlanFrame::EgoSetpoint => gpm_core::plan::ego_to_world(&action, &origin),
        };
        replay.push(Transition {
            state: obs.clone(),
            action: stored,
            reward: r.reward,
            next_state: r.observation.clone(),
            terminal: r.terminal,
            episode_id: episode,
            step_index,
            frame_origin: origin,
        });
        if r.terminal != TerminalKind::None {
            episode += 1;
            obs = env.reset(seed.wrapping_add(episode));
        } else {
            obs = r.observation;
        }
    }
    replay
}

/// Adds `N(0, sd^2)` noise to every scalar so that no parameter sits at an
/// initialization special case (zeroed decoder heads, for instance).
pub fn jitter(store: &mut ParamStore, sd: f64, rng: &mut ChaCha8Rng) {
    for k in 0..store.numel() {
        let n: f64 = rng.sample(StandardNormal);
        store.set_flat(k, store.get_flat(k) + sd * n);
    }
}

/// Relative error with a floor on the denominator, so probes whose true
/// derivative is essentially zero are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
