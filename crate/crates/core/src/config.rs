//! Run configuration: per-task presets, a TOML file, and `--key value`
//! overrides, applied in that order.

use serde::{Deserialize, Serialize};

use crate::envs::{make_env, TASKS};
use crate::error::{GpmError, Result};
use crate::plangen::DecoderPrior;
use crate::replanner::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    #[default]
    Gpm,
    Sac,
    Far,
    Ez,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub task: String,
    pub agent: AgentKind,
    pub mode: Mode,
    pub seed: u64,
    /// Hidden widths of every feed-forward block, e.g. `[100, 100]`.
    pub hidden: Vec<usize>,
    /// Width of the recurrent cells and the critic's state encoding.
    pub rnn_hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub plan_len: usize,
    pub actors: usize,
    pub gamma: f64,
    pub eta: f64,
    /// Defaults to minus the action width.
    pub target_entropy: Option<f64>,
    /// Defaults to half the effective plan length.
    pub l_commit_target: Option<f64>,
    pub kappa: f64,
    pub ema_coeff: f64,
    pub epsilon_init: f64,
    pub init_alpha: f64,
    pub prior: DecoderPrior,
    pub total_steps: usize,
    pub warmup_steps: usize,
    /// Environment steps per gradient update.
    pub train_every: usize,
    pub log_every: usize,
    /// Must be a multiple of `log_every`; 0 disables evaluation.
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub replay_capacity: usize,
    pub far_repeat: usize,
    /// Longest EZ repeat; defaults to `plan_len`.
    pub ez_max_duration: Option<usize>,
    pub ez_exponent: f64,
    /// End the run at the first true terminal reached in training.
    pub stop_on_goal: bool,
    /// Rows kept in `trajectory.csv`; 0 keeps all.
    pub trajectory_steps: usize,
}

impl AgentConfig {
    /// Defaults for a task: network widths, learning rate, batch size and
    /// plan length follow the reference settings for each task where they exist.
    pub fn preset(task: &str) -> Result<Self> {
        let base = Self {
            task: task.to_string(),
            agent: AgentKind::Gpm,
            mode: Mode::Standard,
            seed: 0,
            hidden: vec![100, 100],
            rnn_hidden: 100,
            lr: 5e-4,
            batch_size: 64,
            plan_len: 3,
            actors: 1,
            gamma: 0.99,
            eta: 0.005,
            target_entropy: None,
            l_commit_target: None,
            kappa: 1.0,
            ema_coeff: 0.95,
            epsilon_init: 1.0,
            init_alpha: 1.0,
            prior: DecoderPrior::Repeat,
            total_steps: 30_000,
            warmup_steps: 1000,
            train_every: 1,
            log_every: 1000,
            eval_every: 1000,
            eval_episodes: 5,
            replay_capacity: 1_000_000,
            far_repeat: 3,
            ez_max_duration: None,
            ez_exponent: 2.0,
            stop_on_goal: false,
            trajectory_steps: 0,
        };
        match task {
            "pendulum" => Ok(base),
            "mountaincar" => Ok(Self {
                hidden: vec![256, 256],
                rnn_hidden: 256,
                lr: 1e-4,
                batch_size: 256,
                plan_len: 10,
                total_steps: 50_000,
                eval_every: 5000,
                ..base
            }),
            "pointmass" => Ok(Self {
                hidden: vec![64, 64],
                rnn_hidden: 64,
                lr: 3e-4,
                plan_len: 5,
                total_steps: 50_000,
                eval_every: 5000,
                ..base
            }),
            other => Err(GpmError::Config(format!(
                "task: unknown value `{other}` (expected one of {})",
                TASKS.join(", ")
            ))),
        }
    }

    /// Builds a configuration from optional TOML text and `(key, value)`
    /// overrides. Values are read as TOML literals, falling back to plain
    /// strings, so `--hidden [64,64]` and `--mode commit` both work.
    pub fn load(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut user = match file {
            Some(text) => text
                .parse::<toml::Table>()
                .map_err(|e| GpmError::Config(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            let key = key.trim_start_matches("--").replace('-', "_");
            user.insert(key, parse_value(raw));
        }
        let task = match user.get("task") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(other) => return Err(GpmError::Config(format!("task: expected a string, got `{other}`"))),
            None => "pendulum".to_string(),
        };
        let preset = Self::preset(&task)?;
        let mut merged = toml::Table::try_from(&preset).map_err(|e| GpmError::Config(e.to_string()))?;
        for (k, v) in user {
            merged.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| GpmError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn target_entropy(&self, action_dim: usize) -> f64 {
        self.target_entropy.unwrap_or(-(action_dim as f64))
    }

    pub fn l_commit_target(&self) -> f64 {
        self.l_commit_target.unwrap_or(0.5 * self.effective_plan_len() as f64)
    }

    pub fn ez_cap(&self) -> usize {
        self.ez_max_duration.unwrap_or(self.plan_len)
    }

    /// Plan length actually used: baselines act one step at a time.
    pub fn effective_plan_len(&self) -> usize {
        match self.agent {
            AgentKind::Gpm => self.plan_len,
            _ => 1,
        }
    }

    pub fn effective_mode(&self) -> Mode {
        match self.agent {
            AgentKind::Gpm => self.mode,
            _ => Mode::Mpc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        make_env(&self.task)?;
        let fail = |field: &str, msg: &str| Err(GpmError::Config(format!("{field}: {msg}")));
        let positive = [
            ("rnn_hidden", self.rnn_hidden),
            ("batch_size", self.batch_size),
            ("plan_len", self.plan_len),
            ("actors", self.actors),
            ("train_every", self.train_every),
            ("log_every", self.log_every),
            ("replay_capacity", self.replay_capacity),
            ("far_repeat", self.far_repeat),
            ("ez_max_duration", self.ez_cap()),
        ];
        for (field, v) in positive {
            if v == 0 {
                return fail(field, "must be at least 1");
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden", "must be a non-empty list of positive widths");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail("lr", "must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return fail("eta", "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.ema_coeff) {
            return fail("ema_coeff", "must lie in [0, 1)");
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return fail("kappa", "must be positive");
        }
        if !(self.epsilon_init.is_finite() && self.epsilon_init >= 0.0) {
            return fail("epsilon_init", "must be non-negative");
        }
        if !(self.init_alpha.is_finite() && self.init_alpha > 0.0) {
            return fail("init_alpha", "must be positive");
        }
        if let Some(t) = self.l_commit_target {
            if !(t.is_finite() && t > 0.0) {
                return fail("l_commit_target", "must be positive");
            }
        }
        if let Some(h) = self.target_entropy {
            if !h.is_finite() {
                return fail("target_entropy", "must be finite");
            }
        }
        if !(self.ez_exponent.is_finite() && self.ez_exponent > 1.0) {
            return fail("ez_exponent", "must exceed 1");
        }
        if self.eval_every > 0 && !self.eval_every.is_multiple_of(self.log_every) {
            return fail("eval_every", "must be a multiple of log_every");
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return fail("eval_episodes", "must be at least 1 when evaluation is enabled");
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn pendulum_preset_matches_reference_settings() {
        let c = AgentConfig::load(None, &[]).unwrap();
        assert_eq!(c.task, "pendulum");
        assert_eq!(c.hidden, vec![100, 100]);
        assert_eq!(c.lr, 5e-4);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.plan_len, 3);
        assert_eq!(c.actors, 1);
        assert_eq!(c.l_commit_target(), 1.5);
        assert_eq!(c.target_entropy(1), -1.0);
    }

    #[test]
    fn overrides_beat_file_beat_preset() {
        let file = "task = \"mountaincar\"\nbatch_size = 32\nseed = 4\n";
        let c = AgentConfig::load(Some(file), &ov(&[("--seed", "9"), ("mode", "commit"), ("hidden", "[8, 8]")])).unwrap();
        assert_eq!(c.plan_len, 10);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.seed, 9);
        assert_eq!(c.mode, Mode::Commit);
        assert_eq!(c.hidden, vec![8, 8]);
    }

    #[test]
    fn errors_name_the_field() {
        let e = AgentConfig::load(None, &ov(&[("batch_size", "0")])).unwrap_err().to_string();
        assert!(e.contains("batch_size"), "{e}");
        let e = AgentConfig::load(None, &ov(&[("bogus", "1")])).unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        let e = AgentConfig::load(None, &ov(&[("mode", "sometimes")])).unwrap_err().to_string();
        assert!(e.contains("sometimes"), "{e}");
        let e = AgentConfig::load(None, &ov(&[("task", "cartpole")])).unwrap_err().to_string();
        assert!(e.contains("task"), "{e}");
        let e = AgentConfig::load(None, &ov(&[("eval_every", "1500")])).unwrap_err().to_string();
        assert!(e.contains("eval_every"), "{e}");
    }

    #[test]
    fn toml_echo_round_trips() {
        let c = AgentConfig::load(None, &ov(&[("agent", "ez"), ("l_commit_target", "2.5")])).unwrap();
        let back = AgentConfig::load(Some(&c.to_toml()), &[]).unwrap();
        assert_eq!(c, back);
        assert_eq!(back.effective_plan_len(), 1);
        assert_eq!(back.effective_mode(), Mode::Mpc);
    }
}
