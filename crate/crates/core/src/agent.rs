//! The learner: plan generator, twin plan-value critics with targets, the
//! entropy temperature, and the replanning threshold.

use gpm_diffcore::{soft_update, Adam, Matrix, ParamStore, Params, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::AgentConfig;
use crate::envs::EnvSpec;
use crate::error::{GpmError, Result};
use crate::plan::{ActionScale, Plan};
use crate::plangen::{GeneratorConfig, PlanForward, PlanGenerator};
use crate::planvalue::{critic_loss, CriticConfig, CriticEnsemble};
use crate::replanner::SwitchState;
use crate::replay::SampledPlanBatch;

const GRAD_CLIP: f64 = 10.0;

/// A replay batch in network units: actions scaled to `[-1, 1]` and padded
/// to the longest plan by repeating each plan's last action. Padding never
/// reaches the gathered prefix values because the critic is causal.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitBatch {
    pub obs: Matrix,
    pub actions: Vec<Matrix>,
    pub lens: Vec<usize>,
    pub rewards: Vec<Vec<f64>>,
    pub next_obs: Matrix,
    pub bootstrap: Vec<bool>,
}

impl UnitBatch {
    pub fn rows(&self) -> usize {
        self.lens.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct Losses {
    pub critic: f64,
    pub actor: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    /// Batch estimate of the first-step entropy.
    pub entropy: f64,
    pub epsilon: f64,
}

pub struct Agent {
    pub config: AgentConfig,
    pub spec: EnvSpec,
    pub scale: ActionScale,
    pub plan_len: usize,
    pub generator: PlanGenerator,
    pub actor: ParamStore,
    pub critics: CriticEnsemble,
    pub critic: ParamStore,
    pub critic_target: ParamStore,
    pub log_alpha: ParamStore,
    pub switch: SwitchState,
    pub target_entropy: f64,
    actor_opt: Adam,
    critic_opt: Adam,
    alpha_opt: Adam,
    rng: ChaCha8Rng,
    updates: u64,
}

impl Agent {
    pub fn new(config: &AgentConfig, spec: &EnvSpec) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let plan_len = config.effective_plan_len();
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut actor = ParamStore::new();
        let mut gcfg = GeneratorConfig::new(spec.obs_dim, spec.action_dim, plan_len, config.hidden.clone(), config.rnn_hidden);
        gcfg.prior = config.prior;
        let generator = PlanGenerator::new(&mut actor, gcfg, &mut init_rng)?;
        let mut critic = ParamStore::new();
        let ccfg = CriticConfig {
            obs_dim: spec.obs_dim,
            action_dim: spec.action_dim,
            hidden: config.hidden.clone(),
            rnn_hidden: config.rnn_hidden,
        };
        let critics = CriticEnsemble::new(&mut critic, ccfg, &mut init_rng)?;
        let critic_target = critic.clone();
        let mut log_alpha = ParamStore::new();
        log_alpha.add("log_alpha", Matrix::scalar(config.init_alpha.ln()));
        let mut switch = SwitchState::new(config.effective_mode(), config.l_commit_target());
        switch.epsilon = config.epsilon_init;
        switch.kappa = config.kappa;
        switch.ema_coeff = config.ema_coeff;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            spec: spec.clone(),
            scale: ActionScale::from_spec(spec),
            plan_len,
            actor_opt: Adam::new(&actor).with_clip(GRAD_CLIP),
            critic_opt: Adam::new(&critic).with_clip(GRAD_CLIP),
            alpha_opt: Adam::new(&log_alpha),
            generator,
            actor,
            critics,
            critic,
            critic_target,
            log_alpha,
            switch,
            target_entropy: config.target_entropy(spec.action_dim),
            rng,
            updates: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.params()[0].value.item().exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn to_plan(&self, unit: Vec<Vec<f64>>) -> Plan {
        Plan::new(unit.iter().map(|a| self.scale.to_env(a)).collect(), self.spec.frame)
    }

    fn to_unit(&self, plan: &Plan) -> Vec<Vec<f64>> {
        plan.actions.iter().map(|a| self.scale.to_unit(a)).collect()
    }

    /// A fresh full-length plan in environment units.
    pub fn sample_plan<R: rand::Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<Plan> {
        let s = self.generator.sample_plan(&self.actor, obs, rng)?;
        Ok(self.to_plan(s.actions))
    }

    pub fn mode_plan(&self, obs: &[f64]) -> Result<Plan> {
        let a = self.generator.mode_plan(&self.actor, obs)?;
        Ok(self.to_plan(a))
    }

    /// `Q_l(s, new) - Q_l(s, old)` at `l = |old|`, twin minimum, live critics.
    pub fn switch_gap(&self, obs: &[f64], new: &Plan, old: &Plan) -> Result<f64> {
        let l = old.len();
        let (n, o) = (self.to_unit(new), self.to_unit(old));
        let v = self.critics.min_values_at(&self.critic, obs, &[&n, &o], l)?;
        Ok(v[0] - v[1])
    }

    pub fn unit_batch(&self, batch: &SampledPlanBatch) -> Result<UnitBatch> {
        if batch.is_empty() {
            return Err(GpmError::Usage("empty training batch".into()));
        }
        let lmax = batch.max_len();
        let rows = batch.len();
        let mut actions = vec![Matrix::zeros(rows, self.spec.action_dim); lmax];
        for (r, item) in batch.items.iter().enumerate() {
            if item.actions.is_empty() || item.rewards.len() != item.actions.len() {
                return Err(GpmError::Usage(format!("batch item {r}: rewards and plan lengths differ")));
            }
            for (k, m) in actions.iter_mut().enumerate() {
                let a = &item.actions[k.min(item.actions.len() - 1)];
                m.row_mut(r).copy_from_slice(&self.scale.to_unit(a));
            }
        }
        let obs: Vec<&[f64]> = batch.items.iter().map(|i| i.state.as_slice()).collect();
        let next: Vec<&[f64]> = batch.items.iter().map(|i| i.next_state.as_slice()).collect();
        Ok(UnitBatch {
            obs: Matrix::from_rows(&obs),
            actions,
            lens: batch.items.iter().map(|i| i.actions.len()).collect(),
            rewards: batch.items.iter().map(|i| i.rewards.clone()).collect(),
            next_obs: Matrix::from_rows(&next),
            bootstrap: batch.items.iter().map(|i| i.bootstrap).collect(),
        })
    }

    /// TD targets with a fresh full-length plan from each plan-end state and
    /// the target critics.
    pub fn td_targets(&self, batch: &UnitBatch, noise: &Matrix, alpha: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let next = tape.constant(batch.next_obs.clone());
        let plan = self.generator.forward(&mut tape, Params::frozen(&self.actor), next, noise, self.plan_len)?;
        let q = self.critics.forward_min(&mut tape, Params::frozen(&self.critic_target), next, &plan.actions)?;
        let qv = tape.value(q);
        let lp = tape.value(plan.log_prob);
        let gamma = self.config.gamma;
        let targets: Vec<f64> = (0..batch.rows())
            .map(|r| {
                let soft = qv.get(r, self.plan_len - 1) - alpha * lp.get(r, 0);
                crate::planvalue::discounted_target(&batch.rewards[r], gamma, batch.bootstrap[r].then_some(soft))
            })
            .collect();
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(GpmError::NonFinite("TD target".into()));
        }
        Ok(targets)
    }

    /// Critic loss on `critic_params` against fixed targets.
    pub fn critic_loss(&self, tape: &mut Tape, critic_params: Params<'_>, batch: &UnitBatch, targets: &[f64]) -> Result<Var> {
        let obs = tape.constant(batch.obs.clone());
        let acts: Vec<Var> = batch.actions.iter().map(|a| tape.constant(a.clone())).collect();
        let [q1, q2] = self.critics.forward(tape, critic_params, obs, &acts)?;
        let cols: Vec<usize> = batch.lens.iter().map(|l| l - 1).collect();
        let p1 = tape.gather(q1, &cols);
        let p2 = tape.gather(q2, &cols);
        let t = tape.constant(Matrix::column_vector(targets));
        critic_loss(tape, &[p1, p2], t)
    }

    /// `mean_b [alpha log pi_0 - mean_l Qmin(s, tau_l)]` with frozen critics.
    pub fn actor_loss(
        &self,
        tape: &mut Tape,
        actor_params: Params<'_>,
        obs: &Matrix,
        noise: &Matrix,
        alpha: f64,
        feed: Option<&[Matrix]>,
    ) -> Result<(Var, PlanForward)> {
        let x = tape.constant(obs.clone());
        let plan = self
            .generator
            .forward_with_feed(tape, actor_params, x, noise, self.plan_len, feed)?;
        let q = self.critics.forward_min(tape, Params::frozen(&self.critic), x, &plan.actions)?;
        let value = tape.mean(q);
        let lp = tape.mean(plan.log_prob);
        let ent = tape.scale(lp, alpha);
        let loss = tape.sub(ent, value);
        if !tape.value(loss).item().is_finite() {
            return Err(GpmError::NonFinite("actor loss".into()));
        }
        Ok((loss, plan))
    }

    /// `-alpha (mean log pi_0 + target_entropy)` with `alpha = exp(log_alpha)`.
    pub fn alpha_loss(&self, tape: &mut Tape, p: Params<'_>, mean_log_prob: f64) -> Var {
        let la = p.get(tape, gpm_diffcore::ParamId(0));
        let a = tape.exp(la);
        let k = tape.constant(Matrix::scalar(-(mean_log_prob + self.target_entropy)));
        tape.mul(a, k)
    }

    /// One critic, actor, temperature and threshold step, then the target
    /// soft copy.
    pub fn train_iteration(&mut self, batch: &SampledPlanBatch) -> Result<Losses> {
        let ub = self.unit_batch(batch)?;
        let rows = ub.rows();
        let lr = self.config.lr;
        let alpha = self.alpha();

        let td_noise = self.generator.draw_noise(rows, &mut self.rng);
        let targets = self.td_targets(&ub, &td_noise, alpha)?;
        let mut tape = Tape::new();
        let closs = self.critic_loss(&mut tape, Params::trainable(&self.critic), &ub, &targets)?;
        let critic_value = tape.value(closs).item();
        let grads = tape.backward(closs)?;
        self.critic.accumulate(&grads);
        self.critic_opt.step(&mut self.critic, lr)?;

        let noise = self.generator.draw_noise(rows, &mut self.rng);
        let mut tape = Tape::new();
        let (aloss, plan) = self.actor_loss(&mut tape, Params::trainable(&self.actor), &ub.obs, &noise, alpha, None)?;
        let actor_value = tape.value(aloss).item();
        let mean_lp = tape.value(plan.log_prob).sum() / rows as f64;
        let grads = tape.backward(aloss)?;
        self.actor.accumulate(&grads);
        self.actor_opt.step(&mut self.actor, lr)?;

        let mut tape = Tape::new();
        let tl = self.alpha_loss(&mut tape, Params::trainable(&self.log_alpha), mean_lp);
        let alpha_value = tape.value(tl).item();
        let grads = tape.backward(tl)?;
        self.log_alpha.accumulate(&grads);
        self.alpha_opt.step(&mut self.log_alpha, lr)?;

        self.switch.update_epsilon(lr);
        soft_update(&mut self.critic_target, &self.critic, self.config.eta)?;
        self.updates += 1;
        Ok(Losses {
            critic: critic_value,
            actor: actor_value,
            alpha_loss: alpha_value,
            alpha: self.alpha(),
            entropy: -mean_lp,
            epsilon: self.switch.epsilon,
        })
    }

    /// All learnable values, for snapshots and trajectory comparisons.
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut v = self.actor.flat_values();
        v.extend(self.critic.flat_values());
        v.extend(self.critic_target.flat_values());
        v.extend(self.log_alpha.flat_values());
        v.push(self.switch.epsilon);
        v
    }

    pub fn snapshot(&self) -> AgentSnapshot<'_> {
        AgentSnapshot {
            actor: &self.actor,
            critic: &self.critic,
            critic_target: &self.critic_target,
            log_alpha: self.log_alpha.params()[0].value.item(),
            switch: &self.switch,
            updates: self.updates,
        }
    }

    /// Restores parameters written by [`snapshot`](Self::snapshot).
    pub fn load_snapshot(&mut self, json: &str) -> Result<()> {
        #[derive(serde::Deserialize)]
        struct Owned {
            actor: ParamStore,
            critic: ParamStore,
            critic_target: ParamStore,
            log_alpha: f64,
            switch: SwitchState,
            updates: u64,
        }
        let s: Owned = serde_json::from_str(json).map_err(|e| GpmError::Format(format!("parameter snapshot: {e}")))?;
        self.actor.check_layout(&s.actor)?;
        self.critic.check_layout(&s.critic)?;
        self.actor.copy_from(&s.actor)?;
        self.critic.copy_from(&s.critic)?;
        self.critic_target.copy_from(&s.critic_target)?;
        *self.log_alpha.value_mut(gpm_diffcore::ParamId(0)) = Matrix::scalar(s.log_alpha);
        self.switch = s.switch;
        self.updates = s.updates;
        Ok(())
    }
}

#[derive(Serialize)]
pub struct AgentSnapshot<'a> {
    pub actor: &'a ParamStore,
    pub critic: &'a ParamStore,
    pub critic_target: &'a ParamStore,
    pub log_alpha: f64,
    pub switch: &'a SwitchState,
    pub updates: u64,
}
