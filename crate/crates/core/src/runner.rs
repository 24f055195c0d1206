//! The rollout/train loop, evaluation, and per-run bookkeeping.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{Agent, Losses};
use crate::baselines::{sample_batch, ActionRepeater, RepeatLaw};
use crate::config::AgentConfig;
use crate::envs::{make_env, position_bin, Environment, PlanFrame, TerminalKind};
use crate::error::Result;
use crate::plan::{ego_to_world, omega, rho};
use crate::replanner::{Mode, PlanCursor};
use crate::replay::{ReplayBuffer, Transition};

/// One rollout worker: an environment, its plan cursor, and its own streams
/// of acting and reset randomness.
pub struct Worker {
    pub env: Box<dyn Environment>,
    pub obs: Vec<f64>,
    pub cursor: PlanCursor,
    pub repeater: Option<ActionRepeater>,
    pub episode_id: u64,
    pub episode_return: f64,
    episodes_started: u64,
    id_stride: u64,
    id_offset: u64,
    act_rng: ChaCha8Rng,
    reset_rng: ChaCha8Rng,
}

impl Worker {
    /// Worker `index` of `count`; episode ids interleave so they never clash.
    pub fn new(cfg: &AgentConfig, seed: u64, index: u64, count: u64) -> Result<Self> {
        let env = make_env(&cfg.task)?;
        let frame = env.spec().frame;
        let mut act_rng = ChaCha8Rng::seed_from_u64(seed);
        act_rng.set_stream(10 + 2 * index);
        let mut reset_rng = ChaCha8Rng::seed_from_u64(seed);
        reset_rng.set_stream(11 + 2 * index);
        let mut w = Self {
            env,
            obs: Vec::new(),
            cursor: PlanCursor::new(frame),
            repeater: RepeatLaw::from_config(cfg).map(ActionRepeater::new),
            episode_id: 0,
            episode_return: 0.0,
            episodes_started: 0,
            id_stride: count,
            id_offset: index,
            act_rng,
            reset_rng,
        };
        w.start_episode();
        Ok(w)
    }

    fn start_episode(&mut self) {
        let seed = self.reset_rng.random::<u64>();
        self.obs = self.env.reset(seed);
        self.episode_id = self.episodes_started * self.id_stride + self.id_offset;
        self.episodes_started += 1;
        self.episode_return = 0.0;
        if let Some(r) = &mut self.repeater {
            r.reset();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinishedEpisode {
    pub episode_id: u64,
    pub ret: f64,
    pub terminal: TerminalKind,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub transition: Transition,
    /// The executed action came from a fresh plan or policy query.
    pub switched: bool,
    /// Commitment segments that ended at this step.
    pub segments: Vec<usize>,
    pub position: Vec<f64>,
    pub finished: Option<FinishedEpisode>,
}

/// Executes one environment step: time-forward the old plan, propose a new
/// one, decide, act, and record the transition.
pub fn rollout_step(agent: &Agent, w: &mut Worker, eval: bool) -> Result<StepOutcome> {
    let obs = w.obs.clone();
    let origin_before = w.env.frame_origin();
    let frame = w.env.spec().frame;
    let (action, switched) = match &mut w.repeater {
        Some(rep) => rep.act(
            |rng| {
                let p = if eval { agent.mode_plan(&obs)? } else { agent.sample_plan(&obs, rng)? };
                Ok(omega(&p)?.to_vec())
            },
            &mut w.act_rng,
            eval,
        )?,
        None => {
            let old_len = w.cursor.remaining.len();
            let new = if old_len == 0 || agent.switch.mode != Mode::Commit {
                Some(if eval {
                    agent.mode_plan(&obs)?
                } else {
                    agent.sample_plan(&obs, &mut w.act_rng)?
                })
            } else {
                None
            };
            let old = &w.cursor.remaining;
            let m = agent.switch.decide(
                old_len,
                || agent.switch_gap(&obs, new.as_ref().expect("a new plan is proposed"), old),
                eval,
                &mut w.act_rng,
            )?;
            if m {
                w.cursor.remaining = new.expect("a new plan is proposed");
            }
            (omega(&w.cursor.remaining)?.to_vec(), m)
        }
    };
    let mut segments = Vec::new();
    if switched && w.cursor.steps_committed > 0 {
        segments.push(w.cursor.steps_committed);
        w.cursor.steps_committed = 0;
    }

    let step_index = w.env.steps() as u64;
    let result = w.env.step(&action);
    let origin_after = w.env.frame_origin();
    let stored = match frame {
        PlanFrame::RawAction => action.clone(),
        PlanFrame::EgoSetpoint => ego_to_world(&action, &origin_before),
    };
    if w.repeater.is_none() {
        w.cursor.remaining = rho(&w.cursor.remaining, &origin_before, &origin_after);
    }
    w.cursor.steps_committed += 1;
    w.episode_return += result.reward;
    let transition = Transition {
        state: obs,
        action: stored,
        reward: result.reward,
        next_state: result.observation.clone(),
        terminal: result.terminal,
        episode_id: w.episode_id,
        step_index,
        frame_origin: origin_before,
    };
    let finished = if result.terminal.ends_episode() {
        segments.extend(w.cursor.clear());
        let done = FinishedEpisode {
            episode_id: w.episode_id,
            ret: w.episode_return,
            terminal: result.terminal,
            steps: w.env.steps(),
        };
        w.start_episode();
        Some(done)
    } else {
        w.obs = result.observation;
        None
    };
    Ok(StepOutcome {
        transition,
        switched,
        segments,
        position: result.position,
        finished,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalStats {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub goals: usize,
    /// Mean length of commitment segments under the greedy switch rule.
    pub mean_commit: f64,
}

/// Greedy evaluation: noiseless plans and the categorical's mode. Never
/// touches the agent's parameters.
pub fn evaluate(agent: &Agent, episodes: usize, seed: u64) -> Result<EvalStats> {
    let mut w = Worker::new(&agent.config, seed ^ EVAL_SALT, 0, 1)?;
    let mut returns = Vec::with_capacity(episodes);
    let mut goals = 0;
    let (mut seg_total, mut seg_count) = (0usize, 0usize);
    while returns.len() < episodes {
        let out = rollout_step(agent, &mut w, true)?;
        seg_total += out.segments.iter().sum::<usize>();
        seg_count += out.segments.len();
        if let Some(f) = out.finished {
            returns.push(f.ret);
            goals += usize::from(f.terminal == TerminalKind::Terminal);
        }
    }
    let (mean, std) = mean_std(&returns);
    Ok(EvalStats {
        returns,
        mean,
        std,
        goals,
        mean_commit: seg_total as f64 / seg_count.max(1) as f64,
    })
}

/// Keeps evaluation episodes apart from training episodes of the same seed.
const EVAL_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One `metrics.csv` row. Column order is fixed; see `docs/artifacts.md`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episodes: u64,
    pub train_return: f64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub l_commit_ema: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub switch_rate: f64,
    pub mean_commit: f64,
    pub goal_hits: u64,
    pub coverage: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub episode: u64,
    pub step: u64,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub terminal: TerminalKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub transitions_stored: u64,
    pub first_goal_step: Option<u64>,
    pub goal_episodes: u64,
    pub segments: u64,
    pub committed_steps: u64,
    pub min_epsilon: f64,
    pub final_eval: Option<EvalStats>,
}

impl RunSummary {
    pub fn mean_commit(&self) -> f64 {
        self.committed_steps as f64 / self.segments.max(1) as f64
    }
}

pub struct RunOutput {
    pub metrics: Vec<MetricsRow>,
    pub trajectory: Vec<TrajectoryRow>,
    /// Visit counts per position grid cell.
    pub visits: BTreeMap<Vec<usize>, u64>,
    pub grid: Vec<(f64, f64, usize)>,
    pub summary: RunSummary,
    pub agent: Agent,
    pub replay: ReplayBuffer,
    /// `(step, l_commit_ema)` after every recorded commitment segment.
    pub commit_trace: Vec<(u64, f64)>,
}

#[derive(Default)]
struct Interval {
    switches: u64,
    steps: u64,
    seg_total: u64,
    seg_count: u64,
    returns: Vec<f64>,
    last_losses: Option<Losses>,
}

/// Runs training end to end with the configured number of rollout workers.
/// With one worker everything happens on the calling thread; with more, each
/// iteration steps every worker in parallel against the same frozen agent
/// and merges their transitions in worker order.
pub fn run(cfg: &AgentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let probe = make_env(&cfg.task)?;
    let spec = probe.spec().clone();
    let grid = probe.position_grid();
    let mut agent = Agent::new(cfg, &spec)?;
    let mut replay = ReplayBuffer::new(cfg.replay_capacity, spec.frame)?;
    let count = cfg.actors as u64;
    let mut workers = (0..count)
        .map(|i| Worker::new(cfg, cfg.seed, i, count))
        .collect::<Result<Vec<_>>>()?;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(2);

    let mut metrics = Vec::new();
    let mut commit_trace = Vec::new();
    let mut trajectory = Vec::new();
    let mut visits: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
    let mut summary = RunSummary {
        steps: 0,
        episodes: 0,
        updates: 0,
        transitions_stored: 0,
        first_goal_step: None,
        goal_episodes: 0,
        segments: 0,
        committed_steps: 0,
        min_epsilon: agent.switch.epsilon,
        final_eval: None,
    };
    let mut interval = Interval::default();
    let mut last_losses = Losses::default();
    let total = cfg.total_steps as u64;
    let mut stop = false;

    while summary.steps < total && !stop {
        let outcomes: Vec<StepOutcome> = if workers.len() == 1 {
            vec![rollout_step(&agent, &mut workers[0], false)?]
        } else {
            let shared = &agent;
            std::thread::scope(|s| {
                let handles: Vec<_> = workers
                    .iter_mut()
                    .map(|w| s.spawn(move || rollout_step(shared, w, false)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("rollout worker panicked"))
                    .collect::<Result<Vec<_>>>()
            })?
        };
        for out in outcomes {
            if summary.steps >= total {
                break;
            }
            summary.steps += 1;
            let step = summary.steps;
            if cfg.trajectory_steps == 0 || trajectory.len() < cfg.trajectory_steps {
                trajectory.push(TrajectoryRow {
                    episode: out.transition.episode_id,
                    step: out.transition.step_index,
                    obs: out.transition.state.clone(),
                    action: out.transition.action.clone(),
                    reward: out.transition.reward,
                    terminal: out.transition.terminal,
                });
            }
            *visits.entry(position_bin(&grid, &out.position)).or_insert(0) += 1;
            replay.push(out.transition);
            for &seg in &out.segments {
                agent.switch.record_commitment(seg);
                commit_trace.push((step, agent.switch.l_commit_ema));
                summary.segments += 1;
                summary.committed_steps += seg as u64;
                interval.seg_total += seg as u64;
                interval.seg_count += 1;
            }
            interval.switches += u64::from(out.switched);
            interval.steps += 1;
            if let Some(f) = out.finished {
                summary.episodes += 1;
                interval.returns.push(f.ret);
                if f.terminal == TerminalKind::Terminal {
                    summary.goal_episodes += 1;
                    if summary.first_goal_step.is_none() {
                        summary.first_goal_step = Some(step);
                    }
                    stop |= cfg.stop_on_goal;
                }
            }

            if step > cfg.warmup_steps as u64 && step.is_multiple_of(cfg.train_every as u64) {
                let batch = sample_batch(cfg.agent, &replay, cfg.batch_size, agent.plan_len, &mut sample_rng)?;
                last_losses = agent.train_iteration(&batch)?;
                interval.last_losses = Some(last_losses);
                summary.min_epsilon = summary.min_epsilon.min(agent.switch.epsilon);
            }

            if step.is_multiple_of(cfg.log_every as u64) {
                let eval = if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every as u64) {
                    Some(evaluate(&agent, cfg.eval_episodes, cfg.seed)?)
                } else {
                    None
                };
                metrics.push(metrics_row(step, &summary, &agent, &interval, last_losses, eval.as_ref(), visits.len()));
                if eval.is_some() {
                    summary.final_eval = eval;
                }
                interval = Interval::default();
            }
        }
    }
    summary.updates = agent.updates();
    summary.transitions_stored = replay.total_pushed();
    if interval.steps > 0 {
        metrics.push(metrics_row(summary.steps, &summary, &agent, &interval, last_losses, None, visits.len()));
    }
    Ok(RunOutput {
        metrics,
        trajectory,
        visits,
        grid,
        summary,
        agent,
        replay,
        commit_trace,
    })
}

fn metrics_row(
    step: u64,
    summary: &RunSummary,
    agent: &Agent,
    interval: &Interval,
    losses: Losses,
    eval: Option<&EvalStats>,
    coverage: usize,
) -> MetricsRow {
    let trained = interval.last_losses.is_some() || agent.updates() > 0;
    let nan_unless = |v: f64| if trained { v } else { f64::NAN };
    MetricsRow {
        step,
        episodes: summary.episodes,
        train_return: mean_std(&interval.returns).0,
        eval_return_mean: eval.map_or(f64::NAN, |e| e.mean),
        eval_return_std: eval.map_or(f64::NAN, |e| e.std),
        l_commit_ema: agent.switch.l_commit_ema,
        epsilon: agent.switch.epsilon,
        alpha: agent.alpha(),
        entropy: nan_unless(losses.entropy),
        critic_loss: nan_unless(losses.critic),
        actor_loss: nan_unless(losses.actor),
        switch_rate: interval.switches as f64 / interval.steps.max(1) as f64,
        mean_commit: if interval.seg_count > 0 {
            interval.seg_total as f64 / interval.seg_count as f64
        } else {
            f64::NAN
        },
        goal_hits: summary.goal_episodes,
        coverage: coverage as u64,
    }
}
