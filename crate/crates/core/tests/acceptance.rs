//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any selected criterion fails.
//!
//! Run a subset by number: `cargo test --test acceptance -- 1 8 9`.

mod support;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use gpm_core::agent::Agent;
use gpm_core::baselines::sample_batch;
use gpm_core::envs::{make_env, shrink_setpoint, EnvSpec, PlanFrame, TerminalKind};
use gpm_core::plan::{ego_to_world, rho, world_to_ego, Plan};
use gpm_core::replay::{PlanItem, ReplayBuffer, SampledPlanBatch, Transition};
use gpm_core::{artifacts, run, AgentConfig, AgentKind};
use gpm_diffcore::{soft_update, Adam, Matrix, ParamStore, Params, Tape};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use support::{config, jitter, random_replay, rel_err};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (u32, &'static str, Duration, fn() -> Verdict);

const CRITERIA: &[Criterion] = &[
    (1, "gradient integrity", Duration::from_secs(60), gradient_integrity),
    (2, "SAC reduction", Duration::from_secs(60), sac_reduction),
    (3, "Bellman oracle", Duration::from_secs(120), bellman_oracle),
    (4, "commitment control loop", Duration::from_secs(600), commitment_control),
    (5, "Pendulum smoke performance", Duration::from_secs(5 * 900), pendulum_performance),
    (6, "exploration on MountainCar", Duration::from_secs(1800), exploration),
    (7, "mode ablations", Duration::from_secs(300), mode_ablations),
    (8, "replay law", Duration::from_secs(60), replay_law),
    (9, "shrinkage and frame algebra", Duration::from_secs(10), frame_algebra),
    (10, "determinism", Duration::from_secs(300), determinism),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for &(id, name, budget, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let pass = v.pass && in_time;
        failures += usize::from(!pass);
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.1}s of {}s{}]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const PROBES: usize = 60;

fn small_agent(seed: u64) -> Agent {
    let cfg = config(&[("hidden", "[8, 8]"), ("rnn_hidden", "6"), ("plan_len", "3"), ("seed", &seed.to_string())]);
    let spec = make_env("pendulum").unwrap().spec().clone();
    let mut agent = Agent::new(&cfg, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    jitter(&mut agent.actor, 0.2, &mut rng);
    jitter(&mut agent.critic, 0.2, &mut rng);
    agent
}

fn random_obs(rows: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, 3, data)
}

fn random_plan_batch(rows: usize, max_len: usize, rng: &mut ChaCha8Rng) -> SampledPlanBatch {
    let items = (0..rows)
        .map(|i| {
            let l = rng.random_range(1..=max_len);
            PlanItem {
                state: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                actions: (0..l).map(|_| vec![rng.random_range(-2.0..2.0)]).collect(),
                rewards: (0..l).map(|_| rng.random_range(-5.0..0.0)).collect(),
                next_state: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                bootstrap: i % 4 != 0,
                episode_id: i as u64,
                step_index: 0,
            }
        })
        .collect();
    SampledPlanBatch { items }
}

/// Probes `PROBES` random scalars of `store`; `loss` evaluates the objective
/// at a perturbed copy.
fn probe(store: &ParamStore, rng: &mut ChaCha8Rng, loss: impl Fn(&ParamStore) -> f64) -> (usize, f64, usize) {
    let mut worst = 0.0f64;
    let mut bad = 0;
    let mut live = 0;
    for _ in 0..PROBES {
        let k = rng.random_range(0..store.numel());
        let analytic = store.grad_flat(k);
        let mut plus = store.clone();
        plus.set_flat(k, store.get_flat(k) + FD_STEP);
        let mut minus = store.clone();
        minus.set_flat(k, store.get_flat(k) - FD_STEP);
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        let e = rel_err(analytic, numeric, FD_FLOOR);
        live += usize::from(analytic.abs() > 1e-3);
        worst = worst.max(e);
        bad += usize::from(e > FD_TOL);
    }
    (bad, worst, live)
}

fn gradient_integrity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut agent = small_agent(3);
    let alpha = 0.3;

    // Actor loss: the recorded recurrent feed is replayed in the perturbed
    // passes, because the detached input is a constant of the gradient.
    let obs = random_obs(16, &mut rng);
    let noise = agent.generator.draw_noise(16, &mut rng);
    let mut tape = Tape::new();
    let (loss, fwd) = agent
        .actor_loss(&mut tape, Params::trainable(&agent.actor), &obs, &noise, alpha, None)
        .unwrap();
    let grads = tape.backward(loss).unwrap();
    agent.actor.accumulate(&grads);
    let fed = fwd.fed.clone();
    let (a_bad, a_worst, a_live) = probe(&agent.actor, &mut rng, |s| {
        let mut t = Tape::new();
        let (l, _) = agent.actor_loss(&mut t, Params::frozen(s), &obs, &noise, alpha, Some(&fed)).unwrap();
        t.value(l).item()
    });

    // Critic loss against fixed TD targets.
    let batch = agent.unit_batch(&random_plan_batch(16, 3, &mut rng)).unwrap();
    let td_noise = agent.generator.draw_noise(16, &mut rng);
    let targets = agent.td_targets(&batch, &td_noise, alpha).unwrap();
    let mut tape = Tape::new();
    let loss = agent.critic_loss(&mut tape, Params::trainable(&agent.critic), &batch, &targets).unwrap();
    let grads = tape.backward(loss).unwrap();
    agent.critic.accumulate(&grads);
    let (c_bad, c_worst, c_live) = probe(&agent.critic, &mut rng, |s| {
        let mut t = Tape::new();
        let l = agent.critic_loss(&mut t, Params::frozen(s), &batch, &targets).unwrap();
        t.value(l).item()
    });

    // Temperature objective at random (log alpha, mean log-prob) pairs.
    let (mut t_bad, mut t_worst) = (0, 0.0f64);
    for _ in 0..PROBES {
        let la = rng.random_range(-3.0..1.0);
        let mean_lp = rng.random_range(-3.0..3.0);
        let mut store = ParamStore::new();
        store.add("log_alpha", Matrix::scalar(la));
        let mut tape = Tape::new();
        let l = agent.alpha_loss(&mut tape, Params::trainable(&store), mean_lp);
        let g = tape.backward(l).unwrap();
        store.accumulate(&g);
        let analytic = store.grad_flat(0);
        let eval = |x: f64| {
            let mut s = ParamStore::new();
            s.add("log_alpha", Matrix::scalar(x));
            let mut t = Tape::new();
            let l = agent.alpha_loss(&mut t, Params::frozen(&s), mean_lp);
            t.value(l).item()
        };
        let numeric = (eval(la + FD_STEP) - eval(la - FD_STEP)) / (2.0 * FD_STEP);
        let e = rel_err(analytic, numeric, FD_FLOOR);
        t_worst = t_worst.max(e);
        t_bad += usize::from(e > FD_TOL);
    }

    verdict(
        a_bad + c_bad + t_bad == 0 && a_live >= 10 && c_live >= 10,
        format!(
            "{PROBES} probes each; worst relative error actor {a_worst:.2e} ({a_live} non-trivial), critic {c_worst:.2e} ({c_live} non-trivial), alpha {t_worst:.2e}; tolerance {FD_TOL:.0e}"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn sac_reduction() -> Verdict {
    let spec = make_env("pendulum").unwrap().spec().clone();
    let gpm_cfg = config(&[("agent", "gpm"), ("plan_len", "1"), ("mode", "mpc"), ("seed", "5")]);
    let sac_cfg = config(&[("agent", "sac"), ("seed", "5")]);
    let mut gpm = Agent::new(&gpm_cfg, &spec).unwrap();
    let mut sac = Agent::new(&sac_cfg, &spec).unwrap();
    let replay = random_replay("pendulum", 3000, 9);
    let mut rg = ChaCha8Rng::seed_from_u64(77);
    let mut rs = ChaCha8Rng::seed_from_u64(77);
    let same = |a: &Agent, b: &Agent| {
        let (x, y) = (a.flat_parameters(), b.flat_parameters());
        x.len() == y.len() && x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
    };
    let mut first_diff = None;
    if !same(&gpm, &sac) {
        first_diff = Some(0);
    }
    for step in 1..=100 {
        if first_diff.is_some() {
            break;
        }
        let bg = sample_batch(AgentKind::Gpm, &replay, 64, gpm.plan_len, &mut rg).unwrap();
        let bs = sample_batch(AgentKind::Sac, &replay, 64, sac.plan_len, &mut rs).unwrap();
        let lg = gpm.train_iteration(&bg).unwrap();
        let ls = sac.train_iteration(&bs).unwrap();
        if !same(&gpm, &sac) || lg != ls {
            first_diff = Some(step);
        }
    }
    match first_diff {
        None => verdict(
            true,
            format!("{} parameters bit-identical after each of 100 updates", gpm.flat_parameters().len()),
        ),
        Some(s) => verdict(false, format!("trajectories diverge at update {s}")),
    }
}

// ---------------------------------------------------------------- 3

const GAMMA_TOY: f64 = 0.9;
const TOY_ACTIONS: [f64; 2] = [-0.9, 0.9];

/// Two states, two actions, deterministic. `(next, reward)` for state `s`
/// and action index `d`.
fn toy_step(s: usize, d: usize) -> (usize, f64) {
    match (s, d) {
        (0, 0) => (0, 0.0),
        (0, _) => (1, 1.0),
        (_, 0) => (0, 2.0),
        (_, _) => (1, 0.5),
    }
}

fn one_hot(s: usize) -> Vec<f64> {
    let mut v = vec![0.0; 2];
    v[s] = 1.0;
    v
}

fn bellman_oracle() -> Verdict {
    let spec = EnvSpec {
        name: "toy".into(),
        obs_dim: 2,
        action_dim: 1,
        action_low: vec![-1.0],
        action_high: vec![1.0],
        max_steps: 50,
        dt: None,
        frame: PlanFrame::RawAction,
    };
    let cfg = config(&[("gamma", "0.9"), ("plan_len", "2"), ("hidden", "[32, 32]"), ("rnn_hidden", "16"), ("seed", "1")]);
    let mut agent = Agent::new(&cfg, &spec).unwrap();
    // Pin the actor to action +0.9 everywhere.
    let zero_head = |store: &mut ParamStore, w, b, v: f64| {
        store.value_mut(w).fill(0.0);
        store.value_mut(b).fill(v);
    };
    let (mw, mb) = (agent.generator.mean.weight, agent.generator.mean.bias);
    let (sw, sb) = (agent.generator.log_std.weight, agent.generator.log_std.bias);
    zero_head(&mut agent.actor, mw, mb, 0.9f64.atanh());
    zero_head(&mut agent.actor, sw, sb, -20.0);

    // Brute-force values of the pinned policy and of every prefix.
    let mut v = [0.0; 2];
    for _ in 0..2000 {
        v = [0, 1].map(|s| {
            let (n, r) = toy_step(s, 1);
            r + GAMMA_TOY * v[n]
        });
    }
    let prefix_value = |s: usize, ds: &[usize]| {
        let (mut s, mut ret, mut disc) = (s, 0.0, 1.0);
        for &d in ds {
            let (n, r) = toy_step(s, d);
            ret += disc * r;
            disc *= GAMMA_TOY;
            s = n;
        }
        ret + disc * v[s]
    };

    // Uniform behaviour data in timeout-terminated episodes.
    let mut replay = ReplayBuffer::new(100_000, PlanFrame::RawAction).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for ep in 0..80u64 {
        let mut s = (ep % 2) as usize;
        for t in 0..50u64 {
            let d = rng.random_range(0..2);
            let (n, r) = toy_step(s, d);
            replay.push(Transition {
                state: one_hot(s),
                action: vec![TOY_ACTIONS[d]],
                reward: r,
                next_state: one_hot(n),
                terminal: if t == 49 { TerminalKind::Timeout } else { TerminalKind::None },
                episode_id: ep,
                step_index: t,
                frame_origin: Vec::new(),
            });
            s = n;
        }
    }

    let mut opt = Adam::new(&agent.critic);
    let iterations = 6000;
    for it in 0..iterations {
        let lr = if it < 4000 { 1e-3 } else { 2e-4 };
        let batch = replay.sample_plan_batch(64, 2, &mut rng).unwrap();
        let ub = agent.unit_batch(&batch).unwrap();
        let noise = agent.generator.draw_noise(ub.rows(), &mut rng);
        let targets = agent.td_targets(&ub, &noise, 0.0).unwrap();
        let mut tape = Tape::new();
        let loss = agent.critic_loss(&mut tape, Params::trainable(&agent.critic), &ub, &targets).unwrap();
        let g = tape.backward(loss).unwrap();
        agent.critic.accumulate(&g);
        opt.step(&mut agent.critic, lr).unwrap();
        soft_update(&mut agent.critic_target, &agent.critic, 0.05).unwrap();
    }

    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for s in 0..2 {
        for ds in [vec![0], vec![1], vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]] {
            let plan: Vec<Vec<f64>> = ds.iter().map(|&d| vec![TOY_ACTIONS[d]]).collect();
            let learned = agent.critics.min_value(&agent.critic, &one_hot(s), &plan, plan.len()).unwrap();
            worst = worst.max((learned - prefix_value(s, &ds)).abs());
            pairs += 1;
        }
    }
    verdict(
        worst <= 1e-2,
        format!("max |learned - DP| over {pairs} state-prefix pairs = {worst:.2e} (tolerance 1e-2; V(A)={:.3}, V(B)={:.3})", v[0], v[1]),
    )
}

// ---------------------------------------------------------------- 4, 5

const PENDULUM_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// The Pendulum preset, with a narrower recurrent width to fit the
/// single-core runtime budget.
fn pendulum_config(seed: u64) -> AgentConfig {
    config(&[
        ("task", "pendulum"),
        ("seed", &seed.to_string()),
        ("rnn_hidden", "32"),
        ("total_steps", "30000"),
        ("eval_every", "5000"),
        ("eval_episodes", "10"),
    ])
}

fn commitment_control() -> Verdict {
    let cfg = pendulum_config(0);
    let out = run(&cfg).unwrap();
    let target = cfg.l_commit_target();
    let tail_start = cfg.total_steps as u64 * 4 / 5;
    let tail: Vec<f64> = out.commit_trace.iter().filter(|(s, _)| *s > tail_start).map(|&(_, e)| e).collect();
    let (lo, hi) = (0.7 * target, 1.3 * target);
    let (min, max) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
    let settled = !tail.is_empty() && min >= lo && max <= hi;
    let eps_ok = out.summary.min_epsilon >= 0.0 && out.agent.switch.epsilon >= 0.0;
    verdict(
        settled && eps_ok,
        format!(
            "ema over final 20% in [{min:.3}, {max:.3}] ({} segments), band [{lo:.3}, {hi:.3}]; min epsilon {:.4}",
            tail.len(),
            out.summary.min_epsilon
        ),
    )
}

fn pendulum_performance() -> Verdict {
    let mut hits = 0;
    let mut parts = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in PENDULUM_SEEDS {
        let start = Instant::now();
        let out = run(&pendulum_config(seed)).unwrap();
        slowest = slowest.max(start.elapsed());
        let ret = out.summary.final_eval.as_ref().map_or(f64::NEG_INFINITY, |e| e.mean);
        hits += usize::from(ret >= -300.0);
        parts.push(format!("{ret:.0}"));
    }
    let per_seed_ok = slowest <= Duration::from_secs(900);
    verdict(
        hits >= 4 && per_seed_ok,
        format!(
            "final eval return per seed [{}]; {hits}/5 at or above -300 (need 4); slowest seed {:.0}s",
            parts.join(", "),
            slowest.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 6

const MC_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Shared desk-scale MountainCar settings; the plan length stays at the
/// preset 10.
fn mountaincar_config(agent: &str, seed: u64, steps: usize, stop_on_goal: bool) -> AgentConfig {
    config(&[
        ("task", "mountaincar"),
        ("agent", agent),
        ("seed", &seed.to_string()),
        ("hidden", "[64, 64]"),
        ("rnn_hidden", "32"),
        ("batch_size", "64"),
        ("lr", "3e-4"),
        ("train_every", "2"),
        ("total_steps", &steps.to_string()),
        ("eval_every", "0"),
        ("log_every", "1000"),
        ("stop_on_goal", if stop_on_goal { "true" } else { "false" }),
    ])
}

fn exploration() -> Verdict {
    let mut reached: BTreeMap<&str, Vec<Option<u64>>> = BTreeMap::new();
    for agent in ["gpm", "sac"] {
        for seed in MC_SEEDS {
            let out = run(&mountaincar_config(agent, seed, 50_000, true)).unwrap();
            reached.entry(agent).or_default().push(out.summary.first_goal_step);
        }
    }
    let mut coverage: BTreeMap<&str, f64> = BTreeMap::new();
    for agent in ["gpm", "ez", "sac"] {
        let total: usize = MC_SEEDS
            .iter()
            .map(|&seed| run(&mountaincar_config(agent, seed, 5_000, false)).unwrap().visits.len())
            .sum();
        coverage.insert(agent, total as f64 / MC_SEEDS.len() as f64);
    }
    let count = |a: &str| reached[a].iter().filter(|g| g.is_some()).count();
    let (g, s) = (count("gpm"), count("sac"));
    let (cg, ce, cs) = (coverage["gpm"], coverage["ez"], coverage["sac"]);
    let fmt = |a: &str| {
        reached[a]
            .iter()
            .map(|g| g.map_or("-".to_string(), |v| v.to_string()))
            .collect::<Vec<_>>()
            .join(",")
    };
    verdict(
        g >= 4 && s <= 2 && cg >= 1.25 * cs && ce >= 1.25 * cs,
        format!(
            "goal reached gpm {g}/5 [{}], sac {s}/5 [{}]; mean bins visited in 5k steps gpm {cg:.1}, ez {ce:.1}, sac {cs:.1} (need x1.25 over sac)",
            fmt("gpm"),
            fmt("sac")
        ),
    )
}

// ---------------------------------------------------------------- 7

fn mode_ablations() -> Verdict {
    let plan_len = 4usize;
    let mut means = BTreeMap::new();
    for mode in ["mpc", "commit", "standard"] {
        let cfg = config(&[
            ("task", "pendulum"),
            ("mode", mode),
            ("plan_len", &plan_len.to_string()),
            ("rnn_hidden", "32"),
            ("total_steps", "3000"),
            ("eval_every", "0"),
            ("seed", "2"),
        ]);
        let out = run(&cfg).unwrap();
        // Every Pendulum episode runs to its 200-step limit, a multiple of L.
        let full = out.summary.episodes > 0 && out.trajectory.iter().all(|r| r.terminal != TerminalKind::Terminal);
        means.insert(mode, (out.summary.mean_commit(), full));
    }
    let (mpc, commit, std) = (means["mpc"].0, means["commit"].0, means["standard"].0);
    let l = plan_len as f64;
    let all_full = means.values().all(|m| m.1);
    verdict(
        all_full && mpc == 1.0 && commit == l && std > 1.0 && std < l,
        format!("mean commitment mpc {mpc}, commit {commit} (L={plan_len}), standard {std:.3}"),
    )
}

// ---------------------------------------------------------------- 8

fn replay_law() -> Verdict {
    let plan_len = 5usize;
    let episode_len = 400u64;
    // Two interleaved producers; each action encodes its own position so
    // sampled plans can be audited.
    let mut replay = ReplayBuffer::new(1_000_000, PlanFrame::RawAction).unwrap();
    for t in 0..episode_len {
        for worker in 0..2u64 {
            for round in 0..3u64 {
                let ep = round * 2 + worker;
                let terminal = if t + 1 == episode_len {
                    if ep % 2 == 0 { TerminalKind::Terminal } else { TerminalKind::Timeout }
                } else {
                    TerminalKind::None
                };
                replay.push(Transition {
                    state: vec![ep as f64, t as f64],
                    action: vec![ep as f64, t as f64],
                    reward: (ep * 10_000 + t) as f64,
                    next_state: vec![ep as f64, (t + 1) as f64],
                    terminal,
                    episode_id: ep,
                    step_index: t,
                    frame_origin: Vec::new(),
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut counts = vec![0u64; plan_len];
    let mut mid = 0u64;
    while mid < 100_000 {
        for item in replay.sample_plan_batch(1024, plan_len, &mut rng).unwrap().items {
            if item.step_index + plan_len as u64 <= episode_len && mid < 100_000 {
                counts[item.actions.len() - 1] += 1;
                mid += 1;
            }
        }
    }
    let expected = mid as f64 / plan_len as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((plan_len - 1) as f64).unwrap().cdf(chi2);

    let mut crossings = 0u64;
    let mut audited = 0u64;
    while audited < 1_000_000 {
        for item in replay.sample_plan_batch(4096, plan_len, &mut rng).unwrap().items {
            audited += 1;
            let ok = item.actions.iter().enumerate().all(|(k, a)| {
                a[0] == item.episode_id as f64 && a[1] == (item.step_index + k as u64) as f64
            }) && item
                .rewards
                .iter()
                .enumerate()
                .all(|(k, &r)| r == (item.episode_id * 10_000 + item.step_index + k as u64) as f64);
            crossings += u64::from(!ok);
        }
    }
    verdict(
        p > 0.01 && crossings == 0,
        format!("l counts {counts:?}, chi-square {chi2:.2}, p = {p:.3}; {crossings} cross-episode plans in {audited} samples"),
    )
}

// ---------------------------------------------------------------- 9

fn frame_algebra() -> Verdict {
    let cases = 2000;
    let mut runner = TestRunner::new(PropConfig {
        cases,
        ..PropConfig::default()
    });
    let v = -50.0..50.0f64;
    let delta = 0.0..10.0f64;
    let shrink = runner.run(&(v.clone(), v.clone(), delta.clone()), |(x, y, d)| {
        let out = shrink_setpoint(&[x, y], d);
        let norm = x.hypot(y);
        let expect = (norm - d).max(0.0);
        prop_assert!((out[0].hypot(out[1]) - expect).abs() <= 1e-12 * (1.0 + norm));
        if expect > 0.0 {
            // Same direction as the command.
            prop_assert!((out[0] * y - out[1] * x).abs() <= 1e-9 * (1.0 + norm * norm));
        }
        Ok(())
    });
    let continuity = runner.run(&(v.clone(), v.clone(), -1e-3..1e-3f64, -1e-3..1e-3f64, delta), |(x, y, hx, hy, d)| {
        // The map is the proximal step of a norm: 1-Lipschitz.
        let a = shrink_setpoint(&[x, y], d);
        let b = shrink_setpoint(&[x + hx, y + hy], d);
        prop_assert!((a[0] - b[0]).hypot(a[1] - b[1]) <= hx.hypot(hy) * (1.0 + 1e-9) + 1e-15);
        Ok(())
    });
    let round_trip = runner.run(&(prop::collection::vec((v.clone(), v.clone()), 1..8), v.clone(), v.clone(), v.clone(), v), |(pts, ox, oy, nx, ny)| {
        let origin = [ox, oy];
        for (x, y) in &pts {
            let w = ego_to_world(&[*x, *y], &origin);
            let back = world_to_ego(&w, &origin);
            prop_assert!((back[0] - x).abs() <= 1e-12 && (back[1] - y).abs() <= 1e-12);
        }
        // Time-forwarding re-expresses the remaining setpoints in the new frame.
        let plan = Plan::new(pts.iter().map(|&(x, y)| vec![x, y]).collect(), PlanFrame::EgoSetpoint);
        let next = rho(&plan, &origin, &[nx, ny]);
        prop_assert_eq!(next.len(), pts.len() - 1);
        for (k, a) in next.actions.iter().enumerate() {
            let w_old = ego_to_world(&plan.actions[k + 1], &origin);
            let w_new = ego_to_world(a, &[nx, ny]);
            prop_assert!((w_old[0] - w_new[0]).abs() <= 1e-12 && (w_old[1] - w_new[1]).abs() <= 1e-12);
        }
        Ok(())
    });
    let results = [
        ("norm law", shrink.map_err(|e| e.to_string())),
        ("continuity", continuity.map_err(|e| e.to_string())),
        ("ego/world round trip", round_trip.map_err(|e| e.to_string())),
    ];
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    verdict(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{cases} cases each for the norm law, 1-Lipschitz continuity and frame round trips")
        } else {
            failed.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 10

fn determinism() -> Verdict {
    let cfg = config(&[
        ("task", "pendulum"),
        ("rnn_hidden", "32"),
        ("total_steps", "3000"),
        ("eval_every", "1000"),
        ("eval_episodes", "2"),
        ("seed", "13"),
    ]);
    let a = artifacts::metrics_csv(&run(&cfg).unwrap().metrics).unwrap();
    let b = artifacts::metrics_csv(&run(&cfg).unwrap().metrics).unwrap();
    verdict(
        a == b && !a.is_empty(),
        format!("two runs wrote {} and {} metrics bytes, identical: {}", a.len(), b.len(), a == b),
    )
}
