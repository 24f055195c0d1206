use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpm_core::artifacts::{write_run_dir, CONFIG_FILE, PARAMS_FILE};
use gpm_core::envs::make_env;
use gpm_core::{evaluate, run, Agent, AgentConfig, GpmError, Result};

#[derive(Parser)]
#[command(name = "gpm", about = "Train and evaluate plan-emitting agents", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write its run directory.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write the replay buffer as `replay.bin`.
        #[arg(long)]
        save_replay: bool,
    },
    /// Evaluate the final parameters stored in a run directory.
    Eval {
        /// Run directory produced by `gpm run`.
        run_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Evaluation seed; defaults to the run's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train once per seed into `<out>/seed_<n>` and tabulate the outcomes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; unspecified keys come from the task preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Configuration overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl Common {
    /// Removes a boolean flag that landed among the trailing overrides.
    fn take_flag(&mut self, flag: &str) -> bool {
        let before = self.overrides.len();
        self.overrides.retain(|a| a != flag);
        self.overrides.len() != before
    }

    /// Removes `--name value` or `--name=value` from the trailing overrides.
    fn take_option(&mut self, name: &str) -> Result<Option<String>> {
        let flag = format!("--{name}");
        let prefix = format!("{flag}=");
        let mut found = None;
        let mut i = 0;
        while i < self.overrides.len() {
            if self.overrides[i] == flag {
                if i + 1 >= self.overrides.len() {
                    return Err(GpmError::Usage(format!("`{flag}` is missing a value")));
                }
                found = Some(self.overrides.remove(i + 1));
                self.overrides.remove(i);
            } else if let Some(v) = self.overrides[i].strip_prefix(&prefix) {
                found = Some(v.to_string());
                self.overrides.remove(i);
            } else {
                i += 1;
            }
        }
        Ok(found)
    }

    /// Lets `--config` and `--out` appear after the first override too.
    fn normalize(&mut self) -> Result<()> {
        if let Some(v) = self.take_option("config")? {
            self.config = Some(v.into());
        }
        if let Some(v) = self.take_option("out")? {
            self.out = Some(v.into());
        }
        Ok(())
    }
}

fn pairs(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(k) = it.next() {
        let Some(key) = k.strip_prefix("--") else {
            return Err(GpmError::Usage(format!("expected `--key value`, found `{k}`")));
        };
        if let Some((key, v)) = key.split_once('=') {
            out.push((key.to_string(), v.to_string()));
            continue;
        }
        let v = it
            .next()
            .ok_or_else(|| GpmError::Usage(format!("override `{k}` is missing a value")))?;
        out.push((key.to_string(), v.clone()));
    }
    Ok(out)
}

fn load(common: &Common, extra: &[(String, String)]) -> Result<AgentConfig> {
    let text = match &common.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| GpmError::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let mut ov = pairs(&common.overrides)?;
    ov.extend_from_slice(extra);
    AgentConfig::load(text.as_deref(), &ov)
}

fn default_out(cfg: &AgentConfig) -> PathBuf {
    let agent = format!("{:?}", cfg.agent).to_lowercase();
    PathBuf::from("runs").join(format!("{}-{agent}-seed{}", cfg.task, cfg.seed))
}

fn train(cfg: &AgentConfig, dir: &Path, save_replay: bool) -> Result<gpm_core::RunSummary> {
    let out = run(cfg)?;
    write_run_dir(dir, cfg, &out, save_replay)?;
    Ok(out.summary)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { mut common, save_replay } => {
            common.normalize()?;
            let save_replay = common.take_flag("--save-replay") || save_replay;
            let cfg = load(&common, &[])?;
            let dir = common.out.clone().unwrap_or_else(|| default_out(&cfg));
            let s = train(&cfg, &dir, save_replay)?;
            println!(
                "{}: {} steps, {} episodes, {} updates, final eval {}",
                dir.display(),
                s.steps,
                s.episodes,
                s.updates,
                s.final_eval.as_ref().map_or("n/a".into(), |e| format!("{:.2}", e.mean))
            );
        }
        Command::Eval { run_dir, episodes, seed } => {
            let text = fs::read_to_string(run_dir.join(CONFIG_FILE))?;
            let cfg = AgentConfig::load(Some(&text), &[])?;
            let spec = make_env(&cfg.task)?.spec().clone();
            let mut agent = Agent::new(&cfg, &spec)?;
            agent.load_snapshot(&fs::read_to_string(run_dir.join(PARAMS_FILE))?)?;
            let stats = evaluate(&agent, episodes, seed.unwrap_or(cfg.seed))?;
            println!("{}", serde_json::to_string_pretty(&stats).map_err(|e| GpmError::Format(e.to_string()))?);
        }
        Command::Sweep { mut common, seeds } => {
            common.normalize()?;
            let seeds = match common.take_option("seeds")? {
                Some(list) => list
                    .split(',')
                    .map(|v| v.trim().parse::<u64>().map_err(|e| GpmError::Usage(format!("--seeds: `{v}`: {e}"))))
                    .collect::<Result<Vec<_>>>()?,
                None => seeds,
            };
            let base = load(&common, &[])?;
            let root = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-sweep", base.task)));
            fs::create_dir_all(&root)?;
            let mut w = csv::Writer::from_path(root.join("sweep.csv")).map_err(|e| GpmError::Format(e.to_string()))?;
            w.write_record(["seed", "steps", "episodes", "first_goal_step", "goal_episodes", "mean_commit", "final_eval_mean"])
                .map_err(|e| GpmError::Format(e.to_string()))?;
            for seed in seeds {
                let cfg = load(&common, &[("seed".into(), seed.to_string())])?;
                let s = train(&cfg, &root.join(format!("seed_{seed}")), false)?;
                w.write_record([
                    seed.to_string(),
                    s.steps.to_string(),
                    s.episodes.to_string(),
                    s.first_goal_step.map_or(String::new(), |v| v.to_string()),
                    s.goal_episodes.to_string(),
                    s.mean_commit().to_string(),
                    fmt_opt(s.final_eval.as_ref().map(|e| e.mean)),
                ])
                .map_err(|e| GpmError::Format(e.to_string()))?;
                w.flush()?;
                eprintln!("seed {seed} done");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
