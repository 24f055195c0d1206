//! Run directory output: configuration echo, CSV logs, SVG plots and the
//! final parameter snapshot. Nothing here reads the clock, so identical runs
//! produce identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::AgentConfig;
use crate::error::{GpmError, Result};
use crate::runner::{MetricsRow, RunOutput, TrajectoryRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const RETURNS_PLOT: &str = "returns.svg";
pub const VISITATION_PLOT: &str = "visitation.svg";
pub const PARAMS_FILE: &str = "params.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPLAY_FILE: &str = "replay.bin";

fn csv_err(e: csv::Error) -> GpmError {
    GpmError::Format(format!("csv: {e}"))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(METRICS_COLUMNS).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| GpmError::Format(e.to_string()))
}

pub const METRICS_COLUMNS: &[&str] = &[
    "step",
    "episodes",
    "train_return",
    "eval_return_mean",
    "eval_return_std",
    "l_commit_ema",
    "epsilon",
    "alpha",
    "entropy",
    "critic_loss",
    "actor_loss",
    "switch_rate",
    "mean_commit",
    "goal_hits",
    "coverage",
];

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let (obs, act) = rows.first().map_or((0, 0), |r| (r.obs.len(), r.action.len()));
    let mut header = vec!["episode".to_string(), "step".to_string()];
    header.extend((0..obs).map(|i| format!("obs_{i}")));
    header.extend((0..act).map(|i| format!("action_{i}")));
    header.push("reward".into());
    header.push("terminal".into());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.episode.to_string(), r.step.to_string()];
        rec.extend(r.obs.iter().chain(&r.action).map(f64::to_string));
        rec.push(r.reward.to_string());
        rec.push(
            match r.terminal {
                crate::envs::TerminalKind::None => "none",
                crate::envs::TerminalKind::Terminal => "terminal",
                crate::envs::TerminalKind::Timeout => "timeout",
            }
            .into(),
        );
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| GpmError::Format(e.to_string()))
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

/// Line chart of evaluation (solid) and training (dashed) returns.
pub fn returns_svg(rows: &[MetricsRow], title: &str) -> String {
    let eval: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.eval_return_mean.is_finite())
        .map(|r| (r.step as f64, r.eval_return_mean))
        .collect();
    let train: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.train_return.is_finite())
        .map(|r| (r.step as f64, r.train_return))
        .collect();
    let all: Vec<&(f64, f64)> = eval.iter().chain(&train).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &&(x, y) in &all {
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 - y0 < 1e-9 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    x0 = x0.min(0.0);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    axes(&mut s, (x0, x1), (y0, y1), "environment steps", "return");
    for (pts, style) in [(&train, "stroke=\"#999\" stroke-dasharray=\"4 3\""), (&eval, "stroke=\"#1f5fa8\"")] {
        if pts.is_empty() {
            continue;
        }
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke-width=\"2\" {style} points=\"{}\"/>", path.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

/// Heat map of visit counts over the first two position dimensions, on a
/// log colour scale.
pub fn visitation_svg(visits: &BTreeMap<Vec<usize>, u64>, grid: &[(f64, f64, usize)], title: &str) -> String {
    let mut s = svg_open(title);
    let (gx, gy) = match grid {
        [x, y, ..] => (*x, *y),
        [x] => (*x, (0.0, 1.0, 1)),
        [] => ((0.0, 1.0, 1), (0.0, 1.0, 1)),
    };
    axes(&mut s, (gx.0, gx.1), (gy.0, gy.1), "position[0]", "position[1]");
    let mut cells: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (k, v) in visits {
        let key = (k.first().copied().unwrap_or(0), k.get(1).copied().unwrap_or(0));
        *cells.entry(key).or_insert(0) += v;
    }
    let max = cells.values().copied().max().unwrap_or(1) as f64;
    let cw = (W - 2.0 * PAD) / gx.2 as f64;
    let ch = (H - 2.0 * PAD) / gy.2 as f64;
    for ((i, j), v) in cells {
        let t = (1.0 + v as f64).ln() / (1.0 + max).ln();
        let shade = (255.0 * (1.0 - t)).round() as u8;
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({shade},{shade},255)\"/>",
            PAD + i as f64 * cw,
            H - PAD - (j + 1) as f64 * ch,
            cw,
            ch
        );
    }
    s.push_str("</svg>\n");
    s
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", W / 2.0, escape(title));
    s
}

fn axes(s: &mut String, x: (f64, f64), y: (f64, f64), xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        "<path d=\"M{PAD},{PAD} V{} H{}\" fill=\"none\" stroke=\"black\"/>",
        H - PAD,
        W - PAD
    );
    for (i, v) in [x.0, x.1].iter().enumerate() {
        let px = if i == 0 { PAD } else { W - PAD };
        let _ = writeln!(s, "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{}</text>", H - PAD + 16.0, tick(*v));
    }
    for (i, v) in [y.0, y.1].iter().enumerate() {
        let py = if i == 0 { H - PAD } else { PAD };
        let _ = writeln!(s, "<text x=\"{}\" y=\"{py}\" text-anchor=\"end\">{}</text>", PAD - 4.0, tick(*v));
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes every artifact of a finished run into `dir`, plus the replay
/// snapshot when asked.
pub fn write_run_dir(dir: &Path, cfg: &AgentConfig, out: &RunOutput, with_replay: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    fs::write(dir.join(METRICS_FILE), metrics_csv(&out.metrics)?)?;
    fs::write(dir.join(TRAJECTORY_FILE), trajectory_csv(&out.trajectory)?)?;
    let title = format!("{} / {:?} / seed {}", cfg.task, cfg.agent, cfg.seed);
    fs::write(dir.join(RETURNS_PLOT), returns_svg(&out.metrics, &title))?;
    fs::write(dir.join(VISITATION_PLOT), visitation_svg(&out.visits, &out.grid, &title))?;
    let params = serde_json::to_string(&out.agent.snapshot()).map_err(|e| GpmError::Format(e.to_string()))?;
    fs::write(dir.join(PARAMS_FILE), params)?;
    let summary = serde_json::to_string_pretty(&out.summary).map_err(|e| GpmError::Format(e.to_string()))?;
    fs::write(dir.join(SUMMARY_FILE), summary)?;
    if with_replay {
        let f = fs::File::create(dir.join(REPLAY_FILE))?;
        let mut w = std::io::BufWriter::new(f);
        out.replay.write_snapshot(&mut w)?;
        std::io::Write::flush(&mut w)?;
    }
    Ok(())
}
