//! Run accounting: episode returns, sync counts, learner statistics, and the
//! CSV they are written to.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const RETURN_WINDOW: usize = 100;
/// `worker_id` used for learner rows.
pub const LEARNER_ROW: i64 = -1;

pub const CSV_HEADER: &str = "global_step,wall_clock_ticks,worker_id,episode_return,sync_count,kl_running_avg,param_version,policy_loss,value_loss,entropy";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub global_step: u64,
    pub wall_clock_ticks: u64,
    pub worker_id: i64,
    pub episode_return: Option<f64>,
    pub sync_count: u64,
    pub kl_running_avg: f64,
    pub param_version: u64,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
}

impl MetricsRow {
    fn blank(global_step: u64, wall_clock_ticks: u64, worker_id: i64) -> Self {
        Self {
            global_step,
            wall_clock_ticks,
            worker_id,
            episode_return: None,
            sync_count: 0,
            kl_running_avg: 0.0,
            param_version: 0,
            policy_loss: None,
            value_loss: None,
            entropy: None,
        }
    }
}

/// A completed episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Episode {
    pub global_step: u64,
    pub worker_id: u32,
    pub episode_return: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    rows: Vec<MetricsRow>,
    episodes: Vec<Episode>,
    window: VecDeque<f64>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    /// Appends an episode row and updates the trailing window.
    #[allow(clippy::too_many_arguments)]
    pub fn record_episode(
        &mut self,
        episode_return: f64,
        worker_id: u32,
        global_step: u64,
        wall_clock_ticks: u64,
        sync_count: u64,
        kl_running_avg: f64,
        param_version: u64,
    ) {
        self.episodes.push(Episode {
            global_step,
            worker_id,
            episode_return,
        });
        if self.window.len() == RETURN_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(episode_return);
        self.rows.push(MetricsRow {
            episode_return: Some(episode_return),
            sync_count,
            kl_running_avg,
            param_version,
            ..MetricsRow::blank(global_step, wall_clock_ticks, i64::from(worker_id))
        });
    }

    /// Per-worker divergence snapshot, emitted once per rollout.
    pub fn record_worker(
        &mut self,
        worker_id: u32,
        global_step: u64,
        wall_clock_ticks: u64,
        sync_count: u64,
        kl_running_avg: f64,
        param_version: u64,
    ) {
        self.rows.push(MetricsRow {
            sync_count,
            kl_running_avg,
            param_version,
            ..MetricsRow::blank(global_step, wall_clock_ticks, i64::from(worker_id))
        });
    }

    /// Learner row: `sync_count` is the total over workers and
    /// `kl_running_avg` the behavior-vs-updated KL of the update.
    #[allow(clippy::too_many_arguments)]
    pub fn record_update(
        &mut self,
        global_step: u64,
        wall_clock_ticks: u64,
        total_syncs: u64,
        behavior_kl: f64,
        param_version: u64,
        policy_loss: f64,
        value_loss: f64,
        entropy: f64,
    ) {
        self.rows.push(MetricsRow {
            sync_count: total_syncs,
            kl_running_avg: behavior_kl,
            param_version,
            policy_loss: Some(policy_loss),
            value_loss: Some(value_loss),
            entropy: Some(entropy),
            ..MetricsRow::blank(global_step, wall_clock_ticks, LEARNER_ROW)
        });
    }

    /// Mean of the last [`RETURN_WINDOW`] episode returns.
    pub fn mean_recent_return(&self) -> Option<f64> {
        if self.window.is_empty() {
            None
        } else {
            Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
        }
    }
}

/// First global step at which the trailing mean over `window` episodes
/// reaches `target`.
pub fn first_step_reaching(episodes: &[Episode], window: usize, target: f64) -> Option<u64> {
    let mut recent = VecDeque::with_capacity(window);
    let mut sum = 0.0;
    for e in episodes {
        if recent.len() == window {
            sum -= recent.pop_front().unwrap();
        }
        recent.push_back(e.episode_return);
        sum += e.episode_return;
        if recent.len() == window && sum / window as f64 >= target {
            return Some(e.global_step);
        }
    }
    None
}

fn real(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

fn opt_real(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        real(out, v);
    }
}

pub fn format_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 + rows.len() * 160);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},",
            r.global_step, r.wall_clock_ticks, r.worker_id
        );
        opt_real(&mut out, r.episode_return);
        let _ = write!(out, ",{},", r.sync_count);
        real(&mut out, r.kl_running_avg);
        let _ = write!(out, ",{},", r.param_version);
        opt_real(&mut out, r.policy_loss);
        out.push(',');
        opt_real(&mut out, r.value_loss);
        out.push(',');
        opt_real(&mut out, r.entropy);
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, format_csv(rows)).map_err(|e| Error::io(path, e))
}

fn parse_field<T: std::str::FromStr>(field: &str, name: &str, line: usize) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Run(format!("metrics line {line}: bad {name} {field:?}")))
}

fn parse_opt(field: &str, name: &str, line: usize) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_field(field, name, line).map(Some)
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(Error::Run(format!("unexpected metrics header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let n = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::Run(format!("metrics line {n}: {} fields", f.len())));
            }
            Ok(MetricsRow {
                global_step: parse_field(f[0], "global_step", n)?,
                wall_clock_ticks: parse_field(f[1], "wall_clock_ticks", n)?,
                worker_id: parse_field(f[2], "worker_id", n)?,
                episode_return: parse_opt(f[3], "episode_return", n)?,
                sync_count: parse_field(f[4], "sync_count", n)?,
                kl_running_avg: parse_field(f[5], "kl_running_avg", n)?,
                param_version: parse_field(f[6], "param_version", n)?,
                policy_loss: parse_opt(f[7], "policy_loss", n)?,
                value_loss: parse_opt(f[8], "value_loss", n)?,
                entropy: parse_opt(f[9], "entropy", n)?,
            })
        })
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}
