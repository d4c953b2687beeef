use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::Duration;

use log::info;

use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::metrics::{self, Metrics};
use crate::protocol::head::{HeadConfig, HeadNode, HeadSummary};
use crate::protocol::sim::{run_cluster, SimNetwork};
use crate::protocol::tcp::{serve_head, TcpEndpoint};
use crate::protocol::worker::{worker_loop, WorkerNode, WorkerReport};
use crate::rng::RngState;
use crate::types::ParameterSet;

use super::config::{RunConfig, TransportKind};

/// Thresholds swept by `detach sweep` when none are given.
pub const DEFAULT_THRESHOLDS: [f64; 8] = [0.001, 0.01, 0.05, 0.1, 0.2, 0.5, 0.8, 1.0];

const CONNECT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub kl_threshold: f64,
    pub global_steps: u64,
    pub updates: u64,
    pub episodes: usize,
    /// Mean return over the last 100 episodes.
    pub final_mean_return: Option<f64>,
    /// Indexed by worker id.
    pub sync_counts: Vec<u64>,
    pub weight_bytes: u64,
}

impl RunSummary {
    pub fn total_syncs(&self) -> u64 {
        self.sync_counts.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub head: HeadSummary,
    pub metrics: Metrics,
    pub workers: Vec<WorkerReport>,
    pub final_params: ParameterSet,
}

fn head_rng(seed: u64) -> RngState {
    RngState::new(seed).split(0)
}

/// Stream owned by worker `worker_id` for a run seeded with `seed`.
pub fn worker_rng(seed: u64, worker_id: u32) -> RngState {
    RngState::new(seed).split(1 + u64::from(worker_id))
}

fn head_node(config: &RunConfig) -> Result<HeadNode> {
    HeadNode::new(HeadConfig {
        env: config.env,
        workers: config.workers,
        ppo: config.ppo.clone(),
        sync_rule: config.sync_rule()?,
        kl_decay: config.kl_decay,
        total_timesteps: config.total_timesteps,
        rng: head_rng(config.seed),
    })
}

fn worker_node(config: &RunConfig, id: u32) -> Result<WorkerNode> {
    WorkerNode::new(
        id,
        config.env,
        config.envs_per_worker as u32,
        &worker_rng(config.seed, id),
    )
}

fn summarize(config: &RunConfig, head: &HeadSummary) -> RunSummary {
    RunSummary {
        kl_threshold: config.kl_threshold,
        global_steps: head.global_steps,
        updates: head.updates,
        episodes: head.episodes,
        final_mean_return: head.mean_recent_return,
        sync_counts: head.workers.iter().map(|w| w.sync_count).collect(),
        weight_bytes: head.weight_bytes,
    }
}

fn run_sim(config: &RunConfig) -> Result<(HeadNode, Vec<WorkerReport>)> {
    let mut head = head_node(config)?;
    let mut net = SimNetwork::new(
        RngState::new(config.seed).split(u64::MAX).next_u64(),
        config.latency,
    );
    let mut workers = Vec::with_capacity(config.workers);
    let mut conns = Vec::with_capacity(config.workers);
    for id in 0..config.workers as u32 {
        workers.push(worker_node(config, id)?);
        conns.push(net.connect());
    }
    let outcome = run_cluster(&mut net, &mut head, &mut workers, &conns)?;
    Ok((head, outcome.workers))
}

fn spawn_worker_process(exe: &Path, config: &RunConfig, addr: &str, id: u32) -> Result<Child> {
    Command::new(exe)
        .arg("worker")
        .args(["--connect", addr])
        .args(["--worker-id", &id.to_string()])
        .args(["--env", &config.env.to_string()])
        .args(["--envs-per-worker", &config.envs_per_worker.to_string()])
        .args(["--seed", &config.seed.to_string()])
        .stdin(Stdio::null())
        .spawn()
        .map_err(|e| {
            Error::Run(format!(
                "cannot launch worker {id} from {}: {e}",
                exe.display()
            ))
        })
}

fn run_tcp(config: &RunConfig) -> Result<(HeadNode, Vec<WorkerReport>)> {
    let mut head = head_node(config)?;
    let listener = TcpListener::bind(&config.host)
        .map_err(|e| Error::Run(format!("cannot bind {}: {e}", config.host)))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Error::Run(format!("listener address: {e}")))?
        .to_string();
    info!("head listening on {addr}");

    if let Some(exe) = &config.worker_exe {
        let mut children = Vec::with_capacity(config.workers);
        for id in 0..config.workers as u32 {
            match spawn_worker_process(exe, config, &addr, id) {
                Ok(c) => children.push(c),
                Err(e) => {
                    for c in &mut children {
                        let _ = c.kill();
                    }
                    return Err(e);
                }
            }
        }
        let served = serve_head(&listener, &mut head, config.workers);
        let mut failures = Vec::new();
        for (id, child) in children.iter_mut().enumerate() {
            if served.is_err() {
                let _ = child.kill();
            }
            match child.wait() {
                Ok(status) if status.success() => {}
                Ok(status) => failures.push(format!("worker {id} exited with {status}")),
                Err(e) => failures.push(format!("worker {id}: {e}")),
            }
        }
        served?;
        if !failures.is_empty() {
            return Err(Error::Run(failures.join("; ")));
        }
        // per-worker reports stay inside the child processes
        Ok((head, Vec::new()))
    } else {
        let mut handles = Vec::with_capacity(config.workers);
        for id in 0..config.workers as u32 {
            let node = worker_node(config, id)?;
            let addr = addr.clone();
            handles.push(thread::spawn(move || {
                let mut endpoint = TcpEndpoint::connect(addr.as_str(), CONNECT_TIMEOUT)?;
                worker_loop(&mut endpoint, node)
            }));
        }
        let served = serve_head(&listener, &mut head, config.workers);
        let mut reports = Vec::with_capacity(handles.len());
        let mut failures = Vec::new();
        for (id, h) in handles.into_iter().enumerate() {
            match h.join() {
                Ok(Ok(r)) => reports.push(r),
                Ok(Err(e)) => failures.push(format!("worker {id}: {e}")),
                Err(_) => failures.push(format!("worker {id} panicked")),
            }
        }
        served?;
        if !failures.is_empty() {
            return Err(Error::Run(failures.join("; ")));
        }
        Ok((head, reports))
    }
}

/// Runs one configuration to completion and writes its metrics CSV.
pub fn run_detailed(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    info!(
        "run: {} x {} envs on {}, kl-threshold {}, {} steps over {}",
        config.workers,
        config.envs_per_worker,
        config.env,
        config.kl_threshold,
        config.total_timesteps,
        config.transport
    );
    let (head, workers) = match config.transport {
        TransportKind::Sim => run_sim(config)?,
        TransportKind::Tcp => run_tcp(config)?,
    };
    let summary = head.summary();
    metrics::write_csv(&config.metrics_path, head.metrics().rows())?;
    Ok(RunOutcome {
        summary: summarize(config, &summary),
        head: summary,
        metrics: head.metrics().clone(),
        workers,
        final_params: head.params().clone(),
    })
}

pub fn run(config: &RunConfig) -> Result<RunSummary> {
    run_detailed(config).map(|o| o.summary)
}

/// Entry point of a worker process launched for the TCP transport.
pub fn run_worker_process(
    connect: &str,
    worker_id: u32,
    env: EnvKind,
    envs_per_worker: usize,
    seed: u64,
) -> Result<WorkerReport> {
    let node = WorkerNode::new(
        worker_id,
        env,
        envs_per_worker as u32,
        &worker_rng(seed, worker_id),
    )?;
    let mut endpoint = TcpEndpoint::connect(connect, CONNECT_TIMEOUT)?;
    worker_loop(&mut endpoint, node)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub kl_threshold: f64,
    pub final_mean_return: Option<f64>,
    pub total_syncs: u64,
    pub weight_bytes: u64,
    pub global_steps: u64,
    pub metrics_path: PathBuf,
}

/// Metrics path for one threshold of a sweep, and the summary table path.
pub fn sweep_paths(base: &Path, thresholds: &[f64]) -> (Vec<PathBuf>, PathBuf) {
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "metrics".into());
    let dir = base.parent().unwrap_or_else(|| Path::new(""));
    let per = thresholds
        .iter()
        .map(|d| dir.join(format!("{stem}_kl{d}.csv")))
        .collect();
    (per, dir.join(format!("{stem}_sweep.csv")))
}

fn write_sweep_table(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut text = String::from(
        "kl_threshold,final_mean_return,total_sync_count,weight_bytes,global_steps,metrics_path\n",
    );
    for r in rows {
        let ret = r
            .final_mean_return
            .map(|v| format!("{v:.16e}"))
            .unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.kl_threshold,
            ret,
            r.total_syncs,
            r.weight_bytes,
            r.global_steps,
            r.metrics_path.display()
        ));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs `base` once per threshold with the same seed. The summary table is
/// written after every run, so a failure leaves the completed rows on disk.
pub fn sweep(base: &RunConfig, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    if thresholds.is_empty() {
        return Err(Error::Config(
            "thresholds: at least one threshold is required".into(),
        ));
    }
    for &d in thresholds {
        crate::aaps::check_threshold(d)?;
    }
    let (paths, table) = sweep_paths(&base.metrics_path, thresholds);
    let mut rows = Vec::with_capacity(thresholds.len());
    for (&d, path) in thresholds.iter().zip(paths) {
        let config = RunConfig {
            kl_threshold: d,
            metrics_path: path.clone(),
            ..base.clone()
        };
        let summary = match run(&config) {
            Ok(s) => s,
            Err(e) => {
                write_sweep_table(&table, &rows)?;
                return Err(Error::Run(format!(
                    "sweep aborted at kl-threshold {d}: {e}"
                )));
            }
        };
        info!(
            "kl-threshold {d}: mean return {:?}, {} syncs",
            summary.final_mean_return,
            summary.total_syncs()
        );
        rows.push(SweepRow {
            kl_threshold: d,
            final_mean_return: summary.final_mean_return,
            total_syncs: summary.total_syncs(),
            weight_bytes: summary.weight_bytes,
            global_steps: summary.global_steps,
            metrics_path: path,
        });
        write_sweep_table(&table, &rows)?;
    }
    Ok(rows)
}
