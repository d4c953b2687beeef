//! Head node: owns the learner, the authoritative parameters, and one
//! divergence tracker per worker.
//!
//! Per incoming transition the head evaluates `D_KL(behavior || learner)` at
//! the transition's observation, feeds the worker's tracker, queues the
//! transition into its `(worker, env)` stream, runs a PPO update once every
//! stream holds a full rollout plus one look-ahead transition (whose
//! observation supplies the bootstrap value), and acknowledges with the
//! worker's stale flag. A worker whose streams are already full waits for its
//! acknowledgement until the update has consumed them.

use std::collections::{BTreeMap, VecDeque};

use log::{debug, info};

use crate::aaps::{DivergenceTracker, SyncRule};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::learner::{ppo_update, PpoConfig, RolloutBatch, RolloutStream, UpdateStats};
use crate::metrics::Metrics;
use crate::policy;
use crate::rng::RngState;
use crate::types::{ParameterSet, Transition};

use super::wire::weight_response_size;
use super::Message;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub env: EnvKind,
    pub workers: usize,
    pub ppo: PpoConfig,
    pub sync_rule: SyncRule,
    pub kl_decay: f64,
    pub total_timesteps: u64,
    /// Stream for minibatch shuffling.
    pub rng: RngState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Handshake,
    Running,
    Draining,
}

#[derive(Debug, Clone)]
struct WorkerSlot {
    conn: usize,
    env_count: u32,
    tracker: DivergenceTracker,
    episode_returns: Vec<f64>,
    held_acks: usize,
    /// Version of the last WeightResponse sent on this connection.
    sent_version: u64,
    requests: u64,
    responses: u64,
    transitions: u64,
}

/// Per-worker totals at the end of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerTotals {
    pub worker_id: u32,
    pub sync_count: u64,
    pub weight_requests: u64,
    pub weight_responses: u64,
    pub transitions: u64,
    pub kl_running_avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSummary {
    pub global_steps: u64,
    pub updates: u64,
    pub final_version: u64,
    pub workers: Vec<WorkerTotals>,
    pub weight_bytes: u64,
    pub weight_response_size: u64,
    pub mean_recent_return: Option<f64>,
    pub episodes: usize,
    /// Largest `max_a |behavior(a) - learner(a)|` seen on any transition.
    pub max_behavior_gap: f64,
    pub last_update: Option<UpdateStats>,
}

impl HeadSummary {
    pub fn total_syncs(&self) -> u64 {
        self.workers.iter().map(|w| w.sync_count).sum()
    }
}

pub type Outbox = Vec<(usize, Message)>;

pub struct HeadNode {
    config: HeadConfig,
    params: ParameterSet,
    rng: RngState,
    phase: Phase,
    conn_worker: BTreeMap<usize, u32>,
    workers: BTreeMap<u32, WorkerSlot>,
    streams: BTreeMap<(u32, u32), VecDeque<Transition>>,
    global_step: u64,
    updates: u64,
    now: u64,
    metrics: Metrics,
    weight_bytes: u64,
    max_behavior_gap: f64,
    last_update: Option<UpdateStats>,
}

impl HeadNode {
    pub fn new(config: HeadConfig) -> Result<Self> {
        if config.workers == 0 {
            return Err(Error::Config(
                "workers: at least one worker is required".into(),
            ));
        }
        config.ppo.validate()?;
        // validates the decay up front
        DivergenceTracker::new(0, config.kl_decay)?;
        if let SyncRule::Divergence { kl_threshold } = config.sync_rule {
            crate::aaps::check_threshold(kl_threshold)?;
        }
        Ok(Self {
            params: ParameterSet::zeros(config.env.layout()),
            rng: config.rng.clone(),
            config,
            phase: Phase::Handshake,
            conn_worker: BTreeMap::new(),
            workers: BTreeMap::new(),
            streams: BTreeMap::new(),
            global_step: 0,
            updates: 0,
            now: 0,
            metrics: Metrics::new(),
            weight_bytes: 0,
            max_behavior_gap: 0.0,
            last_update: None,
        })
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    /// True once the step budget is spent and Shutdown has gone out.
    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Draining
    }

    pub fn worker_for_conn(&self, conn: usize) -> Option<u32> {
        self.conn_worker.get(&conn).copied()
    }

    pub fn tracker(&self, worker_id: u32) -> Option<&DivergenceTracker> {
        self.workers.get(&worker_id).map(|w| &w.tracker)
    }

    pub fn summary(&self) -> HeadSummary {
        HeadSummary {
            global_steps: self.global_step,
            updates: self.updates,
            final_version: self.params.version,
            workers: self
                .workers
                .iter()
                .map(|(&id, w)| WorkerTotals {
                    worker_id: id,
                    sync_count: w.tracker.sync_count,
                    weight_requests: w.requests,
                    weight_responses: w.responses,
                    transitions: w.transitions,
                    kl_running_avg: w.tracker.running_avg,
                })
                .collect(),
            weight_bytes: self.weight_bytes,
            weight_response_size: weight_response_size(self.params.layout) as u64,
            mean_recent_return: self.metrics.mean_recent_return(),
            episodes: self.metrics.episodes().len(),
            max_behavior_gap: self.max_behavior_gap,
            last_update: self.last_update.clone(),
        }
    }

    /// Handles one message that arrived on `conn` at time `now`.
    pub fn handle(&mut self, conn: usize, msg: Message, now: u64) -> Result<Outbox> {
        self.now = now;
        let mut out = Vec::new();
        match msg {
            Message::Hello {
                worker_id,
                env_count,
            } => self.on_hello(conn, worker_id, env_count, &mut out)?,
            Message::Transition(t) => {
                let worker_id = self.registered(conn)?;
                if self.phase == Phase::Running {
                    self.on_transition(worker_id, t, &mut out)?;
                }
            }
            Message::WeightRequest => {
                let worker_id = self.registered(conn)?;
                self.on_weight_request(worker_id, &mut out)?;
            }
            other => {
                return Err(Error::Protocol(format!(
                    "head received unexpected {} on connection {conn}",
                    other.name()
                )))
            }
        }
        Ok(out)
    }

    fn registered(&self, conn: usize) -> Result<u32> {
        self.conn_worker.get(&conn).copied().ok_or_else(|| {
            Error::Protocol(format!("message from unknown worker on connection {conn}"))
        })
    }

    fn on_hello(
        &mut self,
        conn: usize,
        worker_id: u32,
        env_count: u32,
        out: &mut Outbox,
    ) -> Result<()> {
        if self.phase != Phase::Handshake {
            return Err(Error::Protocol(format!(
                "worker {worker_id} said Hello after startup"
            )));
        }
        if self.conn_worker.contains_key(&conn) {
            return Err(Error::Protocol(format!(
                "second Hello on connection {conn}"
            )));
        }
        if self.workers.contains_key(&worker_id) {
            return Err(Error::Protocol(format!("duplicate worker id {worker_id}")));
        }
        if env_count == 0 {
            return Err(Error::Protocol(format!(
                "worker {worker_id} announced zero environments"
            )));
        }
        self.conn_worker.insert(conn, worker_id);
        self.workers.insert(
            worker_id,
            WorkerSlot {
                conn,
                env_count,
                tracker: DivergenceTracker::new(worker_id, self.config.kl_decay)?,
                episode_returns: vec![0.0; env_count as usize],
                held_acks: 0,
                sent_version: self.params.version,
                requests: 0,
                responses: 0,
                transitions: 0,
            },
        );
        for e in 0..env_count {
            self.streams.insert((worker_id, e), VecDeque::new());
        }
        debug!("worker {worker_id} registered with {env_count} envs");
        if self.workers.len() == self.config.workers {
            info!(
                "all {} workers registered; starting collection",
                self.workers.len()
            );
            self.phase = Phase::Running;
            for slot in self.workers.values_mut() {
                slot.responses += 1;
                slot.sent_version = self.params.version;
                self.weight_bytes += weight_response_size(self.params.layout) as u64;
                out.push((slot.conn, Message::WeightResponse(self.params.clone())));
                out.push((slot.conn, Message::Reset));
            }
        }
        Ok(())
    }

    fn on_transition(&mut self, worker_id: u32, t: Transition, out: &mut Outbox) -> Result<()> {
        let layout = self.params.layout;
        let slot = self.workers.get_mut(&worker_id).expect("registered worker");
        if t.worker_id != worker_id {
            return Err(Error::Protocol(format!(
                "worker {worker_id} sent a transition labelled worker {}",
                t.worker_id
            )));
        }
        if t.env_index >= slot.env_count {
            return Err(Error::Protocol(format!(
                "worker {worker_id} sent env index {} of {}",
                t.env_index, slot.env_count
            )));
        }
        if t.obs.len() != layout.obs_dim || t.behavior_dist.len() != layout.action_count {
            return Err(Error::Protocol(format!(
                "worker {worker_id} sent a transition with the wrong shape"
            )));
        }
        if t.behavior_version != slot.sent_version {
            return Err(Error::Protocol(format!(
                "worker {worker_id} acted with version {} but last received version {}",
                t.behavior_version, slot.sent_version
            )));
        }

        let current = policy::forward(&self.params, &t.obs)?.dist;
        let kl = policy::kl_divergence(&t.behavior_dist, &current)?;
        let gap = t
            .behavior_dist
            .probs()
            .iter()
            .zip(current.probs())
            .map(|(b, c)| (b - c).abs())
            .fold(0.0, f64::max);
        self.max_behavior_gap = self.max_behavior_gap.max(gap);
        slot.tracker.record_divergence(kl)?;
        slot.transitions += 1;
        self.global_step += 1;

        let ret = &mut slot.episode_returns[t.env_index as usize];
        *ret += t.reward;
        if t.done() {
            let episode_return = std::mem::take(ret);
            self.metrics.record_episode(
                episode_return,
                worker_id,
                self.global_step,
                self.now,
                slot.tracker.sync_count,
                slot.tracker.running_avg,
                self.params.version,
            );
        }
        self.streams
            .get_mut(&(worker_id, t.env_index))
            .expect("stream registered with worker")
            .push_back(t);

        if self.rollout_ready() {
            self.update(out)?;
        }
        if self.global_step >= self.config.total_timesteps {
            self.finish(out);
            return Ok(());
        }
        if self.worker_full(worker_id) {
            self.workers.get_mut(&worker_id).unwrap().held_acks += 1;
        } else {
            self.ack(worker_id, 1, out)?;
        }
        Ok(())
    }

    fn ack(&self, worker_id: u32, count: usize, out: &mut Outbox) -> Result<()> {
        let slot = &self.workers[&worker_id];
        let stale = self
            .config
            .sync_rule
            .should_sync(&slot.tracker, self.params.version)?;
        for _ in 0..count {
            out.push((
                slot.conn,
                Message::Ack {
                    stale,
                    learner_version: self.params.version,
                },
            ));
        }
        Ok(())
    }

    fn on_weight_request(&mut self, worker_id: u32, out: &mut Outbox) -> Result<()> {
        let version = self.params.version;
        let size = weight_response_size(self.params.layout) as u64;
        let slot = self.workers.get_mut(&worker_id).expect("registered worker");
        slot.requests += 1;
        slot.tracker.mark_synced(version)?;
        slot.responses += 1;
        slot.sent_version = version;
        self.weight_bytes += size;
        debug!("worker {worker_id} pulled version {version}");
        out.push((slot.conn, Message::WeightResponse(self.params.clone())));
        Ok(())
    }

    fn rollout_len(&self) -> usize {
        self.config.ppo.steps_per_rollout
    }

    fn rollout_ready(&self) -> bool {
        let need = self.rollout_len() + 1;
        self.workers.len() == self.config.workers && self.streams.values().all(|q| q.len() >= need)
    }

    fn worker_full(&self, worker_id: u32) -> bool {
        let need = self.rollout_len() + 1;
        self.streams
            .range((worker_id, 0)..=(worker_id, u32::MAX))
            .all(|(_, q)| q.len() >= need)
    }

    fn update(&mut self, out: &mut Outbox) -> Result<()> {
        let steps = self.rollout_len();
        let mut batch = RolloutBatch::default();
        for (&(worker_id, env_index), queue) in self.streams.iter_mut() {
            let transitions: Vec<Transition> = queue.drain(..steps).collect();
            let bootstrap_value = policy::value(&self.params, &queue[0].obs)?;
            batch.streams.push(RolloutStream {
                worker_id,
                env_index,
                transitions,
                bootstrap_value,
            });
        }
        let (params, stats) = ppo_update(&self.params, &batch, &self.config.ppo, &mut self.rng)?;
        self.params = params;
        self.updates += 1;
        debug!(
            "update {} -> version {}: policy {:.4} value {:.4} entropy {:.4} kl {:.5}",
            self.updates,
            self.params.version,
            stats.policy_loss,
            stats.value_loss,
            stats.entropy,
            stats.behavior_kl
        );
        let total_syncs = self.workers.values().map(|w| w.tracker.sync_count).sum();
        self.metrics.record_update(
            self.global_step,
            self.now,
            total_syncs,
            stats.behavior_kl,
            self.params.version,
            stats.policy_loss,
            stats.value_loss,
            stats.entropy,
        );
        for (&id, slot) in &self.workers {
            self.metrics.record_worker(
                id,
                self.global_step,
                self.now,
                slot.tracker.sync_count,
                slot.tracker.running_avg,
                slot.sent_version,
            );
        }
        self.last_update = Some(stats);
        let held: Vec<(u32, usize)> = self
            .workers
            .iter_mut()
            .filter(|(_, s)| s.held_acks > 0)
            .map(|(&id, s)| (id, std::mem::take(&mut s.held_acks)))
            .collect();
        for (id, count) in held {
            self.ack(id, count, out)?;
        }
        Ok(())
    }

    fn finish(&mut self, out: &mut Outbox) {
        info!(
            "step budget reached at {} after {} updates; shutting down",
            self.global_step, self.updates
        );
        self.phase = Phase::Draining;
        for slot in self.workers.values_mut() {
            slot.held_acks = 0;
            out.push((slot.conn, Message::Shutdown));
        }
    }
}
