//! Worker node: runs a batch of environments with a cached copy of the
//! policy and reports every step to the head.
//!
//! The worker advances all of its environments in lockstep. After sending one
//! transition per environment it waits for the matching acknowledgements; if
//! any of them carried the stale flag it pulls weights before the next step.

use log::debug;

use crate::envs::{vec_reset, EnvKind, VecEnv};
use crate::error::{Error, Result};
use crate::policy;
use crate::rng::RngState;
use crate::types::{Observation, ParameterSet, Transition};

use super::wire::{decode_message, encode_message};
use super::{Endpoint, Message};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkerState {
    /// Hello sent; waiting for the startup weights.
    AwaitingInitialWeights,
    AwaitingReset,
    AwaitingAcks {
        remaining: u32,
        stale: bool,
    },
    AwaitingWeights,
    Finished,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkerReport {
    pub worker_id: u32,
    pub transitions_sent: u64,
    pub weight_requests_sent: u64,
    pub weight_responses_received: u64,
    pub final_version: u64,
}

pub struct WorkerNode {
    worker_id: u32,
    kind: EnvKind,
    env_count: u32,
    env_rng: RngState,
    action_rng: RngState,
    params: Option<ParameterSet>,
    envs: VecEnv,
    obs: Vec<Observation>,
    state: WorkerState,
    shutdown_pending: bool,
    report: WorkerReport,
}

impl WorkerNode {
    /// `rng` is this worker's own stream; environments and action sampling
    /// draw from two children of it.
    pub fn new(worker_id: u32, kind: EnvKind, env_count: u32, rng: &RngState) -> Result<Self> {
        if env_count == 0 {
            return Err(Error::Config("envs-per-worker: must be at least 1".into()));
        }
        Ok(Self {
            worker_id,
            kind,
            env_count,
            env_rng: rng.split(0),
            action_rng: rng.split(1),
            params: None,
            envs: VecEnv::default(),
            obs: Vec::new(),
            state: WorkerState::AwaitingInitialWeights,
            shutdown_pending: false,
            report: WorkerReport {
                worker_id,
                ..WorkerReport::default()
            },
        })
    }

    pub fn worker_id(&self) -> u32 {
        self.worker_id
    }

    pub fn state(&self) -> WorkerState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state == WorkerState::Finished
    }

    pub fn cached_version(&self) -> Option<u64> {
        self.params.as_ref().map(|p| p.version)
    }

    pub fn report(&self) -> &WorkerReport {
        &self.report
    }

    /// Opening frame.
    pub fn hello(&self) -> Message {
        Message::Hello {
            worker_id: self.worker_id,
            env_count: self.env_count,
        }
    }

    pub fn handle(&mut self, msg: Message) -> Result<Vec<Message>> {
        if self.state == WorkerState::Finished {
            return Err(Error::Protocol(format!(
                "worker {} received {} after shutdown",
                self.worker_id,
                msg.name()
            )));
        }
        match msg {
            Message::WeightResponse(params) => self.on_weights(params),
            Message::Reset => {
                let (envs, obs) = vec_reset(self.kind, self.env_count as usize, &self.env_rng)?;
                self.envs = envs;
                self.obs = obs;
                match self.state {
                    WorkerState::AwaitingReset => self.step_all(),
                    WorkerState::AwaitingInitialWeights => Err(Error::Protocol(format!(
                        "worker {} got Reset before its weights",
                        self.worker_id
                    ))),
                    _ => Ok(Vec::new()),
                }
            }
            Message::Ack { stale, .. } => match self.state {
                WorkerState::AwaitingAcks {
                    remaining,
                    stale: seen,
                } => {
                    let stale = stale || seen;
                    if remaining > 1 {
                        self.state = WorkerState::AwaitingAcks {
                            remaining: remaining - 1,
                            stale,
                        };
                        Ok(Vec::new())
                    } else if stale {
                        self.state = WorkerState::AwaitingWeights;
                        self.report.weight_requests_sent += 1;
                        Ok(vec![Message::WeightRequest])
                    } else {
                        self.step_all()
                    }
                }
                _ => Err(Error::Protocol(format!(
                    "worker {} got an unexpected Ack",
                    self.worker_id
                ))),
            },
            Message::Shutdown => {
                if self.state == WorkerState::AwaitingWeights {
                    // the head still answers the outstanding pull
                    self.shutdown_pending = true;
                } else {
                    self.state = WorkerState::Finished;
                }
                Ok(Vec::new())
            }
            other => Err(Error::Protocol(format!(
                "worker {} received unexpected {}",
                self.worker_id,
                other.name()
            ))),
        }
    }

    fn on_weights(&mut self, params: ParameterSet) -> Result<Vec<Message>> {
        if params.layout != self.kind.layout() {
            return Err(Error::Protocol(format!(
                "worker {} received weights for layout {:?}",
                self.worker_id, params.layout
            )));
        }
        if let Some(cached) = self.cached_version() {
            if params.version < cached {
                return Err(Error::Protocol(format!(
                    "worker {} received version {} older than cached {}",
                    self.worker_id, params.version, cached
                )));
            }
        }
        let next_state = match self.state {
            WorkerState::AwaitingInitialWeights => WorkerState::AwaitingReset,
            WorkerState::AwaitingWeights => WorkerState::AwaitingAcks {
                remaining: 0,
                stale: false,
            },
            _ => {
                return Err(Error::Protocol(format!(
                    "worker {} received unsolicited weights",
                    self.worker_id
                )))
            }
        };
        debug!(
            "worker {} now at version {}",
            self.worker_id, params.version
        );
        self.report.weight_responses_received += 1;
        self.report.final_version = params.version;
        self.params = Some(params);
        self.state = next_state;
        if self.shutdown_pending {
            self.state = WorkerState::Finished;
            return Ok(Vec::new());
        }
        match self.state {
            WorkerState::AwaitingAcks { .. } => self.step_all(),
            _ => Ok(Vec::new()),
        }
    }

    /// Acts in every environment with the cached policy and emits one
    /// transition per environment.
    fn step_all(&mut self) -> Result<Vec<Message>> {
        let params = self
            .params
            .as_ref()
            .ok_or_else(|| Error::Protocol("stepping without weights".into()))?;
        let mut actions = Vec::with_capacity(self.obs.len());
        let mut dists = Vec::with_capacity(self.obs.len());
        for obs in &self.obs {
            let dist = policy::forward(params, obs)?.dist;
            actions.push(policy::sample_action(&dist, &mut self.action_rng));
            dists.push(dist);
        }
        let results = self.envs.step(&actions)?;
        let version = params.version;
        let mut out = Vec::with_capacity(results.len());
        for (i, ((result, action), dist)) in results.into_iter().zip(actions).zip(dists).enumerate()
        {
            let obs = std::mem::replace(&mut self.obs[i], result.obs);
            out.push(Message::Transition(Transition {
                worker_id: self.worker_id,
                env_index: i as u32,
                obs,
                action,
                reward: result.reward,
                terminated: result.terminated,
                truncated: result.truncated,
                behavior_dist: dist,
                behavior_version: version,
            }));
        }
        self.report.transitions_sent += out.len() as u64;
        self.state = WorkerState::AwaitingAcks {
            remaining: self.env_count,
            stale: false,
        };
        Ok(out)
    }
}

/// Drives a worker over a blocking endpoint until the head shuts it down.
/// The caller has not yet sent Hello; this does.
pub fn worker_loop(endpoint: &mut impl Endpoint, mut node: WorkerNode) -> Result<WorkerReport> {
    endpoint.send(&encode_message(&node.hello())?)?;
    while !node.is_finished() {
        let frame = endpoint.recv()?;
        let msg = decode_message(&frame).map_err(|e| {
            Error::Protocol(format!(
                "worker {}: malformed frame from head: {e}",
                node.worker_id
            ))
        })?;
        for reply in node.handle(msg)? {
            endpoint.send(&encode_message(&reply)?)?;
        }
    }
    Ok(node.report.clone())
}
