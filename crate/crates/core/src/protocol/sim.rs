//! Deterministic in-process network driven by a single logical clock.
//!
//! Every connection links the head with one worker. A frame sent at time `t`
//! is delivered at `max(t + latency, previous delivery on the same direction)`,
//! so each direction of a connection stays FIFO while different connections
//! interleave. Ties are broken by send order.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use log::trace;

use crate::error::{Error, Result};
use crate::rng::RngState;

use super::head::{HeadNode, HeadSummary};
use super::wire::{decode_message, encode_message};
use super::worker::{WorkerNode, WorkerReport};
use super::Message;

/// Per-frame delay in simulated ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatencyModel {
    Fixed(u64),
    /// Uniform over the inclusive range.
    Uniform {
        min: u64,
        max: u64,
    },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Fixed(1)
    }
}

impl LatencyModel {
    fn sample(&self, rng: &mut RngState) -> u64 {
        match *self {
            LatencyModel::Fixed(d) => d,
            LatencyModel::Uniform { min, max } => min + rng.below(max - min + 1),
        }
    }
}

impl FromStr for LatencyModel {
    type Err = Error;

    /// `fixed:N` or `uniform:MIN:MAX`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "latency: expected fixed:N or uniform:MIN:MAX, got {s:?}"
            ))
        };
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts.as_slice() {
            ["fixed", n] => Ok(LatencyModel::Fixed(n.parse().map_err(|_| bad())?)),
            ["uniform", lo, hi] => {
                let min: u64 = lo.parse().map_err(|_| bad())?;
                let max: u64 = hi.parse().map_err(|_| bad())?;
                if min > max {
                    return Err(bad());
                }
                Ok(LatencyModel::Uniform { min, max })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for LatencyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatencyModel::Fixed(n) => write!(f, "fixed:{n}"),
            LatencyModel::Uniform { min, max } => write!(f, "uniform:{min}:{max}"),
        }
    }
}

/// Which end of a connection a frame is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Head,
    Worker,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub time: u64,
    pub conn: usize,
    pub to: Side,
    pub frame: Vec<u8>,
}

struct Link {
    latency: LatencyModel,
    rng: RngState,
    last_to_head: u64,
    last_to_worker: u64,
}

pub struct SimNetwork {
    rng: RngState,
    default_latency: LatencyModel,
    clock: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    in_flight: HashMap<u64, (usize, Side, Vec<u8>)>,
    links: Vec<Link>,
}

impl SimNetwork {
    pub fn new(seed: u64, latency: LatencyModel) -> Self {
        Self {
            rng: RngState::new(seed),
            default_latency: latency,
            clock: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            in_flight: HashMap::new(),
            links: Vec::new(),
        }
    }

    pub fn connect(&mut self) -> usize {
        self.connect_with(self.default_latency)
    }

    /// Opens a connection with its own latency model. Each link draws its
    /// delays from a separate stream.
    pub fn connect_with(&mut self, latency: LatencyModel) -> usize {
        let id = self.links.len();
        self.links.push(Link {
            latency,
            rng: self.rng.split(id as u64),
            last_to_head: 0,
            last_to_worker: 0,
        });
        id
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn send(&mut self, conn: usize, to: Side, frame: Vec<u8>) -> Result<()> {
        let now = self.clock;
        let link = self
            .links
            .get_mut(conn)
            .ok_or_else(|| Error::Transport(format!("no simulated connection {conn}")))?;
        let delay = link.latency.sample(&mut link.rng);
        let last = match to {
            Side::Head => &mut link.last_to_head,
            Side::Worker => &mut link.last_to_worker,
        };
        let time = (now + delay).max(*last);
        *last = time;
        let seq = self.seq;
        self.seq += 1;
        trace!(
            "t={now} conn {conn} -> {to:?} at {time} ({} bytes)",
            frame.len()
        );
        self.queue.push(Reverse((time, seq)));
        self.in_flight.insert(seq, (conn, to, frame));
        Ok(())
    }

    /// Pops the earliest pending frame and advances the clock to its time.
    pub fn next_delivery(&mut self) -> Option<Delivery> {
        let Reverse((time, seq)) = self.queue.pop()?;
        let (conn, to, frame) = self.in_flight.remove(&seq).expect("queued frame");
        self.clock = time;
        Some(Delivery {
            time,
            conn,
            to,
            frame,
        })
    }
}

/// A simulated network holding exactly one connection.
pub fn sim_transport(seed: u64, latency: LatencyModel) -> (SimNetwork, usize) {
    let mut net = SimNetwork::new(seed, latency);
    let conn = net.connect();
    (net, conn)
}

/// Frame counts observed on the wire during a simulated run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WireCounts {
    pub weight_requests_delivered: u64,
    pub weight_responses_delivered: u64,
    pub frames_delivered: u64,
    pub bytes_delivered: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub head: HeadSummary,
    pub workers: Vec<WorkerReport>,
    pub wire: WireCounts,
    pub final_tick: u64,
}

/// Runs a head and its workers to completion over `net`. Worker `i` talks on
/// connection `conns[i]`.
pub fn run_cluster(
    net: &mut SimNetwork,
    head: &mut HeadNode,
    workers: &mut [WorkerNode],
    conns: &[usize],
) -> Result<SimOutcome> {
    if workers.is_empty() {
        return Err(Error::Config(
            "workers: at least one worker is required".into(),
        ));
    }
    let mut by_conn = HashMap::new();
    for (i, &c) in conns.iter().enumerate() {
        by_conn.insert(c, i);
    }
    let mut wire = WireCounts::default();
    for (w, &conn) in workers.iter().zip(conns) {
        net.send(conn, Side::Head, encode_message(&w.hello())?)?;
    }
    while let Some(d) = net.next_delivery() {
        wire.frames_delivered += 1;
        wire.bytes_delivered += d.frame.len() as u64;
        let msg = decode_message(&d.frame)?;
        match d.to {
            Side::Head => {
                if msg == Message::WeightRequest {
                    wire.weight_requests_delivered += 1;
                }
                for (conn, reply) in head.handle(d.conn, msg, d.time)? {
                    net.send(conn, Side::Worker, encode_message(&reply)?)?;
                }
            }
            Side::Worker => {
                let idx = by_conn[&d.conn];
                let worker = &mut workers[idx];
                if worker.is_finished() {
                    // frames queued before the worker saw Shutdown
                    continue;
                }
                if matches!(msg, Message::WeightResponse(_)) {
                    wire.weight_responses_delivered += 1;
                }
                for reply in worker.handle(msg)? {
                    net.send(d.conn, Side::Head, encode_message(&reply)?)?;
                }
            }
        }
    }
    if !head.is_finished() {
        return Err(Error::Run(format!(
            "simulation stalled at step {} before the step budget",
            head.global_step()
        )));
    }
    if let Some(w) = workers.iter().find(|w| !w.is_finished()) {
        return Err(Error::Run(format!(
            "worker {} never shut down",
            w.worker_id()
        )));
    }
    Ok(SimOutcome {
        head: head.summary(),
        workers: workers.iter().map(|w| w.report().clone()).collect(),
        wire,
        final_tick: net.now(),
    })
}
