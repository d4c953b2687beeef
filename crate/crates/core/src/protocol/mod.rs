//! Head/worker wire protocol, the two node state machines, and the transports
//! that carry them.
//!
//! Both nodes are written as message-driven state machines: feed a decoded
//! [`Message`] in, get the messages to send back out. The simulated transport
//! pumps them from a single logical clock; the TCP transport wraps them in
//! blocking read/write loops.

pub mod head;
pub mod sim;
pub mod tcp;
pub mod wire;
pub mod worker;

use crate::types::{ParameterSet, Transition};

pub use head::{HeadConfig, HeadNode, HeadSummary};
pub use sim::{LatencyModel, SimNetwork};
pub use wire::{decode_message, encode_message, read_frame};
pub use worker::{worker_loop, WorkerNode};

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// First frame on a connection: worker identity and batch size.
    Hello {
        worker_id: u32,
        env_count: u32,
    },
    Reset,
    Transition(Transition),
    /// Reply to every transition. `stale` asks the worker to pull weights.
    Ack {
        stale: bool,
        learner_version: u64,
    },
    WeightRequest,
    WeightResponse(ParameterSet),
    Shutdown,
}

impl Message {
    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::Reset => "Reset",
            Message::Transition(_) => "Transition",
            Message::Ack { .. } => "Ack",
            Message::WeightRequest => "WeightRequest",
            Message::WeightResponse(_) => "WeightResponse",
            Message::Shutdown => "Shutdown",
        }
    }
}

/// Blocking, ordered, reliable frame channel between one worker and the head.
pub trait Endpoint {
    fn send(&mut self, frame: &[u8]) -> crate::Result<()>;
    /// Next complete frame; an error if the peer went away.
    fn recv(&mut self) -> crate::Result<Vec<u8>>;
}
