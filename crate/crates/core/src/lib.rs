//! Distributed rollout collection with a centralized learner.
//!
//! Workers own vectorized environments and act with a locally cached copy of
//! the policy. The head owns the learner and the authoritative parameters; it
//! measures how far each worker's behavior policy has drifted from the current
//! learner policy and tells the worker to pull fresh weights once the running
//! average divergence crosses a threshold.
//!
//! Module map:
//!
//! - [`types`] / [`rng`]: shared values and the splittable RNG.
//! - [`envs`]: CartPole and GridWorld plus the auto-resetting batch wrapper.
//! - [`policy`]: softmax-linear policy, value head, KL divergence, gradients.
//! - [`learner`]: GAE and the clipped-surrogate PPO update.
//! - [`aaps`]: per-worker divergence tracking and the sync trigger.
//! - [`protocol`]: wire format, head/worker state machines, transports.
//! - [`metrics`]: run accounting and CSV output.
//! - [`cli`]: configuration, orchestration, threshold sweeps.

pub mod aaps;
pub mod cli;
pub mod envs;
pub mod error;
pub mod learner;
pub mod metrics;
pub mod policy;
pub mod protocol;
pub mod rng;
pub mod types;

pub use error::{Error, Result};
