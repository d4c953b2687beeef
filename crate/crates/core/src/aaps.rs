//! Divergence accounting and the weight-pull trigger.
//!
//! The head keeps one [`DivergenceTracker`] per worker. Every transition the
//! worker reports contributes one KL sample, `D_KL(behavior || learner)`
//! evaluated at the transition's observation, to an exponential moving
//! average. Once that average exceeds the threshold and the learner has moved
//! past the worker's weights, the worker is told to pull.

use crate::error::{Error, Result};

pub const DEFAULT_DECAY: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceTracker {
    pub worker_id: u32,
    pub running_avg: f64,
    pub sample_count: u64,
    pub decay: f64,
    pub last_synced_version: u64,
    pub sync_count: u64,
}

impl DivergenceTracker {
    pub fn new(worker_id: u32, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("kl-decay: {decay} not in (0, 1)")));
        }
        Ok(Self {
            worker_id,
            running_avg: 0.0,
            sample_count: 0,
            decay,
            last_synced_version: 0,
            sync_count: 0,
        })
    }

    pub fn record_divergence(&mut self, kl_sample: f64) -> Result<()> {
        if !(kl_sample.is_finite() && kl_sample >= 0.0) {
            return Err(Error::Usage(format!(
                "KL sample {kl_sample} must be finite and non-negative"
            )));
        }
        self.running_avg = self.decay * self.running_avg + (1.0 - self.decay) * kl_sample;
        self.sample_count += 1;
        Ok(())
    }

    /// True iff the average exceeds `kl_threshold` and the worker's weights
    /// are older than `learner_version`.
    pub fn should_sync(&self, kl_threshold: f64, learner_version: u64) -> Result<bool> {
        check_threshold(kl_threshold)?;
        Ok(self.running_avg > kl_threshold && self.is_stale(learner_version))
    }

    pub fn is_stale(&self, learner_version: u64) -> bool {
        self.last_synced_version < learner_version
    }

    pub fn mark_synced(&mut self, new_version: u64) -> Result<()> {
        if new_version < self.last_synced_version {
            return Err(Error::Protocol(format!(
                "worker {} sync to version {new_version} after version {}",
                self.worker_id, self.last_synced_version
            )));
        }
        self.running_avg = 0.0;
        self.last_synced_version = new_version;
        self.sync_count += 1;
        Ok(())
    }
}

pub fn check_threshold(kl_threshold: f64) -> Result<()> {
    if kl_threshold > 0.0 && !kl_threshold.is_nan() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "kl-threshold: {kl_threshold} must be positive"
        )))
    }
}

/// When the head flags a worker as stale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyncRule {
    /// Running-average KL above the threshold.
    Divergence { kl_threshold: f64 },
    /// Any learner update makes every worker stale immediately; the
    /// zero-staleness limit of an arbitrarily small threshold.
    EveryUpdate,
}

impl SyncRule {
    pub fn divergence(kl_threshold: f64) -> Result<Self> {
        check_threshold(kl_threshold)?;
        Ok(SyncRule::Divergence { kl_threshold })
    }

    pub fn should_sync(&self, tracker: &DivergenceTracker, learner_version: u64) -> Result<bool> {
        match *self {
            SyncRule::Divergence { kl_threshold } => {
                tracker.should_sync(kl_threshold, learner_version)
            }
            SyncRule::EveryUpdate => Ok(tracker.is_stale(learner_version)),
        }
    }
}

/// Replays `(kl_sample, learner_version)` events against one tracker and
/// returns its final sync count. A pull is taken immediately whenever the
/// trigger fires, which is how the head and worker behave when the worker
/// answers every stale flag.
pub fn replay_sync_count(events: &[(f64, u64)], kl_threshold: f64, decay: f64) -> Result<u64> {
    let mut tracker = DivergenceTracker::new(0, decay)?;
    for &(sample, version) in events {
        tracker.record_divergence(sample)?;
        if tracker.should_sync(kl_threshold, version)? {
            tracker.mark_synced(version)?;
        }
    }
    Ok(tracker.sync_count)
}
