//! Shared value types: observations, action distributions, versioned
//! parameters, transitions.

use crate::error::{Error, Result};

/// Tolerance on the sum of an [`ActionDistribution`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Usage(format!("observation entry {v} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Categorical distribution over discrete actions. Entries are strictly
/// positive and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution(Vec<f64>);

impl ActionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Usage("empty action distribution".into()));
        }
        if let Some(p) = probs
            .iter()
            .find(|p| !(p.is_finite() && **p > 0.0 && **p <= 1.0))
        {
            return Err(Error::Usage(format!("probability {p} outside (0, 1]")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::Usage(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    /// Max-subtracted softmax. Entries that would underflow to zero are lifted
    /// to the smallest positive normal so the distribution stays strictly
    /// positive.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self(
            exps.into_iter()
                .map(|e| (e / total).max(f64::MIN_POSITIVE))
                .collect(),
        )
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().map(|p| p * p.ln()).sum::<f64>()
    }
}

/// Shape of the linear policy: `obs_dim` features plus a bias row mapped onto
/// `action_count` logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Layout {
    pub obs_dim: usize,
    pub action_count: usize,
}

impl Layout {
    pub fn new(obs_dim: usize, action_count: usize) -> Self {
        Self {
            obs_dim,
            action_count,
        }
    }

    /// Rows of the policy matrix, including the bias row.
    pub fn rows(&self) -> usize {
        self.obs_dim + 1
    }

    pub fn policy_len(&self) -> usize {
        self.rows() * self.action_count
    }

    pub fn value_len(&self) -> usize {
        self.obs_dim + 1
    }
}

/// Row-major offset of `(row, col)` in a policy matrix with the given layout.
pub fn flat_index(layout: &Layout, row: usize, col: usize) -> Result<usize> {
    if row >= layout.rows() || col >= layout.action_count {
        return Err(Error::Index {
            row,
            col,
            rows: layout.rows(),
            cols: layout.action_count,
        });
    }
    Ok(row * layout.action_count + col)
}

/// Versioned policy and value weights; the unit of synchronization.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub version: u64,
    pub layout: Layout,
    pub policy_weights: Vec<f64>,
    pub value_weights: Vec<f64>,
}

impl ParameterSet {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            version: 0,
            layout,
            policy_weights: vec![0.0; layout.policy_len()],
            value_weights: vec![0.0; layout.value_len()],
        }
    }

    pub fn new(
        version: u64,
        layout: Layout,
        policy_weights: Vec<f64>,
        value_weights: Vec<f64>,
    ) -> Result<Self> {
        let params = Self {
            version,
            layout,
            policy_weights,
            value_weights,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.policy_weights.len() != self.layout.policy_len() {
            return Err(Error::Usage(format!(
                "policy weights have {} entries, layout needs {}",
                self.policy_weights.len(),
                self.layout.policy_len()
            )));
        }
        if self.value_weights.len() != self.layout.value_len() {
            return Err(Error::Usage(format!(
                "value weights have {} entries, layout needs {}",
                self.value_weights.len(),
                self.layout.value_len()
            )));
        }
        Ok(())
    }

    /// Policy weights followed by value weights.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.policy_weights.len() + self.value_weights.len());
        flat.extend_from_slice(&self.policy_weights);
        flat.extend_from_slice(&self.value_weights);
        flat
    }

    pub fn unflatten(version: u64, layout: Layout, flat: &[f64]) -> Result<Self> {
        let split = layout.policy_len();
        if flat.len() != split + layout.value_len() {
            return Err(Error::Usage(format!(
                "flat vector has {} entries, layout needs {}",
                flat.len(),
                split + layout.value_len()
            )));
        }
        Ok(Self {
            version,
            layout,
            policy_weights: flat[..split].to_vec(),
            value_weights: flat[split..].to_vec(),
        })
    }

    pub fn policy_weight(&self, row: usize, col: usize) -> Result<f64> {
        Ok(self.policy_weights[flat_index(&self.layout, row, col)?])
    }
}

/// One environment step as seen by the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub worker_id: u32,
    pub env_index: u32,
    pub obs: Observation,
    pub action: u32,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub behavior_dist: ActionDistribution,
    pub behavior_version: u64,
}

impl Transition {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}
