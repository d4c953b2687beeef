//! Softmax-linear policy with a linear value head.
//!
//! Logits are `z[a] = sum_i W[i, a] * obs[i] + b[a]`, with the bias stored as
//! the last row of `W`. The value is `v . obs + c`, bias last.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::types::{ActionDistribution, Observation, ParameterSet};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub dist: ActionDistribution,
    pub logits: Vec<f64>,
    pub value: f64,
}

impl PolicyOutput {
    /// Log-probability of `action` from the logits via log-sum-exp.
    pub fn log_prob(&self, action: u32) -> Result<f64> {
        let a = action as usize;
        if a >= self.logits.len() {
            return Err(Error::Usage(format!(
                "action {action} out of range for {} actions",
                self.logits.len()
            )));
        }
        Ok(log_softmax(&self.logits)[a])
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn check_obs(params: &ParameterSet, obs: &Observation) -> Result<()> {
    if obs.len() != params.layout.obs_dim {
        return Err(Error::Usage(format!(
            "observation has {} entries, layout expects {}",
            obs.len(),
            params.layout.obs_dim
        )));
    }
    Ok(())
}

pub fn logits(params: &ParameterSet, obs: &Observation) -> Result<Vec<f64>> {
    check_obs(params, obs)?;
    let actions = params.layout.action_count;
    let w = &params.policy_weights;
    let bias_row = params.layout.obs_dim * actions;
    let mut z = w[bias_row..bias_row + actions].to_vec();
    for (i, x) in obs.as_slice().iter().enumerate() {
        let row = &w[i * actions..(i + 1) * actions];
        for (zj, wij) in z.iter_mut().zip(row) {
            *zj += wij * x;
        }
    }
    Ok(z)
}

pub fn value(params: &ParameterSet, obs: &Observation) -> Result<f64> {
    check_obs(params, obs)?;
    let v = &params.value_weights;
    let dot: f64 = obs.as_slice().iter().zip(v).map(|(x, w)| x * w).sum();
    Ok(dot + v[params.layout.obs_dim])
}

pub fn forward(params: &ParameterSet, obs: &Observation) -> Result<PolicyOutput> {
    let logits = logits(params, obs)?;
    Ok(PolicyOutput {
        dist: ActionDistribution::from_logits(&logits),
        value: value(params, obs)?,
        logits,
    })
}

/// Inverse-CDF lookup for a given uniform draw `u` in `[0, 1)`.
pub fn action_for_uniform(dist: &ActionDistribution, u: f64) -> u32 {
    let mut cumulative = 0.0;
    for (a, p) in dist.probs().iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return a as u32;
        }
    }
    // rounding left the total slightly below u
    (dist.len() - 1) as u32
}

pub fn sample_action(dist: &ActionDistribution, rng: &mut RngState) -> u32 {
    action_for_uniform(dist, rng.uniform())
}

/// `D_KL(p || q) = sum_a p[a] ln(p[a] / q[a])`. Both distributions are
/// strictly positive by construction, so every log is finite; the result is
/// clamped at zero against rounding.
pub fn kl_divergence(p: &ActionDistribution, q: &ActionDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Usage(format!(
            "KL between distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let sum: f64 = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&pa, &qa)| pa * (pa.ln() - qa.ln()))
        .sum();
    Ok(sum.max(0.0))
}

pub fn log_prob(dist: &ActionDistribution, action: u32) -> Result<f64> {
    dist.probs()
        .get(action as usize)
        .map(|p| p.ln())
        .ok_or_else(|| {
            Error::Usage(format!(
                "action {action} out of range for {} actions",
                dist.len()
            ))
        })
}

/// One sample for [`policy_gradients`]: the gradient of `weight * ln pi(action | obs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAction {
    pub obs: Observation,
    pub action: u32,
    pub weight: f64,
}

/// Accumulates `scale * d logits / d W` contracted with `logit_grad` into `grad`.
pub(crate) fn accumulate_logit_grad(
    grad: &mut [f64],
    obs: &Observation,
    logit_grad: &[f64],
    actions: usize,
) {
    let features = obs.as_slice().iter().copied().chain(std::iter::once(1.0));
    for (i, x) in features.enumerate() {
        if x == 0.0 {
            continue;
        }
        for (a, g) in logit_grad.iter().enumerate() {
            grad[i * actions + a] += x * g;
        }
    }
}

/// Analytic gradient of `sum_k weight_k * ln pi(action_k | obs_k)` with respect
/// to the flat policy weights.
pub fn policy_gradients(params: &ParameterSet, batch: &[WeightedAction]) -> Result<Vec<f64>> {
    let actions = params.layout.action_count;
    let mut grad = vec![0.0; params.layout.policy_len()];
    for sample in batch {
        if sample.action as usize >= actions {
            return Err(Error::Usage(format!(
                "action {} out of range",
                sample.action
            )));
        }
        let out = forward(params, &sample.obs)?;
        let logit_grad: Vec<f64> = out
            .dist
            .probs()
            .iter()
            .enumerate()
            .map(|(a, p)| sample.weight * (f64::from(a as u32 == sample.action) - p))
            .collect();
        accumulate_logit_grad(&mut grad, &sample.obs, &logit_grad, actions);
    }
    Ok(grad)
}

/// One sample for [`value_gradients`]: the gradient of `weight * (V(obs) - target)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTarget {
    pub obs: Observation,
    pub target: f64,
    pub weight: f64,
}

/// Analytic gradient of `sum_k weight_k * (V(obs_k) - target_k)^2` with respect
/// to the flat value weights.
pub fn value_gradients(params: &ParameterSet, batch: &[ValueTarget]) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.layout.value_len()];
    for sample in batch {
        let err = value(params, &sample.obs)? - sample.target;
        let scale = 2.0 * sample.weight * err;
        let features = sample
            .obs
            .as_slice()
            .iter()
            .copied()
            .chain(std::iter::once(1.0));
        for (g, x) in grad.iter_mut().zip(features) {
            *g += scale * x;
        }
    }
    Ok(grad)
}
