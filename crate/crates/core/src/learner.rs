//! Centralized PPO learner: generalized advantage estimation and the clipped
//! surrogate update with plain gradient descent.

use crate::error::{Error, Result};
use crate::policy::{self, accumulate_logit_grad, log_softmax};
use crate::rng::RngState;
use crate::types::{Observation, ParameterSet, Transition};

const ADV_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub learning_rate: f64,
    /// Transitions per (worker, env) stream in one rollout.
    pub steps_per_rollout: usize,
    pub minibatches: usize,
    pub update_epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            steps_per_rollout: 128,
            minibatches: 4,
            update_epochs: 4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

impl PpoConfig {
    /// The large-scale settings: 1024-step rollouts, 8 minibatches, 30 epochs.
    pub fn large_scale() -> Self {
        Self {
            steps_per_rollout: 1024,
            minibatches: 8,
            update_epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.gamma) {
            return Err(Error::Config(format!(
                "gamma: {} not in (0, 1]",
                self.gamma
            )));
        }
        if !in_unit(self.gae_lambda) {
            return Err(Error::Config(format!(
                "gae-lambda: {} not in (0, 1]",
                self.gae_lambda
            )));
        }
        if self.clip_epsilon.is_nan() || self.clip_epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "clip-eps: {} must be positive",
                self.clip_epsilon
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "lr: {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.steps_per_rollout == 0 {
            return Err(Error::Config(
                "steps-per-rollout: must be at least 1".into(),
            ));
        }
        if self.minibatches == 0 {
            return Err(Error::Config("minibatches: must be at least 1".into()));
        }
        if self.update_epochs == 0 {
            return Err(Error::Config("update-epochs: must be at least 1".into()));
        }
        if [self.value_coef, self.entropy_coef]
            .iter()
            .any(|c| c.is_nan() || *c < 0.0)
        {
            return Err(Error::Config(
                "loss coefficients must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Consecutive transitions from one `(worker, env)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStream {
    pub worker_id: u32,
    pub env_index: u32,
    pub transitions: Vec<Transition>,
    /// Value estimate of the observation that follows the last transition.
    pub bootstrap_value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub streams: Vec<RolloutStream>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.streams.iter().map(|s| s.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Right-to-left GAE over one stream. `values[t]` is `V(s_t)`; the value of the
/// state after the last step is `bootstrap_value`. A done flag cuts both the
/// bootstrap and the advantage recursion.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Usage(format!(
            "GAE inputs of unequal length: {} rewards, {} values, {} dones",
            n,
            values.len(),
            dones.len()
        )));
    }
    let mut advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        advantages[t] = next_adv;
        next_value = values[t];
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// A transition prepared for the surrogate loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub obs: Observation,
    pub action: u32,
    pub behavior_log_prob: f64,
    /// Normalized advantage.
    pub advantage: f64,
    pub value_target: f64,
}

/// Computes per-stream GAE with `params` as the value function, then
/// normalizes advantages across the whole rollout.
pub fn prepare_samples(
    params: &ParameterSet,
    batch: &RolloutBatch,
    config: &PpoConfig,
) -> Result<Vec<TrainingSample>> {
    let mut samples = Vec::with_capacity(batch.len());
    for stream in &batch.streams {
        let ts = &stream.transitions;
        let values = ts
            .iter()
            .map(|t| policy::value(params, &t.obs))
            .collect::<Result<Vec<_>>>()?;
        let rewards: Vec<f64> = ts.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = ts.iter().map(Transition::done).collect();
        let (adv, returns) = compute_gae(
            &rewards,
            &values,
            &dones,
            stream.bootstrap_value,
            config.gamma,
            config.gae_lambda,
        )?;
        for ((t, a), r) in ts.iter().zip(adv).zip(returns) {
            samples.push(TrainingSample {
                obs: t.obs.clone(),
                action: t.action,
                behavior_log_prob: policy::log_prob(&t.behavior_dist, t.action)?,
                advantage: a,
                value_target: r,
            });
        }
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = samples
        .iter()
        .map(|s| (s.advantage - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    for s in &mut samples {
        s.advantage = (s.advantage - mean) / (std + ADV_NORM_EPS);
    }
    Ok(samples)
}

/// Gradient of the mean minibatch loss plus the loss terms it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub policy_grad: Vec<f64>,
    pub value_grad: Vec<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Mean over `samples` of
/// `-min(r A, clip(r, 1-eps, 1+eps) A) + c_v (V - R)^2 - c_e H(pi)`
/// and its analytic gradient, with `r = pi(a|s) / pi_behavior(a|s)`.
pub fn surrogate_gradient(
    params: &ParameterSet,
    samples: &[TrainingSample],
    config: &PpoConfig,
) -> Result<LossGradient> {
    let layout = params.layout;
    let actions = layout.action_count;
    let mut out = LossGradient {
        policy_grad: vec![0.0; layout.policy_len()],
        value_grad: vec![0.0; layout.value_len()],
        policy_loss: 0.0,
        value_loss: 0.0,
        entropy: 0.0,
    };
    if samples.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / samples.len() as f64;
    let mut logit_grad = vec![0.0; actions];
    for s in samples {
        let z = policy::logits(params, &s.obs)?;
        let logp = log_softmax(&z);
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let a = s.action as usize;
        if a >= actions {
            return Err(Error::Usage(format!("action {} out of range", s.action)));
        }
        let ratio = (logp[a] - s.behavior_log_prob).exp();
        let unclipped = ratio * s.advantage;
        let clipped =
            ratio.clamp(1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon) * s.advantage;
        let entropy = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
        out.policy_loss -= unclipped.min(clipped) * scale;
        out.entropy += entropy * scale;

        let surrogate_active = unclipped <= clipped;
        for (k, g) in logit_grad.iter_mut().enumerate() {
            let onehot = f64::from(k == a);
            let mut d = 0.0;
            if surrogate_active {
                d -= s.advantage * ratio * (onehot - probs[k]);
            }
            d += config.entropy_coef * probs[k] * (logp[k] + entropy);
            *g = d * scale;
        }
        accumulate_logit_grad(&mut out.policy_grad, &s.obs, &logit_grad, actions);

        let err = policy::value(params, &s.obs)? - s.value_target;
        out.value_loss += err * err * scale;
        let vscale = 2.0 * config.value_coef * err * scale;
        let features = s.obs.as_slice().iter().copied().chain(std::iter::once(1.0));
        for (g, x) in out.value_grad.iter_mut().zip(features) {
            *g += vscale * x;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean `D_KL(behavior || updated)` over the rollout.
    pub behavior_kl: f64,
    pub samples: usize,
}

/// Mean `D_KL(behavior || params)` over every transition of the batch.
pub fn behavior_kl(params: &ParameterSet, batch: &RolloutBatch) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in batch.streams.iter().flat_map(|s| &s.transitions) {
        let dist = policy::forward(params, &t.obs)?.dist;
        total += policy::kl_divergence(&t.behavior_dist, &dist)?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

fn check_batch(params: &ParameterSet, batch: &RolloutBatch, config: &PpoConfig) -> Result<()> {
    if batch.streams.is_empty() {
        return Err(Error::Usage("empty rollout batch".into()));
    }
    for s in &batch.streams {
        if s.transitions.len() != config.steps_per_rollout {
            return Err(Error::Usage(format!(
                "stream ({}, {}) holds {} transitions, rollout needs {}",
                s.worker_id,
                s.env_index,
                s.transitions.len(),
                config.steps_per_rollout
            )));
        }
        for t in &s.transitions {
            if t.behavior_version > params.version {
                return Err(Error::Usage(format!(
                    "transition from version {} newer than learner version {}",
                    t.behavior_version, params.version
                )));
            }
            if t.behavior_dist.len() != params.layout.action_count {
                return Err(Error::Usage(
                    "behavior distribution has wrong length".into(),
                ));
            }
        }
    }
    if !batch.len().is_multiple_of(config.minibatches) {
        return Err(Error::Usage(format!(
            "{} minibatches do not divide a rollout of {}",
            config.minibatches,
            batch.len()
        )));
    }
    Ok(())
}

/// Runs `update_epochs` passes of shuffled minibatch gradient descent on the
/// clipped surrogate. The returned parameters carry `version + 1`.
pub fn ppo_update(
    params: &ParameterSet,
    batch: &RolloutBatch,
    config: &PpoConfig,
    rng: &mut RngState,
) -> Result<(ParameterSet, UpdateStats)> {
    config.validate()?;
    params.validate()?;
    check_batch(params, batch, config)?;

    let samples = prepare_samples(params, batch, config)?;
    let mb_size = samples.len() / config.minibatches;
    let mut next = params.clone();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = UpdateStats {
        samples: samples.len(),
        ..UpdateStats::default()
    };
    let passes = (config.update_epochs * config.minibatches) as f64;
    let mut minibatch = Vec::with_capacity(mb_size);
    for _ in 0..config.update_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(mb_size) {
            minibatch.clear();
            minibatch.extend(chunk.iter().map(|&i| samples[i].clone()));
            let grad = surrogate_gradient(&next, &minibatch, config)?;
            for (w, g) in next.policy_weights.iter_mut().zip(&grad.policy_grad) {
                *w -= config.learning_rate * g;
            }
            for (w, g) in next.value_weights.iter_mut().zip(&grad.value_grad) {
                *w -= config.learning_rate * g;
            }
            stats.policy_loss += grad.policy_loss / passes;
            stats.value_loss += grad.value_loss / passes;
            stats.entropy += grad.entropy / passes;
        }
    }
    next.version = params.version + 1;
    stats.behavior_kl = behavior_kl(&next, batch)?;
    Ok((next, stats))
}
