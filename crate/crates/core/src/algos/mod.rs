//! Policy-gradient and actor-critic updates over the network tape.

pub mod advantages;
pub mod ddpg;
pub mod ppo;
pub mod schedule;
pub mod trpo;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{batch_input, forward, gaussian_log_prob, gaussian_sample, NetworkSpec, NnError, ParameterSet, Scalar, Tensor};
use crate::render::Observation;

pub use advantages::{compute_advantages, normalize_advantages, Rollout};
pub use ddpg::{ddpg_update, exploration_action, DdpgConfig, DdpgNets, DdpgStats, ReplayBuffer, Transition};
pub use ppo::{clipped_surrogate, ppo_update, PpoConfig, UpdateStats};
pub use schedule::{beta_at, lr_schedule, LrKind, LrSchedule};
pub use trpo::{conjugate_gradient, trpo_update, TrpoConfig, TrpoStats};

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    BufferUnderflow { have: usize, need: usize },
    #[error("empty or misaligned rollout")]
    EmptyBatch,
    #[error("invalid algorithm config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Ppo,
    Trpo,
    Ddpg,
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ppo" => Ok(Self::Ppo),
            "trpo" => Ok(Self::Trpo),
            "ddpg" => Ok(Self::Ddpg),
            other => Err(format!("unknown algorithm {other:?}")),
        }
    }
}

/// One stochastic policy decision.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub action: Vec<f64>,
    pub mean: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

/// Samples from the Gaussian policy for one observation.
pub fn act_gaussian<T: Scalar, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    obs: &Observation,
    rng: &mut R,
) -> Result<PolicySample, AlgoError> {
    let x = batch_input::<T>(spec, &[obs])?;
    let out = forward(spec, params, &x, None)?;
    let mean: Vec<f64> = out.mean[0].iter().map(|v| v.f64()).collect();
    let log_std: Vec<f64> = out.log_std.iter().map(|v| v.f64()).collect();
    let action = gaussian_sample(&mean, &log_std, rng);
    let log_prob = gaussian_log_prob(&action, &mean, &log_std);
    let value = out.value[0].f64();
    if !(log_prob.is_finite() && value.is_finite()) {
        return Err(AlgoError::NonFinite("policy output".into()));
    }
    Ok(PolicySample { action, mean, log_prob, value })
}

/// Deterministic action: the Gaussian mean, or the actor output.
pub fn act_mean<T: Scalar>(spec: &NetworkSpec, params: &ParameterSet<T>, obs: &Observation) -> Result<Vec<f64>, AlgoError> {
    let x = batch_input::<T>(spec, &[obs])?;
    let out = forward(spec, params, &x, None)?;
    Ok(out.mean[0].iter().map(|v| v.f64()).collect())
}

/// State values for a batch of observations.
pub fn values<T: Scalar>(spec: &NetworkSpec, params: &ParameterSet<T>, obs: &[&Observation]) -> Result<Vec<f64>, AlgoError> {
    let x = batch_input::<T>(spec, obs)?;
    Ok(forward(spec, params, &x, None)?.value.iter().map(|v| v.f64()).collect())
}

/// Network input and action tensors for the selected rollout rows.
pub(crate) fn policy_inputs<T: Scalar>(
    spec: &NetworkSpec,
    rollout: &Rollout,
    indices: &[usize],
) -> Result<(Tensor<T>, Tensor<T>), AlgoError> {
    let obs: Vec<&Observation> = indices.iter().map(|&i| &rollout.obs[i]).collect();
    let input = batch_input::<T>(spec, &obs)?;
    let mut acts = Vec::with_capacity(indices.len() * spec.action_dim);
    for &i in indices {
        if rollout.actions[i].len() != spec.action_dim {
            return Err(AlgoError::Nn(NnError::ShapeMismatch(format!(
                "action of length {}, network expects {}",
                rollout.actions[i].len(),
                spec.action_dim
            ))));
        }
        acts.extend(&rollout.actions[i]);
    }
    Ok((input, Tensor::from_f64(vec![indices.len(), spec.action_dim], &acts)))
}

/// Single-input observation used by the one-dimensional bandit tests.
#[cfg(test)]
pub(crate) fn bandit_observation() -> Observation {
    Observation::vector(vec![1.0])
}
