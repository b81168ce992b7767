use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AlgoError;
use crate::nn::{batch_input, forward, forward_graph, init_params, Adam, AdamConfig, Bound, Graph, NetworkSpec, ParameterSet, Scalar, Tensor};
use crate::render::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpgConfig {
    /// Standard deviation of the Gaussian exploration noise, in normalized action units.
    pub noise_sigma: f64,
    pub capacity: usize,
    pub batch: usize,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    /// Transitions collected with random actions before updates start.
    pub warmup: usize,
    pub updates_per_step: usize,
    pub adam: AdamConfig,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            capacity: 100_000,
            batch: 64,
            tau: 0.005,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            gamma: 0.99,
            warmup: 1000,
            updates_per_step: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        if self.capacity == 0 || self.batch == 0 {
            return Err(AlgoError::BadConfig("ddpg.capacity and ddpg.batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) || self.noise_sigma < 0.0 {
            return Err(AlgoError::BadConfig("ddpg.tau must lie in [0, 1] and noise_sigma be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Shared so frame-grab episodes store their single frame once.
    pub obs: Arc<Observation>,
    pub action: Vec<f64>,
    pub reward: f64,
    /// `None` for terminal transitions.
    pub next_obs: Option<Arc<Observation>>,
}

/// Fixed-capacity ring of transitions; the oldest entry is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: Vec::new(), head: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    /// Contents from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.head };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Uniform draw with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>, AlgoError> {
        if self.items.len() < n {
            return Err(AlgoError::BufferUnderflow { have: self.items.len(), need: n });
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

/// Deterministic action plus Gaussian noise, clamped to the normalized box.
pub fn exploration_action<R: Rng + ?Sized>(mean: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    mean.iter()
        .map(|m| {
            let e: f64 = StandardNormal.sample(rng);
            (m + sigma * e).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Online and target networks with their optimizers.
#[derive(Debug, Clone)]
pub struct DdpgNets<T> {
    pub actor_spec: NetworkSpec,
    pub critic_spec: NetworkSpec,
    pub actor: ParameterSet<T>,
    pub critic: ParameterSet<T>,
    pub actor_target: ParameterSet<T>,
    pub critic_target: ParameterSet<T>,
    pub actor_opt: Adam<T>,
    pub critic_opt: Adam<T>,
}

impl<T: Scalar> DdpgNets<T> {
    pub fn new<R: Rng + ?Sized>(
        actor_spec: NetworkSpec,
        critic_spec: NetworkSpec,
        adam: AdamConfig,
        rng: &mut R,
    ) -> Result<Self, AlgoError> {
        let actor: ParameterSet<T> = init_params(&actor_spec, rng)?;
        let critic: ParameterSet<T> = init_params(&critic_spec, rng)?;
        Ok(Self {
            actor_opt: Adam::new(adam, &actor),
            critic_opt: Adam::new(adam, &critic),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor_spec,
            critic_spec,
            actor,
            critic,
        })
    }

    pub fn act(&self, obs: &Observation) -> Result<Vec<f64>, AlgoError> {
        let x = batch_input::<T>(&self.actor_spec, &[obs])?;
        Ok(forward(&self.actor_spec, &self.actor, &x, None)?.mean[0].iter().map(|v| v.f64()).collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DdpgStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub q_mean: f64,
}

fn action_tensor<T: Scalar>(rows: &[&[f64]], dim: usize) -> Tensor<T> {
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::from_f64(vec![rows.len(), dim], &flat)
}

/// `r + gamma * Q'(s', mu'(s'))`, or `r` for terminal transitions.
pub fn td_targets<T: Scalar>(nets: &DdpgNets<T>, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>, AlgoError> {
    let mut y: Vec<f64> = batch.iter().map(|t| t.reward).collect();
    let live: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].next_obs.is_some()).collect();
    if !live.is_empty() {
        let next: Vec<&Observation> = live.iter().map(|&i| &**batch[i].next_obs.as_ref().unwrap()).collect();
        let xa = batch_input::<T>(&nets.actor_spec, &next)?;
        let mu = forward(&nets.actor_spec, &nets.actor_target, &xa, None)?.mean;
        let mu_rows: Vec<Vec<f64>> = mu.iter().map(|r| r.iter().map(|v| v.f64()).collect()).collect();
        let refs: Vec<&[f64]> = mu_rows.iter().map(|r| r.as_slice()).collect();
        let a = action_tensor::<T>(&refs, nets.critic_spec.action_dim);
        let xc = batch_input::<T>(&nets.critic_spec, &next)?;
        let q = forward(&nets.critic_spec, &nets.critic_target, &xc, Some(&a))?.value;
        for (k, &i) in live.iter().enumerate() {
            y[i] += gamma * q[k].f64();
        }
    }
    Ok(y)
}

/// One critic regression step, one actor ascent step on `Q(s, mu(s))`, then target blending.
pub fn ddpg_update<T: Scalar, R: Rng + ?Sized>(
    nets: &mut DdpgNets<T>,
    buffer: &ReplayBuffer,
    cfg: &DdpgConfig,
    rng: &mut R,
) -> Result<DdpgStats, AlgoError> {
    cfg.validate()?;
    let batch = buffer.sample(cfg.batch, rng)?;
    let n = batch.len();
    let y = td_targets(nets, &batch, cfg.gamma)?;
    let obs: Vec<&Observation> = batch.iter().map(|t| &*t.obs).collect();
    let dim = nets.critic_spec.action_dim;
    let acts: Vec<&[f64]> = batch.iter().map(|t| t.action.as_slice()).collect();

    // critic
    let xc = batch_input::<T>(&nets.critic_spec, &obs)?;
    let mut g = Graph::new();
    let bound = nets.critic.bind(&mut g);
    let x = g.constant(xc.clone());
    let a = g.constant(action_tensor::<T>(&acts, dim));
    let q = forward_graph(&nets.critic_spec, &nets.critic, &bound, &mut g, x, Some(a))?.value.unwrap();
    let q = g.reshape(q, vec![n]);
    let t = g.constant(Tensor::from_f64(vec![n], &y));
    let e = g.sub(q, t);
    let sq = g.square(e);
    let closs = g.mean(sq);
    let critic_loss = g.value(closs).data[0].f64();
    let q_mean = g.value(q).data.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
    if !critic_loss.is_finite() {
        return Err(AlgoError::NonFinite(format!("critic loss {critic_loss}")));
    }
    nets.critic.zero_grad();
    let gr = g.backward(closs);
    nets.critic.accumulate(&bound, &gr);
    nets.critic_opt.update(&mut nets.critic, cfg.critic_lr);

    // actor, with the critic held fixed
    let xa = batch_input::<T>(&nets.actor_spec, &obs)?;
    let mut g = Graph::new();
    let abound = nets.actor.bind(&mut g);
    let x = g.constant(xa);
    let mu = forward_graph(&nets.actor_spec, &nets.actor, &abound, &mut g, x, None)?.mean.unwrap();
    let cbound = Bound(nets.critic.values().iter().map(|v| g.constant(v.clone())).collect());
    let xc = g.constant(xc);
    let q = forward_graph(&nets.critic_spec, &nets.critic, &cbound, &mut g, xc, Some(mu))?.value.unwrap();
    let qm = g.mean(q);
    let aloss = g.scale(qm, -1.0);
    let actor_loss = g.value(aloss).data[0].f64();
    nets.actor.zero_grad();
    let gr = g.backward(aloss);
    nets.actor.accumulate(&abound, &gr);
    nets.actor_opt.update(&mut nets.actor, cfg.actor_lr);

    nets.critic_target.soft_update(&nets.critic, cfg.tau);
    nets.actor_target.soft_update(&nets.actor, cfg.tau);
    if !(nets.actor.is_finite() && nets.critic.is_finite()) {
        return Err(AlgoError::NonFinite("parameters after ddpg step".into()));
    }
    Ok(DdpgStats { critic_loss, actor_loss, q_mean })
}
