use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::advantages::{compute_advantages, normalize_advantages, Rollout};
use super::schedule::LrSchedule;
use super::{policy_inputs, AlgoError};
use crate::nn::optim::clip_grad_norm;
use crate::nn::{forward_graph, Adam, AdamConfig, Graph, NetworkSpec, ParameterSet, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip: f64,
    /// Initial entropy coefficient (beta).
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub lr: LrSchedule,
    pub max_grad_norm: f64,
    pub adam: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            entropy_coef: 0.005,
            value_coef: 0.5,
            epochs: 3,
            minibatch: 32,
            gamma: 0.99,
            lambda: 0.95,
            lr: LrSchedule::default(),
            max_grad_norm: 0.5,
            adam: AdamConfig::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(AlgoError::BadConfig("ppo.clip must lie in (0, 1)".into()));
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err(AlgoError::BadConfig("ppo coefficients must be non-negative".into()));
        }
        if self.epochs == 0 || self.minibatch == 0 {
            return Err(AlgoError::BadConfig("ppo.epochs and ppo.minibatch must be positive".into()));
        }
        Ok(())
    }
}

/// `min(r * A, clip(r, 1 - eps, 1 + eps) * A)` for one sample.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub lr: f64,
    pub beta: f64,
}

/// Minibatch inputs for the clipped objective.
pub struct PpoBatch<'a> {
    pub rollout: &'a Rollout,
    pub indices: &'a [usize],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

struct LossParts {
    loss: f64,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    kl: f64,
    clipped: usize,
}

/// Records `-surrogate + c_v * value_mse - beta * entropy`, backpropagates it
/// into `params` gradients and returns the pieces.
fn ppo_loss_backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &mut ParameterSet<T>,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    beta: f64,
) -> Result<LossParts, AlgoError> {
    let n = batch.indices.len();
    let (input, actions) = policy_inputs::<T>(spec, batch.rollout, batch.indices)?;
    let pick = |v: &[f64]| Tensor::<T>::from_f64(vec![n], &batch.indices.iter().map(|&i| v[i]).collect::<Vec<_>>());

    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(input);
    let out = forward_graph(spec, params, &bound, &mut g, x, None)?;
    let (mean, log_std, value) = (out.mean.unwrap(), out.log_std.unwrap(), out.value.unwrap());
    let a = g.constant(actions);
    let lp = g.gaussian_log_prob(a, mean, log_std);
    let old = g.constant(pick(&batch.rollout.log_probs));
    let diff = g.sub(lp, old);
    let ratio = g.exp(diff);
    let adv = g.constant(pick(batch.advantages));
    let s1 = g.mul(ratio, adv);
    let rc = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let s2 = g.mul(rc, adv);
    let surr = g.minimum(s1, s2);
    let surr_mean = g.mean(surr);
    let policy_loss = g.scale(surr_mean, -1.0);

    let v = g.reshape(value, vec![n]);
    let ret = g.constant(pick(batch.returns));
    let verr = g.sub(v, ret);
    let vsq = g.square(verr);
    let value_loss = g.mean(vsq);
    let vterm = g.scale(value_loss, cfg.value_coef);

    let ent = g.gaussian_entropy(log_std);
    let eterm = g.scale(ent, -beta);
    let partial = g.add(policy_loss, vterm);
    let loss = g.add(partial, eterm);

    let loss_v = g.value(loss).data[0].f64();
    if !loss_v.is_finite() {
        return Err(AlgoError::NonFinite(format!("ppo loss is {loss_v}")));
    }
    let grads = g.backward(loss);
    params.accumulate(&bound, &grads);

    let ratios = g.value(ratio).data.iter().map(|r| r.f64());
    let diffs = g.value(diff).data.iter().map(|d| d.f64());
    // k3 estimator of KL(old || new): (r - 1) - ln r
    let kl = diffs.clone().map(|d| d.exp() - 1.0 - d).sum::<f64>() / n as f64;
    let clipped = ratios.filter(|r| (r - 1.0).abs() > cfg.clip).count();
    Ok(LossParts {
        loss: loss_v,
        policy_loss: g.value(policy_loss).data[0].f64(),
        value_loss: g.value(value_loss).data[0].f64(),
        entropy: g.value(ent).data[0].f64(),
        kl,
        clipped,
    })
}

/// Plain evaluation of the clipped loss (no parameter changes).
pub fn ppo_loss<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    batch: &PpoBatch,
    cfg: &PpoConfig,
    beta: f64,
) -> Result<f64, AlgoError> {
    let mut scratch = params.clone();
    Ok(ppo_loss_backward(spec, &mut scratch, batch, cfg, beta)?.loss)
}

/// `epochs` passes of shuffled minibatch Adam steps on the clipped objective.
pub fn ppo_update<T: Scalar, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    params: &mut ParameterSet<T>,
    adam: &mut Adam<T>,
    rollout: &Rollout,
    cfg: &PpoConfig,
    lr: f64,
    beta: f64,
    rng: &mut R,
) -> Result<UpdateStats, AlgoError> {
    cfg.validate()?;
    if rollout.is_empty() || !rollout.is_aligned() {
        return Err(AlgoError::EmptyBatch);
    }
    let (mut adv, returns) =
        compute_advantages(&rollout.rewards, &rollout.values, &rollout.dones, rollout.last_value, cfg.gamma, cfg.lambda);
    normalize_advantages(&mut adv);

    let mut order: Vec<usize> = (0..rollout.len()).collect();
    let mut stats = UpdateStats { lr, beta, ..UpdateStats::default() };
    let (mut batches, mut clipped, mut seen) = (0usize, 0usize, 0usize);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            params.zero_grad();
            let batch = PpoBatch { rollout, indices: chunk, advantages: &adv, returns: &returns };
            let parts = ppo_loss_backward(spec, params, &batch, cfg, beta)?;
            if cfg.max_grad_norm > 0.0 {
                clip_grad_norm(params, cfg.max_grad_norm);
            }
            adam.update(params, lr);
            if !params.is_finite() {
                return Err(AlgoError::NonFinite("parameters after ppo step".into()));
            }
            stats.policy_loss += parts.policy_loss;
            stats.value_loss += parts.value_loss;
            stats.entropy += parts.entropy;
            stats.kl += parts.kl;
            clipped += parts.clipped;
            seen += chunk.len();
            batches += 1;
        }
    }
    let b = batches as f64;
    stats.policy_loss /= b;
    stats.value_loss /= b;
    stats.entropy /= b;
    stats.kl /= b;
    stats.clip_fraction = clipped as f64 / seen as f64;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algos::{act_gaussian, bandit_observation};
    use crate::nn::{init_params, NetworkKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate(1.0, 1.0, 0.2), 1.0);
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    fn bandit_spec() -> NetworkSpec {
        NetworkSpec { head_init_scale: 1.0, ..NetworkSpec::mlp(NetworkKind::GaussianPolicy, 1, vec![], 1) }
    }

    fn bandit_params(start: f64) -> ParameterSet<f64> {
        let mut p: ParameterSet<f64> = init_params(&bandit_spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.get_mut("mean.w").unwrap().data[0] = 0.0;
        p.get_mut("mean.b").unwrap().data[0] = start;
        p
    }

    fn bandit_rollout(p: &ParameterSet<f64>, n: usize, rng: &mut ChaCha8Rng, reward: impl Fn(f64) -> f64) -> Rollout {
        let spec = bandit_spec();
        let mut r = Rollout::default();
        for _ in 0..n {
            let obs = bandit_observation();
            let s = act_gaussian(&spec, p, &obs, rng).unwrap();
            let rew = reward(s.action[0]);
            r.push(obs, s.action, s.log_prob, s.value, rew, true);
        }
        r
    }

    #[test]
    fn bandit_mean_converges_to_optimum() {
        let spec = bandit_spec();
        let mut p = bandit_params(0.8);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let cfg = PpoConfig { entropy_coef: 0.0, ..PpoConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let r = bandit_rollout(&p, 64, &mut rng, |a| -a * a);
            let s = ppo_update(&spec, &mut p, &mut adam, &r, &cfg, 0.01, 0.0, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&s.clip_fraction));
        }
        let mean = p.get("mean.b").unwrap().data[0] + p.get("mean.w").unwrap().data[0];
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn zero_advantages_leave_policy_mean_alone() {
        let spec = bandit_spec();
        let mut p = bandit_params(0.3);
        let before = (p.get("mean.w").unwrap().clone(), p.get("mean.b").unwrap().clone(), p.get("log_std").unwrap().clone());
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let cfg = PpoConfig { entropy_coef: 0.0, value_coef: 0.0, ..PpoConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // reward equal to the value estimate makes every advantage zero
        let mut r = bandit_rollout(&p, 40, &mut rng, |_| 0.0);
        r.rewards = r.values.clone();
        ppo_update(&spec, &mut p, &mut adam, &r, &cfg, 0.01, 0.0, &mut rng).unwrap();
        assert_eq!(p.get("mean.w").unwrap(), &before.0);
        assert_eq!(p.get("mean.b").unwrap(), &before.1);
        assert_eq!(p.get("log_std").unwrap(), &before.2);
    }

    #[test]
    fn ppo_loss_at_old_policy_is_minus_mean_advantage() {
        let spec = bandit_spec();
        let p = bandit_params(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = bandit_rollout(&p, 8, &mut rng, |a| a);
        let adv: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let idx: Vec<usize> = (0..8).collect();
        let cfg = PpoConfig { value_coef: 0.0, ..PpoConfig::default() };
        let batch = PpoBatch { rollout: &r, indices: &idx, advantages: &adv, returns: &r.values };
        let l = ppo_loss(&spec, &p, &batch, &cfg, 0.0).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn non_finite_rewards_abort() {
        let spec = bandit_spec();
        let mut p = bandit_params(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = bandit_rollout(&p, 8, &mut rng, |_| f64::NAN);
        let e = ppo_update(&spec, &mut p, &mut adam, &r, &PpoConfig::default(), 0.01, 0.0, &mut rng);
        assert!(matches!(e, Err(AlgoError::NonFinite(_))));
    }
}
