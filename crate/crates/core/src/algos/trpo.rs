use serde::{Deserialize, Serialize};

use super::advantages::{compute_advantages, normalize_advantages, Rollout};
use super::{policy_inputs, AlgoError};
use crate::nn::{forward, forward_graph, Graph, NetworkSpec, ParameterSet, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrpoConfig {
    /// Trust-region radius on the mean KL divergence.
    pub max_kl: f64,
    pub cg_iters: usize,
    pub damping: f64,
    pub backtrack_coef: f64,
    pub backtrack_steps: usize,
    pub value_lr: f64,
    pub value_iters: usize,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        Self {
            max_kl: 0.01,
            cg_iters: 10,
            damping: 0.1,
            backtrack_coef: 0.5,
            backtrack_steps: 10,
            value_lr: 0.01,
            value_iters: 20,
            gamma: 0.99,
            lambda: 0.95,
        }
    }
}

impl TrpoConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        if !(self.max_kl > 0.0) || self.damping < 0.0 {
            return Err(AlgoError::BadConfig("trpo.max_kl must be positive and damping non-negative".into()));
        }
        if !(self.backtrack_coef > 0.0 && self.backtrack_coef < 1.0) {
            return Err(AlgoError::BadConfig("trpo.backtrack_coef must lie in (0, 1)".into()));
        }
        if self.cg_iters == 0 {
            return Err(AlgoError::BadConfig("trpo.cg_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrpoStats {
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub kl: f64,
    /// Fraction of the full natural step that was applied (0 when rejected).
    pub step_fraction: f64,
    pub line_search_failed: bool,
    /// Rejected trial steps before acceptance or failure.
    pub backtracks: usize,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Solves `A x = b` for symmetric positive definite `A` given as a product.
pub fn conjugate_gradient(mut apply: impl FnMut(&[f64]) -> Vec<f64>, b: &[f64], iters: usize, tol: f64) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    for _ in 0..iters {
        if rr <= tol {
            break;
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn is_value_param(name: &str) -> bool {
    name.starts_with("value.")
}

/// Parameter indices that shape the action distribution.
fn policy_mask<T: Scalar>(params: &ParameterSet<T>) -> Vec<usize> {
    (0..params.len()).filter(|&i| !is_value_param(&params.names()[i])).collect()
}

fn gather<T: Scalar>(ts: &[Tensor<T>], mask: &[usize]) -> Vec<f64> {
    mask.iter().flat_map(|&i| ts[i].data.iter().map(|v| v.f64())).collect()
}

fn scatter_add<T: Scalar>(params: &mut ParameterSet<T>, mask: &[usize], delta: &[f64]) {
    let mut off = 0;
    for &i in mask {
        let t = &mut params.values_mut()[i];
        for v in t.data.iter_mut() {
            *v += T::c(delta[off]);
            off += 1;
        }
    }
}

/// Policy graph at the current parameters, shared by the gradient and the Fisher products.
struct PolicyGraph<T> {
    g: Graph<T>,
    bound: Vec<crate::nn::Var>,
    mean: crate::nn::Var,
    log_std: crate::nn::Var,
    surrogate: crate::nn::Var,
    batch: usize,
}

fn build_policy_graph<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    input: Tensor<T>,
    actions: Tensor<T>,
    old_log_probs: &[f64],
    adv: &[f64],
) -> Result<PolicyGraph<T>, AlgoError> {
    let n = adv.len();
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(input);
    let out = forward_graph(spec, params, &bound, &mut g, x, None)?;
    let (mean, log_std) = (out.mean.unwrap(), out.log_std.unwrap());
    let a = g.constant(actions);
    let lp = g.gaussian_log_prob(a, mean, log_std);
    let old = g.constant(Tensor::from_f64(vec![n], old_log_probs));
    let d = g.sub(lp, old);
    let ratio = g.exp(d);
    let at = g.constant(Tensor::from_f64(vec![n], adv));
    let s = g.mul(ratio, at);
    let surrogate = g.mean(s);
    Ok(PolicyGraph { g, bound: bound.0, mean, log_std, surrogate, batch: n })
}

impl<T: Scalar> PolicyGraph<T> {
    /// Product of the mean-KL Hessian at the current policy with `v` (policy coordinates).
    fn fisher_vector(&self, params: &ParameterSet<T>, mask: &[usize], v: &[f64]) -> Vec<f64> {
        let mut off = 0;
        let tangents: Vec<(crate::nn::Var, Tensor<T>)> = mask
            .iter()
            .map(|&i| {
                let t = &params.values()[i];
                off += t.len();
                (self.bound[i], Tensor::from_f64(t.shape.clone(), &v[off - t.len()..off]))
            })
            .collect();
        let tan = self.g.jvp(&tangents);
        let ls = self.g.value(self.log_std).to_f64();
        let dim = ls.len();
        let inv_var: Vec<f64> = ls.iter().map(|l| (-2.0 * l).exp()).collect();
        let mean_like = self.g.value(self.mean);
        let jm = tan.get_or_zeros(self.mean, mean_like).to_f64();
        let seed_mean: Vec<f64> =
            jm.iter().enumerate().map(|(k, d)| d * inv_var[k % dim] / self.batch as f64).collect();
        let jl = tan.get_or_zeros(self.log_std, self.g.value(self.log_std)).to_f64();
        let seed_ls: Vec<f64> = jl.iter().map(|d| 2.0 * d).collect();
        let grads = self.g.backward_with(&[
            (self.mean, Tensor::from_f64(mean_like.shape.clone(), &seed_mean)),
            (self.log_std, Tensor::from_f64(vec![dim], &seed_ls)),
        ]);
        mask.iter()
            .flat_map(|&i| grads.get_or_zeros(self.bound[i], &params.values()[i]).to_f64())
            .collect()
    }
}

/// Surrogate `mean(r * A)` and mean `KL(old || new)` under `params`.
fn evaluate<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    input: &Tensor<T>,
    actions: &[Vec<f64>],
    old_log_probs: &[f64],
    adv: &[f64],
    old_mean: &[Vec<f64>],
    old_log_std: &[f64],
) -> Result<(f64, f64), AlgoError> {
    let out = forward(spec, params, input, None)?;
    let ls: Vec<f64> = out.log_std.iter().map(|v| v.f64()).collect();
    let n = adv.len() as f64;
    let (mut surr, mut kl) = (0.0, 0.0);
    for (i, row) in out.mean.iter().enumerate() {
        let m: Vec<f64> = row.iter().map(|v| v.f64()).collect();
        let lp = crate::nn::gaussian_log_prob(&actions[i], &m, &ls);
        surr += (lp - old_log_probs[i]).exp() * adv[i];
        kl += crate::nn::gaussian_kl(&old_mean[i], old_log_std, &m, &ls);
    }
    Ok((surr / n, kl / n))
}

/// Natural-gradient step inside the KL trust region, then a value-head fit.
pub fn trpo_update<T: Scalar>(
    spec: &NetworkSpec,
    params: &mut ParameterSet<T>,
    rollout: &Rollout,
    cfg: &TrpoConfig,
) -> Result<TrpoStats, AlgoError> {
    cfg.validate()?;
    if rollout.is_empty() || !rollout.is_aligned() {
        return Err(AlgoError::EmptyBatch);
    }
    let (mut adv, returns) =
        compute_advantages(&rollout.rewards, &rollout.values, &rollout.dones, rollout.last_value, cfg.gamma, cfg.lambda);
    if adv.iter().any(|a| !a.is_finite()) {
        return Err(AlgoError::NonFinite("advantages".into()));
    }
    normalize_advantages(&mut adv);
    let idx: Vec<usize> = (0..rollout.len()).collect();
    let (input, actions) = policy_inputs::<T>(spec, rollout, &idx)?;

    let old = forward(spec, params, &input, None)?;
    let old_mean: Vec<Vec<f64>> = old.mean.iter().map(|r| r.iter().map(|v| v.f64()).collect()).collect();
    let old_log_std: Vec<f64> = old.log_std.iter().map(|v| v.f64()).collect();
    let entropy = crate::nn::gaussian_entropy(&old_log_std);

    let mask = policy_mask(params);
    let pg = build_policy_graph(spec, params, input.clone(), actions, &rollout.log_probs, &adv)?;
    let surr0 = pg.g.value(pg.surrogate).data[0].f64();
    let grads = pg.g.backward(pg.surrogate);
    let grad: Vec<f64> =
        mask.iter().flat_map(|&i| grads.get_or_zeros(pg.bound[i], &params.values()[i]).to_f64()).collect();
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(AlgoError::NonFinite("policy gradient".into()));
    }

    let damped = |v: &[f64]| -> Vec<f64> {
        let fv = pg.fisher_vector(params, &mask, v);
        fv.iter().zip(v).map(|(f, x)| f + cfg.damping * x).collect()
    };
    let dir = conjugate_gradient(damped, &grad, cfg.cg_iters, 1e-10);
    let shs = dot(&dir, &pg.fisher_vector(params, &mask, &dir)) + cfg.damping * dot(&dir, &dir);

    let mut stats = TrpoStats { surrogate_before: surr0, surrogate_after: surr0, entropy, ..TrpoStats::default() };
    let base = gather(params.values(), &mask);
    let mut accepted = false;
    if shs > 0.0 && shs.is_finite() {
        let full: Vec<f64> = dir.iter().map(|d| d * (2.0 * cfg.max_kl / shs).sqrt()).collect();
        let mut frac = 1.0;
        for _ in 0..=cfg.backtrack_steps {
            let step: Vec<f64> = full.iter().map(|s| s * frac).collect();
            scatter_add(params, &mask, &step);
            let (surr, kl) =
                evaluate(spec, params, &input, &rollout.actions, &rollout.log_probs, &adv, &old_mean, &old_log_std)?;
            if surr.is_finite() && kl.is_finite() && surr > surr0 && kl <= cfg.max_kl {
                stats.surrogate_after = surr;
                stats.kl = kl;
                stats.step_fraction = frac;
                accepted = true;
                break;
            }
            restore(params, &mask, &base);
            stats.backtracks += 1;
            frac *= cfg.backtrack_coef;
        }
    }
    stats.line_search_failed = !accepted && grad.iter().any(|&g| g != 0.0);
    stats.value_loss = fit_value_head(spec, params, &input, &returns, cfg)?;
    if !params.is_finite() {
        return Err(AlgoError::NonFinite("parameters after trpo step".into()));
    }
    Ok(stats)
}

fn restore<T: Scalar>(params: &mut ParameterSet<T>, mask: &[usize], flat: &[f64]) {
    let mut off = 0;
    for &i in mask {
        for v in params.values_mut()[i].data.iter_mut() {
            *v = T::c(flat[off]);
            off += 1;
        }
    }
}

/// Full-batch gradient descent on the value MSE, touching only the value head.
fn fit_value_head<T: Scalar>(
    spec: &NetworkSpec,
    params: &mut ParameterSet<T>,
    input: &Tensor<T>,
    returns: &[f64],
    cfg: &TrpoConfig,
) -> Result<f64, AlgoError> {
    let n = returns.len();
    let head: Vec<usize> = (0..params.len()).filter(|&i| is_value_param(&params.names()[i])).collect();
    let mut loss = 0.0;
    // the trunk is fixed here, so its features are computed once
    let feats = {
        let mut g = Graph::new();
        let bound = crate::nn::Bound(params.values().iter().map(|t| g.constant(t.clone())).collect());
        let x = g.constant(input.clone());
        let out = forward_graph(spec, params, &bound, &mut g, x, None)?;
        g.value(out.features).clone()
    };
    let target = Tensor::<T>::from_f64(vec![n], returns);
    for it in 0..=cfg.value_iters {
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let w = g.param(params.get("value.w").unwrap().clone());
        let b = g.param(params.get("value.b").unwrap().clone());
        let v = g.dense(f, w, b);
        let v = g.reshape(v, vec![n]);
        let t = g.constant(target.clone());
        let e = g.sub(v, t);
        let sq = g.square(e);
        let l = g.mean(sq);
        loss = g.value(l).data[0].f64();
        if it == cfg.value_iters {
            break;
        }
        let gr = g.backward(l);
        for (&i, var) in head.iter().zip([w, b]) {
            let d = gr.get_or_zeros(var, &params.values()[i]);
            let lr = T::c(cfg.value_lr);
            for (p, gv) in params.values_mut()[i].data.iter_mut().zip(&d.data) {
                *p -= lr * *gv;
            }
        }
    }
    if !loss.is_finite() {
        return Err(AlgoError::NonFinite("value loss".into()));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algos::{act_gaussian, bandit_observation};
    use crate::nn::{init_params, NetworkKind};
    use crate::render::Observation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cg_identity_and_spd() {
        let b = [1.0, -2.0, 0.5];
        let x = conjugate_gradient(|v| v.to_vec(), &b, 10, 1e-14);
        assert_eq!(x, b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 6;
        let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // A = M^T M + I
        let a: Vec<f64> = (0..n * n)
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum::<f64>() + if i == j { 1.0 } else { 0.0 }
            })
            .collect();
        let apply = |v: &[f64]| (0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect::<Vec<f64>>();
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
        let x = conjugate_gradient(apply, &b, n, 1e-20);
        let ax = apply(&x);
        for i in 0..n {
            assert!((ax[i] - b[i]).abs() < 1e-9);
        }
    }

    fn small_setup(seed: u64) -> (NetworkSpec, ParameterSet<f64>, Rollout) {
        let spec = NetworkSpec::mlp(NetworkKind::GaussianPolicy, 2, vec![3], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: ParameterSet<f64> = init_params(&spec, &mut rng).unwrap();
        p.get_mut("log_std").unwrap().data = vec![-0.3, 0.2];
        let mut r = Rollout::default();
        for _ in 0..5 {
            let obs = Observation::vector(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let s = act_gaussian(&spec, &p, &obs, &mut rng).unwrap();
            r.push(obs, s.action, s.log_prob, s.value, rng.random_range(-1.0..1.0), true);
        }
        (spec, p, r)
    }

    fn kl_grad(spec: &NetworkSpec, p: &ParameterSet<f64>, r: &Rollout, old: &ParameterSet<f64>, mask: &[usize]) -> Vec<f64> {
        let idx: Vec<usize> = (0..r.len()).collect();
        let (input, _) = policy_inputs::<f64>(spec, r, &idx).unwrap();
        let o = forward(spec, old, &input, None).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let x = g.constant(input);
        let out = forward_graph(spec, p, &bound, &mut g, x, None).unwrap();
        let om: Vec<f64> = o.mean.concat();
        let mo = g.constant(Tensor::from_f64(vec![r.len(), 2], &om));
        let lo = g.constant(Tensor::from_f64(vec![2], &o.log_std));
        let kl = g.gaussian_kl(mo, lo, out.mean.unwrap(), out.log_std.unwrap());
        let m = g.mean(kl);
        let gr = g.backward(m);
        mask.iter().flat_map(|&i| gr.get_or_zeros(bound.0[i], &p.values()[i]).data).collect()
    }

    #[test]
    fn fisher_product_matches_differenced_kl_gradient() {
        for seed in 0..5 {
            let (spec, p, r) = small_setup(seed);
            let mask = policy_mask(&p);
            let idx: Vec<usize> = (0..r.len()).collect();
            let (input, actions) = policy_inputs::<f64>(&spec, &r, &idx).unwrap();
            let pg = build_policy_graph(&spec, &p, input, actions, &r.log_probs, &r.rewards).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n: usize = mask.iter().map(|&i| p.values()[i].len()).sum();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fv = pg.fisher_vector(&p, &mask, &v);
            let h = 1e-5;
            let mut plus = p.clone();
            scatter_add(&mut plus, &mask, &v.iter().map(|x| x * h).collect::<Vec<_>>());
            let mut minus = p.clone();
            scatter_add(&mut minus, &mask, &v.iter().map(|x| -x * h).collect::<Vec<_>>());
            let gp = kl_grad(&spec, &plus, &r, &p, &mask);
            let gm = kl_grad(&spec, &minus, &r, &p, &mask);
            let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let num: f64 = fv.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            assert!(num / den < 1e-5, "seed {seed}: rel {}", num / den);
        }
    }

    #[test]
    fn zero_advantages_give_zero_step() {
        let (spec, mut p, mut r) = small_setup(7);
        r.rewards = r.values.clone();
        let before = p.clone();
        let s = trpo_update(&spec, &mut p, &r, &TrpoConfig::default()).unwrap();
        assert_eq!(s.step_fraction, 0.0);
        assert!(!s.line_search_failed);
        for &i in &policy_mask(&p) {
            assert_eq!(p.values()[i], before.values()[i]);
        }
    }

    #[test]
    fn oversized_step_backtracks() {
        // a single log-std parameter matters (zero input); shrinking the std makes the true KL
        // exceed its quadratic model at the trust-region boundary
        let spec = NetworkSpec { head_init_scale: 1.0, ..NetworkSpec::mlp(NetworkKind::GaussianPolicy, 1, vec![], 1) };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p: ParameterSet<f64> = init_params(&spec, &mut rng).unwrap();
        p.get_mut("log_std").unwrap().data[0] = 0.0;
        let obs = Observation::vector(vec![0.0]);
        let mut r = Rollout::default();
        for _ in 0..256 {
            let s = act_gaussian(&spec, &p, &obs, &mut rng).unwrap();
            let rew = -s.action[0] * s.action[0];
            r.push(obs.clone(), s.action, s.log_prob, 0.0, rew, true);
        }
        let cfg = TrpoConfig { max_kl: 1.0, damping: 0.0, ..TrpoConfig::default() };
        let s = trpo_update(&spec, &mut p, &r, &cfg).unwrap();
        assert!(s.backtracks >= 1, "{s:?}");
        assert!(s.step_fraction < 1.0);
        assert!(s.kl <= cfg.max_kl);
        assert!(p.get("log_std").unwrap().data[0] < 0.0);
    }

    #[test]
    fn bandit_steps_respect_trust_region() {
        let spec = NetworkSpec { head_init_scale: 1.0, ..NetworkSpec::mlp(NetworkKind::GaussianPolicy, 1, vec![], 1) };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p: ParameterSet<f64> = init_params(&spec, &mut rng).unwrap();
        p.get_mut("mean.w").unwrap().data[0] = 0.0;
        p.get_mut("mean.b").unwrap().data[0] = 0.8;
        let cfg = TrpoConfig { max_kl: 0.02, ..TrpoConfig::default() };
        for _ in 0..80 {
            let mut r = Rollout::default();
            for _ in 0..64 {
                let obs = bandit_observation();
                let s = act_gaussian(&spec, &p, &obs, &mut rng).unwrap();
                let rew = -s.action[0] * s.action[0];
                r.push(obs, s.action, s.log_prob, s.value, rew, true);
            }
            let s = trpo_update(&spec, &mut p, &r, &cfg).unwrap();
            assert!(s.kl <= cfg.max_kl);
            if s.step_fraction > 0.0 {
                assert!(s.surrogate_after > s.surrogate_before);
            }
        }
        let mean = p.get("mean.b").unwrap().data[0] + p.get("mean.w").unwrap().data[0];
        assert!(mean.abs() < 0.1, "mean {mean}");
    }
}
