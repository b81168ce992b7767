//! Central finite-difference verification of graph gradients and tangents.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Graph, Var};
use super::tensor::Tensor;

/// Builds the op under test from its input leaves.
pub type BuildFn = fn(&mut Graph<f64>, &[Var]) -> Var;
/// Draws one random set of inputs, avoiding kinks of non-smooth ops.
pub type SampleFn = fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>;

pub struct Case {
    pub name: &'static str,
    pub sample: SampleFn,
    pub build: BuildFn,
}

/// Errors of one random instance.
#[derive(Debug, Clone, Copy)]
pub struct CheckResult {
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)` over input gradients.
    pub grad_rel: f64,
    /// Same measure for the forward-mode directional derivative.
    pub jvp_rel: f64,
}

fn rel(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Random weighting of the op output, so every output element reaches the loss.
fn loss(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Var {
    let w = g.constant(weights.clone());
    let m = g.mul(out, w);
    g.sum(m)
}

fn eval(case: &Case, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &vars);
    let l = loss(&mut g, out, weights);
    g.value(l).data[0]
}

pub fn check_case(case: &Case, rng: &mut ChaCha8Rng, h: f64) -> CheckResult {
    let inputs = (case.sample)(rng);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars);
    let shape = g.shape(out).to_vec();
    let weights = Tensor::new(shape.clone(), (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect());
    let l = loss(&mut g, out, &weights);
    let grads = g.backward(l);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let ga = grads.get_or_zeros(vars[i], t);
        for k in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data[k] += h;
            let mut minus = inputs.clone();
            minus[i].data[k] -= h;
            numeric.push((eval(case, &plus, &weights) - eval(case, &minus, &weights)) / (2.0 * h));
            analytic.push(ga.data[k]);
        }
    }

    let tangents: Vec<(Var, Tensor<f64>)> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| (v, Tensor::new(t.shape.clone(), (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect())))
        .collect();
    let tan = g.jvp(&tangents);
    let jvp = tan.get(l).map_or(0.0, |t| t.data[0]);
    let shifted = |s: f64| -> Vec<Tensor<f64>> {
        inputs.iter().zip(&tangents).map(|(x, (_, t))| x.zip(t, |a, b| a + s * b)).collect()
    };
    let jvp_num = (eval(case, &shifted(h), &weights) - eval(case, &shifted(-h), &weights)) / (2.0 * h);

    CheckResult { grad_rel: rel(&analytic, &numeric), jvp_rel: rel(&[jvp], &[jvp_num]) }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values with magnitude in `[0.05, 1]` and random sign: clear of the kink at 0.
fn off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let m = rng.random_range(0.05..1.0);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
}

fn rows(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=5))
}

/// Every differentiable primitive plus the Gaussian densities.
pub fn primitive_cases() -> Vec<Case> {
    vec![
        Case {
            name: "dense",
            sample: |r| {
                let (b, i) = rows(r);
                let o = r.random_range(1..=5);
                vec![uniform(r, vec![b, i], -1.0, 1.0), uniform(r, vec![i, o], -1.0, 1.0), uniform(r, vec![o], -1.0, 1.0)]
            },
            build: |g, v| g.dense(v[0], v[1], v[2]),
        },
        Case {
            name: "conv2d",
            sample: |r| {
                let b = r.random_range(1..=2);
                let c = r.random_range(1..=3);
                let k = r.random_range(1..=3);
                let s = r.random_range(1..=3);
                let hgt = r.random_range(k..=k + 5);
                let wid = r.random_range(k..=k + 5);
                let f = r.random_range(1..=3);
                // the last tensor only carries the stride, as its length
                vec![
                    uniform(r, vec![b, c, hgt, wid], -1.0, 1.0),
                    uniform(r, vec![f, c, k, k], -1.0, 1.0),
                    uniform(r, vec![f], -1.0, 1.0),
                    Tensor::new(vec![s], vec![0.0; s]),
                ]
            },
            build: |g, v| {
                let stride = g.shape(v[3])[0];
                g.conv2d(v[0], v[1], v[2], stride)
            },
        },
        Case { name: "relu", sample: |r| vec![off_zero(r, vec![3, 4])], build: |g, v| g.relu(v[0]) },
        Case { name: "tanh", sample: |r| vec![uniform(r, vec![3, 4], -2.0, 2.0)], build: |g, v| g.tanh(v[0]) },
        Case { name: "exp", sample: |r| vec![uniform(r, vec![3, 4], -2.0, 2.0)], build: |g, v| g.exp(v[0]) },
        Case { name: "square", sample: |r| vec![uniform(r, vec![3, 4], -2.0, 2.0)], build: |g, v| g.square(v[0]) },
        Case {
            name: "flatten",
            sample: |r| vec![uniform(r, vec![2, 3, 2, 2], -1.0, 1.0)],
            build: |g, v| {
                let f = g.flatten(v[0]);
                g.tanh(f)
            },
        },
        Case {
            name: "add",
            sample: |r| vec![uniform(r, vec![2, 3], -1.0, 1.0), uniform(r, vec![2, 3], -1.0, 1.0)],
            build: |g, v| g.add(v[0], v[1]),
        },
        Case {
            name: "sub",
            sample: |r| vec![uniform(r, vec![2, 3], -1.0, 1.0), uniform(r, vec![2, 3], -1.0, 1.0)],
            build: |g, v| g.sub(v[0], v[1]),
        },
        Case {
            name: "mul",
            sample: |r| vec![uniform(r, vec![2, 3], -1.0, 1.0), uniform(r, vec![2, 3], -1.0, 1.0)],
            build: |g, v| g.mul(v[0], v[1]),
        },
        Case { name: "scale", sample: |r| vec![uniform(r, vec![5], -1.0, 1.0)], build: |g, v| g.scale(v[0], -1.7) },
        Case {
            name: "add_scalar",
            sample: |r| vec![uniform(r, vec![5], -1.0, 1.0)],
            build: |g, v| {
                let a = g.add_scalar(v[0], 0.3);
                g.square(a)
            },
        },
        Case {
            name: "clamp",
            sample: |r| {
                // keep clear of the clamp edges at +-0.5
                let n = 8;
                let data = (0..n)
                    .map(|_| {
                        let m = if r.random::<bool>() { r.random_range(0.0..0.45) } else { r.random_range(0.55..1.5) };
                        if r.random::<bool>() {
                            m
                        } else {
                            -m
                        }
                    })
                    .collect();
                vec![Tensor::new(vec![n], data)]
            },
            build: |g, v| g.clamp(v[0], -0.5, 0.5),
        },
        Case {
            name: "minimum",
            sample: |r| {
                let a = uniform(r, vec![6], -1.0, 1.0);
                let gap = off_zero(r, vec![6]);
                let b = a.zip(&gap, |x, d| x + d);
                vec![a, b]
            },
            build: |g, v| g.minimum(v[0], v[1]),
        },
        Case { name: "sum", sample: |r| vec![uniform(r, vec![3, 2], -1.0, 1.0)], build: |g, v| g.sum(v[0]) },
        Case { name: "mean", sample: |r| vec![uniform(r, vec![3, 2], -1.0, 1.0)], build: |g, v| g.mean(v[0]) },
        Case {
            name: "sum_last",
            sample: |r| {
                let (b, d) = rows(r);
                vec![uniform(r, vec![b, d], -1.0, 1.0)]
            },
            build: |g, v| g.sum_last(v[0]),
        },
        Case {
            name: "broadcast_rows",
            sample: |r| vec![uniform(r, vec![4], -1.0, 1.0)],
            build: |g, v| g.broadcast_rows(v[0], 3),
        },
        Case {
            name: "concat",
            sample: |r| vec![uniform(r, vec![2, 3], -1.0, 1.0), uniform(r, vec![2, 2], -1.0, 1.0)],
            build: |g, v| g.concat(v[0], v[1]),
        },
        Case {
            name: "gaussian_log_prob",
            sample: |r| {
                let (b, d) = rows(r);
                vec![uniform(r, vec![b, d], -1.0, 1.0), uniform(r, vec![b, d], -1.0, 1.0), uniform(r, vec![d], -1.0, 0.5)]
            },
            build: |g, v| g.gaussian_log_prob(v[0], v[1], v[2]),
        },
        Case {
            name: "gaussian_entropy",
            sample: |r| vec![uniform(r, vec![4], -1.5, 0.5)],
            build: |g, v| g.gaussian_entropy(v[0]),
        },
        Case {
            name: "gaussian_kl",
            sample: |r| {
                let (b, d) = rows(r);
                vec![
                    uniform(r, vec![b, d], -1.0, 1.0),
                    uniform(r, vec![d], -1.0, 0.5),
                    uniform(r, vec![b, d], -1.0, 1.0),
                    uniform(r, vec![d], -1.0, 0.5),
                ]
            },
            build: |g, v| g.gaussian_kl(v[0], v[1], v[2], v[3]),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{forward_graph, init_params, ParameterSet};
    use crate::nn::spec::{ConvSpec, NetworkSpec};
    use rand::SeedableRng;

    #[test]
    fn every_primitive_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in primitive_cases() {
            for i in 0..100 {
                let r = check_case(&case, &mut rng, 1e-6);
                assert!(r.grad_rel < 1e-5, "{} instance {i}: grad {}", case.name, r.grad_rel);
                assert!(r.jvp_rel < 1e-5, "{} instance {i}: jvp {}", case.name, r.jvp_rel);
            }
        }
    }

    #[test]
    fn log_prob_gradient_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let case = primitive_cases().into_iter().find(|c| c.name == "gaussian_log_prob").unwrap();
        for _ in 0..100 {
            assert!(check_case(&case, &mut rng, 1e-6).grad_rel < 1e-6);
        }
    }

    #[test]
    fn sum_of_params_gives_unit_grads_and_constant_gives_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(a);
        assert!(g.backward(s).get(a).unwrap().data.iter().all(|&v| v == 1.0));
        let z = g.scale(s, 0.0);
        assert!(g.backward(z).get(a).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whole_policy_network_gradient() {
        let spec = NetworkSpec {
            input_channels: 2,
            input_height: 8,
            input_width: 7,
            conv: vec![ConvSpec::new(3, 3, 2), ConvSpec::new(2, 2, 1)],
            hidden: vec![6],
            ..NetworkSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params: ParameterSet<f64> = init_params(&spec, &mut rng).unwrap();
        let input: Tensor<f64> = uniform(&mut rng, vec![2, 2, 8, 7], 0.0, 1.0);
        let act: Tensor<f64> = uniform(&mut rng, vec![2, 4], -1.0, 1.0);
        let objective = |p: &ParameterSet<f64>| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let bound = p.bind(&mut g);
            let x = g.constant(input.clone());
            let o = forward_graph(&spec, p, &bound, &mut g, x, None).unwrap();
            let a = g.constant(act.clone());
            let lp = g.gaussian_log_prob(a, o.mean.unwrap(), o.log_std.unwrap());
            let lps = g.sum(lp);
            let v = g.square(o.value.unwrap());
            let vs = g.sum(v);
            let l = g.add(lps, vs);
            let grads = g.backward(l);
            let flat = bound.0.iter().zip(p.values()).flat_map(|(&b, t)| grads.get_or_zeros(b, t).data).collect();
            (g.value(l).data[0], flat)
        };
        let (_, analytic) = objective(&params);
        let base = params.flat_values();
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(base.len());
        for k in 0..base.len() {
            let mut p = params.clone();
            let mut f = base.clone();
            f[k] += h;
            p.set_flat(&f);
            let up = objective(&p).0;
            f[k] -= 2.0 * h;
            p.set_flat(&f);
            numeric.push((up - objective(&p).0) / (2.0 * h));
        }
        assert!(rel(&analytic, &numeric) < 1e-5);
    }
}
