use rand::Rng;

use super::spec::{Activation, NetworkKind, NetworkSpec};
use super::tape::{Graph, NodeMap, Var};
use super::tensor::{Scalar, Tensor};
use super::NnError;
use crate::render::Observation;

/// Named parameters with gradient buffers of the same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph leaves for a parameter set, in parameter order.
#[derive(Debug, Clone)]
pub struct Bound(pub Vec<Var>);

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.grads.push(Tensor::zeros(value.shape.clone()));
        self.names.push(name.into());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.grads[i])
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.grads
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn flat_values(&self) -> Vec<T> {
        self.values.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<T> {
        self.grads.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for t in &mut self.values {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Splits a flat vector into tensors shaped like the parameters.
    pub fn unflatten(&self, flat: &[T]) -> Vec<Tensor<T>> {
        let mut off = 0;
        self.values
            .iter()
            .map(|t| {
                let n = t.len();
                off += n;
                Tensor::new(t.shape.clone(), flat[off - n..off].to_vec())
            })
            .collect()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.values.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Adds graph gradients for the bound leaves into the gradient buffers.
    pub fn accumulate(&mut self, bound: &Bound, grads: &NodeMap<T>) {
        for (acc, v) in self.grads.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(*v) {
                acc.add_assign(g);
            }
        }
    }

    /// `self <- tau * online + (1 - tau) * self`.
    pub fn soft_update(&mut self, online: &ParameterSet<T>, tau: f64) {
        let tau = T::c(tau);
        let keep = T::one() - tau;
        for (t, o) in self.values.iter_mut().zip(&online.values) {
            for (a, &b) in t.data.iter_mut().zip(&o.data) {
                *a = tau * b + keep * *a;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::new();
        for (n, t) in self.names.iter().zip(&self.values) {
            out.push(n.clone(), Tensor::new(t.shape.clone(), t.data.iter().map(|v| U::c(v.f64())).collect()));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|t| t.is_finite())
    }
}

fn uniform_fan_in<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize, scale: f64) -> Tensor<T> {
    let bound = (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::c(scale * rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data)
}

/// Fan-in scaled uniform weights (variance `1 / fan_in`), zero biases, constant log-std.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<ParameterSet<T>, NnError> {
    spec.validate()?;
    let mut p = ParameterSet::new();
    let mut ch = spec.input_channels;
    for (i, c) in spec.conv.iter().enumerate() {
        let fan_in = ch * c.kernel * c.kernel;
        p.push(format!("conv{i}.w"), uniform_fan_in(rng, vec![c.filters, ch, c.kernel, c.kernel], fan_in, 1.0));
        p.push(format!("conv{i}.b"), Tensor::zeros(vec![c.filters]));
        ch = c.filters;
    }
    let mut width = spec.feature_len()?;
    if spec.kind == NetworkKind::Critic {
        width += spec.action_dim;
    }
    for (j, &h) in spec.hidden.iter().enumerate() {
        p.push(format!("dense{j}.w"), uniform_fan_in(rng, vec![width, h], width, 1.0));
        p.push(format!("dense{j}.b"), Tensor::zeros(vec![h]));
        width = h;
    }
    match spec.kind {
        NetworkKind::GaussianPolicy => {
            p.push("mean.w", uniform_fan_in(rng, vec![width, spec.action_dim], width, spec.head_init_scale));
            p.push("mean.b", Tensor::zeros(vec![spec.action_dim]));
            p.push("log_std", Tensor::full(vec![spec.action_dim], T::c(spec.init_log_std)));
            p.push("value.w", uniform_fan_in(rng, vec![width, 1], width, 1.0));
            p.push("value.b", Tensor::zeros(vec![1]));
        }
        NetworkKind::Actor => {
            p.push("mean.w", uniform_fan_in(rng, vec![width, spec.action_dim], width, spec.head_init_scale));
            p.push("mean.b", Tensor::zeros(vec![spec.action_dim]));
        }
        NetworkKind::Critic => {
            p.push("q.w", uniform_fan_in(rng, vec![width, 1], width, spec.head_init_scale));
            p.push("q.b", Tensor::zeros(vec![1]));
        }
    }
    Ok(p)
}

/// Graph nodes produced by [`forward_graph`].
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// `(B, action_dim)`; absent for critics.
    pub mean: Option<Var>,
    /// `(action_dim)`; Gaussian policies only.
    pub log_std: Option<Var>,
    /// `(B, 1)`: state value, or action value for critics.
    pub value: Option<Var>,
    /// Input to the output heads.
    pub features: Var,
}

fn activate<T: Scalar>(g: &mut Graph<T>, a: Activation, x: Var) -> Var {
    match a {
        Activation::Relu => g.relu(x),
        Activation::Tanh => g.tanh(x),
    }
}

fn lookup(params_names: &[String], bound: &Bound, name: &str) -> Result<Var, NnError> {
    params_names
        .iter()
        .position(|n| n == name)
        .map(|i| bound.0[i])
        .ok_or_else(|| NnError::MissingParam(name.to_string()))
}

/// Records the network on `g`. `input` is `(B, C, H, W)` after the input transform.
pub fn forward_graph<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    bound: &Bound,
    g: &mut Graph<T>,
    input: Var,
    action: Option<Var>,
) -> Result<Outputs, NnError> {
    let p = |name: &str| lookup(params.names(), bound, name);
    let s = g.shape(input).to_vec();
    let want = [spec.input_channels, spec.input_height, spec.input_width];
    if s.len() != 4 || s[1..] != want {
        return Err(NnError::ShapeMismatch(format!("input {s:?}, network expects (B, {want:?})")));
    }
    let batch = s[0];
    let mut x = input;
    for (i, c) in spec.conv.iter().enumerate() {
        let y = g.conv2d(x, p(&format!("conv{i}.w"))?, p(&format!("conv{i}.b"))?, c.stride);
        x = activate(g, spec.conv_activation, y);
    }
    x = g.flatten(x);
    if spec.kind == NetworkKind::Critic {
        let a = action.ok_or_else(|| NnError::ShapeMismatch("critic needs an action input".into()))?;
        if g.shape(a) != [batch, spec.action_dim] {
            return Err(NnError::ShapeMismatch(format!("action {:?}, expected [{batch}, {}]", g.shape(a), spec.action_dim)));
        }
        x = g.concat(x, a);
    }
    for j in 0..spec.hidden.len() {
        let y = g.dense(x, p(&format!("dense{j}.w"))?, p(&format!("dense{j}.b"))?);
        x = activate(g, spec.hidden_activation, y);
    }
    Ok(match spec.kind {
        NetworkKind::GaussianPolicy => Outputs {
            mean: Some(g.dense(x, p("mean.w")?, p("mean.b")?)),
            log_std: Some(p("log_std")?),
            value: Some(g.dense(x, p("value.w")?, p("value.b")?)),
            features: x,
        },
        NetworkKind::Actor => {
            let m = g.dense(x, p("mean.w")?, p("mean.b")?);
            Outputs { mean: Some(g.tanh(m)), log_std: None, value: None, features: x }
        }
        NetworkKind::Critic => {
            Outputs { mean: None, log_std: None, value: Some(g.dense(x, p("q.w")?, p("q.b")?)), features: x }
        }
    })
}

/// Stacks observations into a `(B, C, H, W)` input, applying the network's input shift and scale.
pub fn batch_input<T: Scalar>(spec: &NetworkSpec, obs: &[&Observation]) -> Result<Tensor<T>, NnError> {
    let want = (spec.input_channels, spec.input_height, spec.input_width);
    let mut data = Vec::with_capacity(obs.len() * spec.input_len());
    let (shift, scale) = (spec.input_shift as f32, spec.input_scale as f32);
    for o in obs {
        if (o.channels, o.height, o.width) != want || o.data.len() != spec.input_len() {
            return Err(NnError::ShapeMismatch(format!(
                "observation ({}, {}, {}), network expects {want:?}",
                o.channels, o.height, o.width
            )));
        }
        data.extend(o.data.iter().map(|&v| T::c(((v - shift) * scale) as f64)));
    }
    Ok(Tensor::new(vec![obs.len(), want.0, want.1, want.2], data))
}

/// Plain forward results, one row per input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub mean: Vec<Vec<T>>,
    pub log_std: Vec<T>,
    pub value: Vec<T>,
}

/// Evaluates the network without keeping gradients.
pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    input: &Tensor<T>,
    action: Option<&Tensor<T>>,
) -> Result<ForwardOutput<T>, NnError> {
    let mut g = Graph::new();
    let bound = Bound(params.values().iter().map(|t| g.constant(t.clone())).collect());
    let x = g.constant(input.clone());
    let a = action.map(|t| g.constant(t.clone()));
    let out = forward_graph(spec, params, &bound, &mut g, x, a)?;
    let rows = |v: Option<Var>| -> Vec<Vec<T>> {
        v.map(|v| {
            let t = g.value(v);
            t.data.chunks(t.shape[1]).map(|r| r.to_vec()).collect()
        })
        .unwrap_or_default()
    };
    Ok(ForwardOutput {
        mean: rows(out.mean),
        log_std: out.log_std.map(|v| g.value(v).data.clone()).unwrap_or_default(),
        value: out.value.map(|v| g.value(v).data.clone()).unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::{arch_preset, ConvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_dense_passes_input_through() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let w = g.param(Tensor::from_f64(vec![3, 3], &eye));
        let b = g.param(Tensor::zeros(vec![3]));
        let y = g.dense(x, w, b);
        assert_eq!(g.value(y).data, g.value(x).data);
    }

    #[test]
    fn unit_conv_doubles() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 1 * 4 * 5).map(|i| i as f64 * 0.25 - 3.0).collect();
        let x = g.constant(Tensor::from_f64(vec![2, 1, 4, 5], &data));
        let w = g.param(Tensor::from_f64(vec![1, 1, 1, 1], &[2.0]));
        let b = g.param(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1);
        assert_eq!(g.shape(y), [2, 1, 4, 5]);
        for (a, b) in g.value(y).data.iter().zip(&data) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            input_channels: 2,
            input_height: 9,
            input_width: 9,
            conv: vec![ConvSpec::new(3, 3, 2), ConvSpec::new(2, 2, 1)],
            hidden: vec![5],
            ..NetworkSpec::default()
        }
    }

    #[test]
    fn duplicated_rows_give_duplicated_outputs() {
        let spec = small_spec();
        let p: ParameterSet<f64> = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let row: Vec<f64> = (0..spec.input_len()).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut data = row.clone();
        data.extend(&row);
        let out = forward(&spec, &p, &Tensor::from_f64(vec![2, 2, 9, 9], &data), None).unwrap();
        assert_eq!(out.mean[0], out.mean[1]);
        assert_eq!(out.value[0], out.value[1]);
        assert_eq!(out.mean[0].len(), 4);
        assert_eq!(out.log_std.len(), 4);
        assert_eq!(out.value.len(), 2);
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let spec = small_spec();
        let p: ParameterSet<f64> = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bad = Tensor::zeros(vec![1, 1, 9, 9]);
        assert!(matches!(forward(&spec, &p, &bad, None), Err(NnError::ShapeMismatch(_))));
        let obs = Observation { channels: 1, height: 9, width: 9, data: vec![0.0; 81] };
        assert!(matches!(batch_input::<f32>(&spec, &[&obs]), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn init_is_seeded() {
        let spec = arch_preset(32, 1).unwrap();
        let a: ParameterSet<f32> = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b: ParameterSet<f32> = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let c: ParameterSet<f32> = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let ls = a.get("log_std").unwrap();
        assert!(ls.data.iter().all(|&v| (v - 0.5f32.ln()).abs() < 1e-7));
    }

    #[test]
    fn dense_weight_variance_is_inverse_fan_in() {
        let spec = NetworkSpec::mlp(NetworkKind::GaussianPolicy, 400, vec![256], 4);
        let p: ParameterSet<f64> = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let w = p.get("dense0.w").unwrap();
        assert!(w.len() >= 100_000);
        let n = w.len() as f64;
        let mean = w.data.iter().sum::<f64>() / n;
        let var = w.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var * 400.0 - 1.0).abs() < 0.1, "{}", var * 400.0);
    }

    #[test]
    fn soft_update_blends() {
        let mut t = ParameterSet::<f64>::new();
        t.push("a", Tensor::from_f64(vec![1], &[0.0]));
        let mut o = ParameterSet::<f64>::new();
        o.push("a", Tensor::from_f64(vec![1], &[1.0]));
        let mut half = t.clone();
        half.soft_update(&o, 0.5);
        assert_eq!(half.get("a").unwrap().data, [0.5]);
        t.soft_update(&o, 1.0);
        assert_eq!(t, o);
    }

    #[test]
    fn critic_concatenates_action() {
        let spec = NetworkSpec::mlp(NetworkKind::Critic, 3, vec![8], 2);
        let p: ParameterSet<f64> = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(p.get("dense0.w").unwrap().shape, [5, 8]);
        let x = Tensor::from_f64(vec![1, 3, 1, 1], &[0.1, 0.2, 0.3]);
        let a = Tensor::from_f64(vec![1, 2], &[0.5, -0.5]);
        let out = forward(&spec, &p, &x, Some(&a)).unwrap();
        assert_eq!(out.value.len(), 1);
        assert!(forward(&spec, &p, &x, None).is_err());
    }
}
