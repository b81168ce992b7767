//! Eager computation graph with reverse-mode gradients and forward-mode
//! tangents (Jacobian-vector products).

use super::tensor::{col2im, im2col, mm_nn, mm_nt, mm_tn, ConvGeom, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `x (B,I) * w (I,O) + b (O)`.
    Dense { x: Var, w: Var, b: Var },
    /// `x (B,C,H,W)`, `w (F,C,K,K)`, `b (F)`; `cols` caches every sample's patches.
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Clamp(Var, T, T),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    /// `(B,D) -> (B)`.
    SumLast(Var),
    /// `(D) -> (B,D)`.
    BroadcastRows(Var),
    /// `(B,D1), (B,D2) -> (B,D1+D2)`.
    Concat(Var, Var),
    /// `a (B,D), mean (B,D), log_std (D) -> (B)`.
    GaussianLogProb { a: Var, mean: Var, log_std: Var },
    /// `log_std (D) -> ()`.
    GaussianEntropy(Var),
    /// `KL(old || new)` per row: `mean_old (B,D), log_std_old (D), mean (B,D), log_std (D) -> (B)`.
    GaussianKl { mean_old: Var, log_std_old: Var, mean: Var, log_std: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node results of a backward or tangent pass.
#[derive(Debug)]
pub struct NodeMap<T>(Vec<Option<Tensor<T>>>);

impl<T: Scalar> NodeMap<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.0[v.0].as_ref()
    }

    /// Value for `v`, or zeros shaped like `like`.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape.clone()))
    }
}

fn half_ln_2pi() -> f64 {
    0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn acc<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input without gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[0] && bs == [ws[1]], "dense shapes {xs:?} {ws:?} {bs:?}");
        let (bn, i, o) = (xs[0], xs[1], ws[1]);
        let mut y = vec![T::zero(); bn * o];
        for r in 0..bn {
            y[r * o..(r + 1) * o].copy_from_slice(&self.value(b).data);
        }
        mm_nn(&self.value(x).data, &self.value(w).data, &mut y, bn, i, o);
        self.push(Tensor::new(vec![bn, o], y), Op::Dense { x, w, b }, &[x, w, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(xs.len() == 4 && ws.len() == 4 && ws[1] == xs[1] && ws[2] == ws[3], "conv shapes {xs:?} {ws:?}");
        assert_eq!(self.shape(b), [ws[0]]);
        assert!(xs[2] >= ws[2] && xs[3] >= ws[3] && stride >= 1, "kernel larger than input");
        let geom = ConvGeom { channels: xs[1], height: xs[2], width: xs[3], kernel: ws[2], stride };
        let (bn, f, p, hw) = (xs[0], ws[0], geom.patch(), geom.out_hw());
        let in_len = xs[1] * xs[2] * xs[3];
        let mut cols = vec![T::zero(); bn * p * hw];
        let mut y = vec![T::zero(); bn * f * hw];
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        for s in 0..bn {
            let c = &mut cols[s * p * hw..(s + 1) * p * hw];
            im2col(&xv[s * in_len..(s + 1) * in_len], &geom, c);
            let ys = &mut y[s * f * hw..(s + 1) * f * hw];
            for fi in 0..f {
                ys[fi * hw..(fi + 1) * hw].iter_mut().for_each(|v| *v = bv[fi]);
            }
            mm_nn(wv, c, ys, f, p, hw);
        }
        let out = Tensor::new(vec![bn, f, geom.out_h(), geom.out_w()], y);
        self.push(out, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = Tensor::new(shape, self.value(a).data.clone());
        self.push(v, Op::Reshape(a), &[a])
    }

    /// `(B, ...) -> (B, prod(...))`.
    pub fn flatten(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let b = s[0];
        let rest = s[1..].iter().product();
        self.reshape(a, vec![b, rest])
    }

    fn same_shape(&self, a: Var, b: Var) {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::c(lo), T::c(hi));
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a).zip(self.value(b), |x, y| if x <= y { x } else { y });
        self.push(v, Op::Minimum(a, b), &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().copied().sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.data.iter().copied().sum::<T>() / T::c(t.len() as f64));
        self.push(v, Op::Mean(a), &[a])
    }

    pub fn sum_last(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2);
        let (b, d) = (s[0], s[1]);
        let v = Tensor::new(vec![b], self.value(a).data.chunks(d).map(|r| r.iter().copied().sum()).collect());
        self.push(v, Op::SumLast(a), &[a])
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape.len(), 1);
        let mut data = Vec::with_capacity(rows * t.len());
        for _ in 0..rows {
            data.extend_from_slice(&t.data);
        }
        let v = Tensor::new(vec![rows, t.len()], data);
        self.push(v, Op::BroadcastRows(a), &[a])
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0], "concat shapes {sa:?} {sb:?}");
        let (n, da, db) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            data.extend_from_slice(&self.value(a).data[r * da..(r + 1) * da]);
            data.extend_from_slice(&self.value(b).data[r * db..(r + 1) * db]);
        }
        self.push(Tensor::new(vec![n, da + db], data), Op::Concat(a, b), &[a, b])
    }

    pub fn gaussian_log_prob(&mut self, a: Var, mean: Var, log_std: Var) -> Var {
        self.same_shape(a, mean);
        let s = self.shape(mean);
        assert_eq!(self.shape(log_std), [s[1]]);
        let d = s[1];
        let (av, mv, lv) = (&self.value(a).data, &self.value(mean).data, &self.value(log_std).data);
        let c = T::c(half_ln_2pi());
        let half = T::c(0.5);
        let out: Vec<T> = av
            .chunks(d)
            .zip(mv.chunks(d))
            .map(|(ar, mr)| {
                let mut s = T::zero();
                for k in 0..d {
                    let z = (ar[k] - mr[k]) / lv[k].exp();
                    s += -half * z * z - lv[k] - c;
                }
                s
            })
            .collect();
        let v = Tensor::new(vec![out.len()], out);
        self.push(v, Op::GaussianLogProb { a, mean, log_std }, &[a, mean, log_std])
    }

    pub fn gaussian_entropy(&mut self, log_std: Var) -> Var {
        let t = self.value(log_std);
        let c = T::c(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln());
        let v = Tensor::scalar(t.data.iter().map(|&l| l + c).sum());
        self.push(v, Op::GaussianEntropy(log_std), &[log_std])
    }

    pub fn gaussian_kl(&mut self, mean_old: Var, log_std_old: Var, mean: Var, log_std: Var) -> Var {
        self.same_shape(mean_old, mean);
        let d = self.shape(mean)[1];
        assert_eq!(self.shape(log_std), [d]);
        assert_eq!(self.shape(log_std_old), [d]);
        let (mo, lo, m, l) =
            (&self.value(mean_old).data, &self.value(log_std_old).data, &self.value(mean).data, &self.value(log_std).data);
        let half = T::c(0.5);
        let out: Vec<T> = mo
            .chunks(d)
            .zip(m.chunks(d))
            .map(|(ro, rn)| {
                let mut s = T::zero();
                for k in 0..d {
                    let vo = (lo[k] + lo[k]).exp();
                    let vn = (l[k] + l[k]).exp();
                    let dm = ro[k] - rn[k];
                    s += l[k] - lo[k] + (vo + dm * dm) / (vn + vn) - half;
                }
                s
            })
            .collect();
        let v = Tensor::new(vec![out.len()], out);
        self.push(v, Op::GaussianKl { mean_old, log_std_old, mean, log_std }, &[mean_old, log_std_old, mean, log_std])
    }

    /// Gradient of a single-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> NodeMap<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let seed = Tensor::full(self.value(loss).shape.clone(), T::one());
        self.backward_with(&[(loss, seed)])
    }

    /// Vector-Jacobian product seeded at several nodes at once.
    pub fn backward_with(&self, seeds: &[(Var, Tensor<T>)]) -> NodeMap<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut last = 0;
        for (v, s) in seeds {
            assert_eq!(s.shape, self.value(*v).shape, "seed shape");
            acc(&mut grads[v.0], s.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        NodeMap(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let zero = T::zero();
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (bn, ii, o) = (xv.shape[0], xv.shape[1], wv.shape[1]);
                if self.wants(*x) {
                    let mut dx = vec![zero; bn * ii];
                    mm_nt(&g.data, &wv.data, &mut dx, bn, o, ii);
                    acc(&mut grads[x.0], Tensor::new(xv.shape.clone(), dx));
                }
                if self.wants(*w) {
                    let mut dw = vec![zero; ii * o];
                    mm_tn(&xv.data, &g.data, &mut dw, ii, bn, o);
                    acc(&mut grads[w.0], Tensor::new(wv.shape.clone(), dw));
                }
                if self.wants(*b) {
                    let mut db = vec![zero; o];
                    for r in g.data.chunks(o) {
                        for (d, &v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    acc(&mut grads[b.0], Tensor::new(vec![o], db));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (bn, f, p, hw) = (xv.shape[0], wv.shape[0], geom.patch(), geom.out_hw());
                let in_len = geom.channels * geom.height * geom.width;
                let mut dw = vec![zero; f * p];
                let mut db = vec![zero; f];
                let mut dx = if self.wants(*x) { Some(vec![zero; bn * in_len]) } else { None };
                let mut dcols = vec![zero; p * hw];
                for s in 0..bn {
                    let gs = &g.data[s * f * hw..(s + 1) * f * hw];
                    let cs = &cols[s * p * hw..(s + 1) * p * hw];
                    mm_nt(gs, cs, &mut dw, f, hw, p);
                    for fi in 0..f {
                        db[fi] += gs[fi * hw..(fi + 1) * hw].iter().copied().sum();
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.iter_mut().for_each(|v| *v = zero);
                        mm_tn(&wv.data, gs, &mut dcols, p, f, hw);
                        col2im(&dcols, geom, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
                if let Some(dx) = dx {
                    acc(&mut grads[x.0], Tensor::new(xv.shape.clone(), dx));
                }
                if self.wants(*w) {
                    acc(&mut grads[w.0], Tensor::new(wv.shape.clone(), dw));
                }
                if self.wants(*b) {
                    acc(&mut grads[b.0], Tensor::new(vec![f], db));
                }
            }
            Op::Relu(a) => {
                let d = g.zip(self.value(*a), |gv, x| if x > zero { gv } else { zero });
                acc(&mut grads[a.0], d);
            }
            Op::Tanh(a) => acc(&mut grads[a.0], g.zip(y, |gv, t| gv * (T::one() - t * t))),
            Op::Exp(a) => acc(&mut grads[a.0], g.zip(y, |gv, e| gv * e)),
            Op::Square(a) => acc(&mut grads[a.0], g.zip(self.value(*a), |gv, x| gv * (x + x))),
            Op::Reshape(a) => acc(&mut grads[a.0], Tensor::new(self.value(*a).shape.clone(), g.data.clone())),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    acc(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    acc(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(&mut grads[a.0], g.zip(self.value(*b), |gv, bv| gv * bv));
                }
                if self.wants(*b) {
                    acc(&mut grads[b.0], g.zip(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(&mut grads[a.0], g.map(|v| v * s));
            }
            Op::AddScalar(a) => acc(&mut grads[a.0], g.clone()),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(&mut grads[a.0], g.zip(self.value(*a), |gv, x| if x > lo && x < hi { gv } else { zero }));
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = Tensor::new(
                        g.shape.clone(),
                        g.data.iter().zip(av.data.iter().zip(&bv.data)).map(|(&gv, (&x, &y))| if x <= y { gv } else { zero }).collect(),
                    );
                    acc(&mut grads[a.0], d);
                }
                if self.wants(*b) {
                    let d = Tensor::new(
                        g.shape.clone(),
                        g.data.iter().zip(av.data.iter().zip(&bv.data)).map(|(&gv, (&x, &y))| if x <= y { zero } else { gv }).collect(),
                    );
                    acc(&mut grads[b.0], d);
                }
            }
            Op::Sum(a) => acc(&mut grads[a.0], Tensor::full(self.value(*a).shape.clone(), g.data[0])),
            Op::Mean(a) => {
                let t = self.value(*a);
                acc(&mut grads[a.0], Tensor::full(t.shape.clone(), g.data[0] / T::c(t.len() as f64)));
            }
            Op::SumLast(a) => {
                let s = &self.value(*a).shape;
                let d = s[1];
                let data = g.data.iter().flat_map(|&v| std::iter::repeat(v).take(d)).collect();
                acc(&mut grads[a.0], Tensor::new(s.clone(), data));
            }
            Op::BroadcastRows(a) => {
                let d = self.value(*a).len();
                let mut out = vec![zero; d];
                for r in g.data.chunks(d) {
                    for (o, &v) in out.iter_mut().zip(r) {
                        *o += v;
                    }
                }
                acc(&mut grads[a.0], Tensor::new(vec![d], out));
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.value(*a).shape.clone(), self.value(*b).shape.clone());
                let (da, db) = (sa[1], sb[1]);
                let mut ga = Vec::with_capacity(sa[0] * da);
                let mut gb = Vec::with_capacity(sb[0] * db);
                for r in g.data.chunks(da + db) {
                    ga.extend_from_slice(&r[..da]);
                    gb.extend_from_slice(&r[da..]);
                }
                if self.wants(*a) {
                    acc(&mut grads[a.0], Tensor::new(sa, ga));
                }
                if self.wants(*b) {
                    acc(&mut grads[b.0], Tensor::new(sb, gb));
                }
            }
            Op::GaussianLogProb { a, mean, log_std } => {
                let (av, mv, lv) = (self.value(*a), self.value(*mean), self.value(*log_std));
                let d = lv.len();
                let mut dm = vec![zero; mv.len()];
                let mut dl = vec![zero; d];
                for (r, &gr) in g.data.iter().enumerate() {
                    for k in 0..d {
                        let idx = r * d + k;
                        let var = (lv.data[k] + lv.data[k]).exp();
                        let diff = av.data[idx] - mv.data[idx];
                        dm[idx] = gr * diff / var;
                        dl[k] += gr * (diff * diff / var - T::one());
                    }
                }
                if self.wants(*a) {
                    acc(&mut grads[a.0], Tensor::new(av.shape.clone(), dm.iter().map(|&v| -v).collect()));
                }
                if self.wants(*mean) {
                    acc(&mut grads[mean.0], Tensor::new(mv.shape.clone(), dm));
                }
                if self.wants(*log_std) {
                    acc(&mut grads[log_std.0], Tensor::new(vec![d], dl));
                }
            }
            Op::GaussianEntropy(l) => {
                acc(&mut grads[l.0], Tensor::full(self.value(*l).shape.clone(), g.data[0]));
            }
            Op::GaussianKl { mean_old, log_std_old, mean, log_std } => {
                let (mo, lo, m, l) =
                    (self.value(*mean_old), self.value(*log_std_old), self.value(*mean), self.value(*log_std));
                let d = l.len();
                let mut dm = vec![zero; m.len()];
                let mut dl = vec![zero; d];
                let mut dlo = vec![zero; d];
                for (r, &gr) in g.data.iter().enumerate() {
                    for k in 0..d {
                        let idx = r * d + k;
                        let vo = (lo.data[k] + lo.data[k]).exp();
                        let vn = (l.data[k] + l.data[k]).exp();
                        let diff = m.data[idx] - mo.data[idx];
                        dm[idx] = gr * diff / vn;
                        dl[k] += gr * (T::one() - (vo + diff * diff) / vn);
                        dlo[k] += gr * (vo / vn - T::one());
                    }
                }
                if self.wants(*mean_old) {
                    acc(&mut grads[mean_old.0], Tensor::new(mo.shape.clone(), dm.iter().map(|&v| -v).collect()));
                }
                if self.wants(*mean) {
                    acc(&mut grads[mean.0], Tensor::new(m.shape.clone(), dm));
                }
                if self.wants(*log_std) {
                    acc(&mut grads[log_std.0], Tensor::new(vec![d], dl));
                }
                if self.wants(*log_std_old) {
                    acc(&mut grads[log_std_old.0], Tensor::new(vec![d], dlo));
                }
            }
        }
    }

    /// Forward-mode pass: tangents of every node given tangents on some leaves.
    pub fn jvp(&self, tangents: &[(Var, Tensor<T>)]) -> NodeMap<T> {
        let n = self.nodes.len();
        let mut tans: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for (v, t) in tangents {
            assert_eq!(t.shape, self.value(*v).shape, "tangent shape");
            tans[v.0] = Some(t.clone());
        }
        for i in 0..n {
            if let Op::Leaf = self.nodes[i].op {
                continue;
            }
            let t = self.tangent_node(i, &tans);
            tans[i] = t;
        }
        NodeMap(tans)
    }

    fn tz(&self, tans: &[Option<Tensor<T>>], v: Var) -> Tensor<T> {
        tans[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.value(v).shape.clone()))
    }

    fn tangent_node(&self, i: usize, tans: &[Option<Tensor<T>>]) -> Option<Tensor<T>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let zero = T::zero();
        let has = |v: &Var| tans[v.0].is_some();
        let t = |v: &Var| tans[v.0].as_ref();
        match &node.op {
            Op::Leaf => None,
            Op::Dense { x, w, b } => {
                if !(has(x) || has(w) || has(b)) {
                    return None;
                }
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (bn, ii, o) = (xv.shape[0], xv.shape[1], wv.shape[1]);
                let mut out = vec![zero; bn * o];
                if let Some(tb) = t(b) {
                    for r in 0..bn {
                        out[r * o..(r + 1) * o].copy_from_slice(&tb.data);
                    }
                }
                if let Some(tx) = t(x) {
                    mm_nn(&tx.data, &wv.data, &mut out, bn, ii, o);
                }
                if let Some(tw) = t(w) {
                    mm_nn(&xv.data, &tw.data, &mut out, bn, ii, o);
                }
                Some(Tensor::new(y.shape.clone(), out))
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                if !(has(x) || has(w) || has(b)) {
                    return None;
                }
                let wv = self.value(*w);
                let (bn, f, p, hw) = (y.shape[0], wv.shape[0], geom.patch(), geom.out_hw());
                let in_len = geom.channels * geom.height * geom.width;
                let mut out = vec![zero; bn * f * hw];
                let mut tcols = vec![zero; p * hw];
                for s in 0..bn {
                    let os = &mut out[s * f * hw..(s + 1) * f * hw];
                    if let Some(tb) = t(b) {
                        for fi in 0..f {
                            os[fi * hw..(fi + 1) * hw].iter_mut().for_each(|v| *v = tb.data[fi]);
                        }
                    }
                    if let Some(tw) = t(w) {
                        mm_nn(&tw.data, &cols[s * p * hw..(s + 1) * p * hw], os, f, p, hw);
                    }
                    if let Some(tx) = t(x) {
                        im2col(&tx.data[s * in_len..(s + 1) * in_len], geom, &mut tcols);
                        mm_nn(&wv.data, &tcols, os, f, p, hw);
                    }
                }
                Some(Tensor::new(y.shape.clone(), out))
            }
            Op::Relu(a) => t(a).map(|ta| ta.zip(self.value(*a), |tv, x| if x > zero { tv } else { zero })),
            Op::Tanh(a) => t(a).map(|ta| ta.zip(y, |tv, yv| tv * (T::one() - yv * yv))),
            Op::Exp(a) => t(a).map(|ta| ta.zip(y, |tv, yv| tv * yv)),
            Op::Square(a) => t(a).map(|ta| ta.zip(self.value(*a), |tv, x| tv * (x + x))),
            Op::Reshape(a) => t(a).map(|ta| Tensor::new(y.shape.clone(), ta.data.clone())),
            Op::Add(a, b) | Op::Sub(a, b) => {
                if !(has(a) || has(b)) {
                    return None;
                }
                let sub = matches!(node.op, Op::Sub(..));
                let ta = self.tz(tans, *a);
                let tb = self.tz(tans, *b);
                Some(ta.zip(&tb, |p, q| if sub { p - q } else { p + q }))
            }
            Op::Mul(a, b) => {
                if !(has(a) || has(b)) {
                    return None;
                }
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ta, tb) = (self.tz(tans, *a), self.tz(tans, *b));
                let data = (0..y.len()).map(|k| ta.data[k] * bv.data[k] + av.data[k] * tb.data[k]).collect();
                Some(Tensor::new(y.shape.clone(), data))
            }
            Op::Scale(a, s) => t(a).map(|ta| ta.map(|v| v * *s)),
            Op::AddScalar(a) => t(a).cloned(),
            Op::Clamp(a, lo, hi) => {
                t(a).map(|ta| ta.zip(self.value(*a), |tv, x| if x > *lo && x < *hi { tv } else { zero }))
            }
            Op::Minimum(a, b) => {
                if !(has(a) || has(b)) {
                    return None;
                }
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ta, tb) = (self.tz(tans, *a), self.tz(tans, *b));
                let data =
                    (0..y.len()).map(|k| if av.data[k] <= bv.data[k] { ta.data[k] } else { tb.data[k] }).collect();
                Some(Tensor::new(y.shape.clone(), data))
            }
            Op::Sum(a) => t(a).map(|ta| Tensor::scalar(ta.data.iter().copied().sum())),
            Op::Mean(a) => t(a).map(|ta| Tensor::scalar(ta.data.iter().copied().sum::<T>() / T::c(ta.len() as f64))),
            Op::SumLast(a) => t(a).map(|ta| {
                let d = ta.shape[1];
                Tensor::new(y.shape.clone(), ta.data.chunks(d).map(|r| r.iter().copied().sum()).collect())
            }),
            Op::BroadcastRows(a) => t(a).map(|ta| {
                let rows = y.shape[0];
                let mut data = Vec::with_capacity(y.len());
                for _ in 0..rows {
                    data.extend_from_slice(&ta.data);
                }
                Tensor::new(y.shape.clone(), data)
            }),
            Op::Concat(a, b) => {
                if !(has(a) || has(b)) {
                    return None;
                }
                let (ta, tb) = (self.tz(tans, *a), self.tz(tans, *b));
                let (da, db) = (ta.shape[1], tb.shape[1]);
                let mut data = Vec::with_capacity(y.len());
                for r in 0..y.shape[0] {
                    data.extend_from_slice(&ta.data[r * da..(r + 1) * da]);
                    data.extend_from_slice(&tb.data[r * db..(r + 1) * db]);
                }
                Some(Tensor::new(y.shape.clone(), data))
            }
            Op::GaussianLogProb { a, mean, log_std } => {
                if !(has(a) || has(mean) || has(log_std)) {
                    return None;
                }
                let (av, mv, lv) = (self.value(*a), self.value(*mean), self.value(*log_std));
                let (ta, tm, tl) = (self.tz(tans, *a), self.tz(tans, *mean), self.tz(tans, *log_std));
                let d = lv.len();
                let data = (0..y.len())
                    .map(|r| {
                        let mut s = zero;
                        for k in 0..d {
                            let idx = r * d + k;
                            let var = (lv.data[k] + lv.data[k]).exp();
                            let diff = av.data[idx] - mv.data[idx];
                            s += diff / var * (tm.data[idx] - ta.data[idx]) + (diff * diff / var - T::one()) * tl.data[k];
                        }
                        s
                    })
                    .collect();
                Some(Tensor::new(y.shape.clone(), data))
            }
            Op::GaussianEntropy(l) => t(l).map(|tl| Tensor::scalar(tl.data.iter().copied().sum())),
            Op::GaussianKl { mean_old, log_std_old, mean, log_std } => {
                if !(has(mean_old) || has(log_std_old) || has(mean) || has(log_std)) {
                    return None;
                }
                let (mo, lo, m, l) =
                    (self.value(*mean_old), self.value(*log_std_old), self.value(*mean), self.value(*log_std));
                let (tmo, tlo, tm, tl) = (
                    self.tz(tans, *mean_old),
                    self.tz(tans, *log_std_old),
                    self.tz(tans, *mean),
                    self.tz(tans, *log_std),
                );
                let d = l.len();
                let data = (0..y.len())
                    .map(|r| {
                        let mut s = zero;
                        for k in 0..d {
                            let idx = r * d + k;
                            let vo = (lo.data[k] + lo.data[k]).exp();
                            let vn = (l.data[k] + l.data[k]).exp();
                            let diff = m.data[idx] - mo.data[idx];
                            s += diff / vn * (tm.data[idx] - tmo.data[idx])
                                + (T::one() - (vo + diff * diff) / vn) * tl.data[k]
                                + (vo / vn - T::one()) * tlo.data[k];
                        }
                        s
                    })
                    .collect();
                Some(Tensor::new(y.shape.clone(), data))
            }
        }
    }
}
