//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass;
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients.
//! Nodes own their values, so a graph also doubles as the activation cache.

use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running averages are updated after the step.
    Train,
    /// Stored running statistics; the forward pass is a pure function.
    Frozen,
}

impl NormMode {
    pub fn label(self) -> &'static str {
        match self {
            NormMode::Train => "train",
            NormMode::Frozen => "frozen",
        }
    }
}

/// Batch statistics observed by one batch-norm layer in training mode.
#[derive(Debug, Clone)]
pub struct BatchStatsUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Softplus(Var),
    Add(Var, Var),
    AddScalar(Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    AvgPool2(Var),
    Upsample(Var, usize),
    SumScalars(Vec<Var>),
    CrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        targets: Vec<u8>,
        weights: Option<Vec<T>>,
        total_weight: T,
    },
    KlDiag {
        q_mu: Var,
        q_sigma: Var,
        p_mu: Var,
        p_sigma: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<T>>,
    store: &'a ParamStore<T>,
    param_leaves: Vec<Option<Var>>,
    mode: NormMode,
    stats_updates: Vec<BatchStatsUpdate<T>>,
}

/// Gradients indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

/// Closed-form `KL(N(mq, sq²) || N(mp, sp²))` for one scalar pair.
#[inline]
pub fn kl_scalar<T: Scalar>(mq: T, sq: T, mp: T, sp: T) -> T {
    let half = T::lit(0.5);
    let d = mp - mq;
    let vp = sp * sp;
    half * ((sq * sq) / vp + d * d / vp - T::one()) + sp.ln() - sq.ln()
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: NormMode) -> Self {
        Self {
            nodes: Vec::new(),
            store,
            param_leaves: vec![None; store.len()],
            mode,
            stats_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient but is not a stored parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_leaves[id.index()] {
            return v;
        }
        let trainable = self.store.is_trainable(id);
        let v = self.push(self.store.get(id).clone(), Op::Leaf, trainable);
        self.param_leaves[id.index()] = Some(v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_leaves[id.index()]
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv { x, w, b }, ng)
    }

    /// Batch normalization with affine parameters and running-statistic
    /// buffers taken from the store.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Var {
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let eps = T::lit(kernels::BN_EPS);
        let (mean, var, batch_stats) = match self.mode {
            NormMode::Train => {
                let (m, v) = kernels::channel_stats(self.value(x));
                let count = {
                    let s = self.shape(x);
                    s.n * s.plane()
                };
                let unbiased = if count > 1 {
                    let f = T::lit(count as f64 / (count - 1) as f64);
                    v.iter().map(|&e| e * f).collect()
                } else {
                    v.clone()
                };
                self.stats_updates.push(BatchStatsUpdate {
                    running_mean,
                    running_var,
                    mean: m.clone(),
                    var: unbiased,
                });
                (m, v, true)
            }
            NormMode::Frozen => (
                self.store.get(running_mean).data().to_vec(),
                self.store.get(running_var).data().to_vec(),
                false,
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::batch_norm_apply(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gv).data(),
            self.value(bv).data(),
        );
        let ng = self.ng(x) || self.ng(gv) || self.ng(bv);
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma: gv,
                beta: bv,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Sign of every ReLU input, in graph order. Two evaluations with equal
    /// patterns lie on the same linear piece of every ReLU, which is what a
    /// finite-difference stencil needs to be meaningful.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::softplus);
        let ng = self.ng(x);
        self.push(out, Op::Softplus(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = kernels::avg_pool2_forward(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::AvgPool2(x), ng)
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let out = crate::tensor::upsample_nearest(self.value(x), factor);
        let ng = self.ng(x);
        self.push(out, Op::Upsample(x, factor), ng)
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let mut total = T::zero();
        for &p in parts {
            total += self.value(p).item();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::scalar(total), Op::SumScalars(parts.to_vec()), ng)
    }

    /// Weighted mean over all pixels of `-ln softmax(logits)[target]`.
    ///
    /// `targets` is laid out `(n, h, w)` like one channel of `logits`.
    /// Panics if a target is not a valid class; callers validate first.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8], weights: Option<&[T]>) -> Var {
        let s = self.shape(logits);
        assert_eq!(targets.len(), s.n * s.plane(), "target size does not match logits {s}");
        let probs = kernels::softmax_channels(self.value(logits));
        let lv = self.value(logits);
        let p = s.plane();
        let mut total = T::zero();
        let mut total_weight = T::zero();
        for n in 0..s.n {
            for i in 0..p {
                let t = targets[n * p + i] as usize;
                assert!(t < s.c, "target class {t} out of range for {} classes", s.c);
                let w = weights.map(|w| w[n * p + i]).unwrap_or_else(T::one);
                if w == T::zero() {
                    continue;
                }
                let mut m = T::neg_infinity();
                for k in 0..s.c {
                    m = m.max(lv.data()[(n * s.c + k) * p + i]);
                }
                let mut z = T::zero();
                for k in 0..s.c {
                    z += (lv.data()[(n * s.c + k) * p + i] - m).exp();
                }
                let log_p = lv.data()[(n * s.c + t) * p + i] - m - z.ln();
                total -= w * log_p;
                total_weight += w;
            }
        }
        let value = if total_weight > T::zero() {
            total / total_weight
        } else {
            T::zero()
        };
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.map(|w| w.to_vec()),
                total_weight,
            },
            ng,
        )
    }

    /// KL divergence between diagonal Gaussians, summed over channels and
    /// positions and averaged over the batch.
    pub fn kl_diag(&mut self, q_mu: Var, q_sigma: Var, p_mu: Var, p_sigma: Var) -> Var {
        let s = self.shape(q_mu);
        for v in [q_sigma, p_mu, p_sigma] {
            assert_eq!(self.shape(v), s, "kl_diag shape mismatch");
        }
        let (qm, qs, pm, ps) = (
            self.value(q_mu).data(),
            self.value(q_sigma).data(),
            self.value(p_mu).data(),
            self.value(p_sigma).data(),
        );
        let mut total = T::zero();
        for i in 0..qm.len() {
            total += kl_scalar(qm[i], qs[i], pm[i], ps[i]);
        }
        let value = total / T::lit(s.n as f64);
        let ng = [q_mu, q_sigma, p_mu, p_sigma].iter().any(|&v| self.ng(v));
        self.push(
            Tensor::scalar(value),
            Op::KlDiag {
                q_mu,
                q_sigma,
                p_mu,
                p_sigma,
            },
            ng,
        )
    }

    /// Batch-norm statistics recorded in training mode, in layer order.
    pub fn take_stats_updates(&mut self) -> Vec<BatchStatsUpdate<T>> {
        std::mem::take(&mut self.stats_updates)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(T::one()));

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv { x, w, b } => {
                    let (gi, gw, gb) = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, self.ng(*x));
                    if let Some(gi) = gi {
                        acc(&mut grads, *x, gi);
                    }
                    if self.ng(*w) {
                        acc(&mut grads, *w, gw);
                    }
                    if let Some(b) = b {
                        if self.ng(*b) {
                            acc(&mut grads, *b, gb);
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (gx, gg, gb) =
                        kernels::batch_norm_backward(&g, xhat, inv_std, self.value(*gamma).data(), *batch_stats);
                    if self.ng(*x) {
                        acc(&mut grads, *x, gx);
                    }
                    let cs = Shape::new(gg.len(), 1, 1, 1);
                    if self.ng(*gamma) {
                        acc(&mut grads, *gamma, Tensor::from_vec(cs, gg));
                    }
                    if self.ng(*beta) {
                        acc(&mut grads, *beta, Tensor::from_vec(cs, gb));
                    }
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                    acc(&mut grads, *x, gx);
                }
                Op::Softplus(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, xv| gv * kernels::sigmoid(xv));
                    acc(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.zip_map(self.value(*b), |p, q| p * q));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.zip_map(self.value(*a), |p, q| p * q));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.map(|v| v * c));
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.shape(p).c;
                        if self.ng(p) {
                            acc(&mut grads, p, kernels::slice_channels(&g, start, c));
                        }
                        start += c;
                    }
                }
                Op::AvgPool2(x) => acc(&mut grads, *x, kernels::avg_pool2_backward(&g)),
                Op::Upsample(x, f) => acc(&mut grads, *x, kernels::upsample_backward(&g, *f)),
                Op::SumScalars(parts) => {
                    for &p in parts {
                        if self.ng(p) {
                            acc(&mut grads, p, g.clone());
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                    weights,
                    total_weight,
                } => {
                    if *total_weight <= T::zero() {
                        continue;
                    }
                    let s = probs.shape();
                    let p = s.plane();
                    let upstream = g.item() / *total_weight;
                    let mut gl = probs.clone();
                    {
                        let d = gl.data_mut();
                        for n in 0..s.n {
                            for i in 0..p {
                                let w = weights.as_ref().map(|w| w[n * p + i]).unwrap_or_else(T::one);
                                let t = targets[n * p + i] as usize;
                                for k in 0..s.c {
                                    let j = (n * s.c + k) * p + i;
                                    let onehot = if k == t { T::one() } else { T::zero() };
                                    d[j] = (d[j] - onehot) * w * upstream;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::KlDiag {
                    q_mu,
                    q_sigma,
                    p_mu,
                    p_sigma,
                } => {
                    let n = T::lit(self.shape(*q_mu).n as f64);
                    let up = g.item() / n;
                    let (qm, qs, pm, ps) = (
                        self.value(*q_mu),
                        self.value(*q_sigma),
                        self.value(*p_mu),
                        self.value(*p_sigma),
                    );
                    let len = qm.len();
                    let mut g_qm = vec![T::zero(); len];
                    let mut g_qs = vec![T::zero(); len];
                    let mut g_pm = vec![T::zero(); len];
                    let mut g_ps = vec![T::zero(); len];
                    for i in 0..len {
                        let (a, b) = (qs.data()[i], ps.data()[i]);
                        let d = pm.data()[i] - qm.data()[i];
                        let b2 = b * b;
                        g_qm[i] = -d / b2 * up;
                        g_pm[i] = d / b2 * up;
                        g_qs[i] = (a / b2 - T::one() / a) * up;
                        g_ps[i] = (T::one() / b - (a * a + d * d) / (b2 * b)) * up;
                    }
                    let sh = qm.shape();
                    for (v, gv) in [(*q_mu, g_qm), (*q_sigma, g_qs), (*p_mu, g_pm), (*p_sigma, g_ps)] {
                        if self.ng(v) {
                            acc(&mut grads, v, Tensor::from_vec(sh, gv));
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }

    /// Gradients of the trainable parameters touched by this graph, by id.
    pub fn param_gradients(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.param_leaves
            .iter()
            .map(|leaf| leaf.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, vals.to_vec())
    }

    /// Central differences of `f` w.r.t. each entry of `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut a = x.clone();
                a.data_mut()[i] += h;
                let mut b = x.clone();
                b.data_mut()[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let store = ParamStore::<f64>::new();
        let logits = t(Shape::new(2, 3, 1, 2), &[0.1, -0.3, 2.0, 0.5, -1.0, 0.0, 0.3, 0.2, 0.7, -0.4, 1.1, 0.9]);
        let targets = [0u8, 2, 1, 1];
        let weights = [1.0, 0.5, 0.0, 2.0];
        let f = |l: &Tensor<f64>| {
            let mut g = Graph::new(&store, NormMode::Frozen);
            let v = g.input(l.clone());
            let ce = g.cross_entropy(v, &targets, Some(&weights));
            g.value(ce).item()
        };
        let mut g = Graph::new(&store, NormMode::Frozen);
        let v = g.variable(logits.clone());
        let ce = g.cross_entropy(v, &targets, Some(&weights));
        let grads = g.backward(ce);
        let analytic = grads.get(v).unwrap();
        for (a, n) in analytic.data().iter().zip(numeric_grad(&logits, f)) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }

    #[test]
    fn kl_gradient_matches_differences() {
        let store = ParamStore::<f64>::new();
        let sh = Shape::new(2, 1, 1, 2);
        let base = [
            t(sh, &[0.2, -0.5, 1.0, 0.0]),
            t(sh, &[0.7, 1.3, 0.4, 2.0]),
            t(sh, &[-0.1, 0.3, 0.2, 0.9]),
            t(sh, &[1.1, 0.6, 0.9, 1.5]),
        ];
        let mut g = Graph::new(&store, NormMode::Frozen);
        let vars: Vec<Var> = base.iter().map(|b| g.variable(b.clone())).collect();
        let kl = g.kl_diag(vars[0], vars[1], vars[2], vars[3]);
        let grads = g.backward(kl);
        for which in 0..4 {
            let f = |x: &Tensor<f64>| {
                let mut g = Graph::new(&store, NormMode::Frozen);
                let vs: Vec<Var> = (0..4)
                    .map(|j| g.input(if j == which { x.clone() } else { base[j].clone() }))
                    .collect();
                let kl = g.kl_diag(vs[0], vs[1], vs[2], vs[3]);
                g.value(kl).item()
            };
            let num = numeric_grad(&base[which], f);
            for (a, n) in grads.get(vars[which]).unwrap().data().iter().zip(num) {
                assert!((a - n).abs() < 1e-7, "arg {which}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn batch_norm_train_gradient_matches_differences() {
        let mut store = ParamStore::<f64>::new();
        let gamma = store.add_param("g", t(Shape::new(2, 1, 1, 1), &[1.5, 0.7]));
        let beta = store.add_param("b", t(Shape::new(2, 1, 1, 1), &[0.1, -0.2]));
        let rm = store.add_buffer("rm", Tensor::zeros(Shape::new(2, 1, 1, 1)));
        let rv = store.add_buffer("rv", Tensor::full(Shape::new(2, 1, 1, 1), 1.0));
        let x = Tensor::from_fn(Shape::new(2, 2, 2, 2), |n, c, y, xx| {
            ((n * 7 + c * 3 + y * 5 + xx * 11) % 13) as f64 / 5.0
        });
        let weights = Tensor::from_fn(x.shape(), |n, c, y, xx| ((n + 2 * c + 3 * y + xx) % 5) as f64 - 2.0);
        let targets = [0u8, 1, 1, 0, 1, 0, 0, 1];
        let loss = |g: &mut Graph<f64>, xv: Var| {
            let y = g.batch_norm(xv, gamma, beta, rm, rv);
            let w = g.input(weights.clone());
            let p = g.mul(y, w);
            g.cross_entropy(p, &targets, None)
        };
        let mut g = Graph::new(&store, NormMode::Train);
        let xv = g.variable(x.clone());
        let out = loss(&mut g, xv);
        let grads = g.backward(out);
        let f = |xx: &Tensor<f64>| {
            let mut g = Graph::new(&store, NormMode::Train);
            let xv = g.input(xx.clone());
            let out = loss(&mut g, xv);
            g.value(out).item()
        };
        for (a, n) in grads.get(xv).unwrap().data().iter().zip(numeric_grad(&x, f)) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn frozen_norm_uses_running_statistics() {
        let mut store = ParamStore::<f64>::new();
        let gamma = store.add_param("g", Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
        let beta = store.add_param("b", Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        let rm = store.add_buffer("rm", Tensor::full(Shape::new(1, 1, 1, 1), 3.0));
        let rv = store.add_buffer("rv", Tensor::full(Shape::new(1, 1, 1, 1), 4.0 - 1e-5));
        let mut g = Graph::new(&store, NormMode::Frozen);
        let x = g.input(t(Shape::new(1, 1, 1, 2), &[3.0, 5.0]));
        let y = g.batch_norm(x, gamma, beta, rm, rv);
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!((v[1] - 3.0).abs() < 1e-9);
        assert!(g.take_stats_updates().is_empty());
    }
}
