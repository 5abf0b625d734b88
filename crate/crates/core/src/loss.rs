//! Training objective and bound diagnostics.
//!
//! The loss minimised during training is
//!
//! ```text
//! total = P · CE(s_hat_1, s) + Σ_l alpha_l · KL[q(z_l | z_{l+1}, s, x) || p(z_l | z_{l+1}, x)]
//!       + P · Σ_{l>1} CE(up(s_hat_l), s)
//! ```
//!
//! with every expectation replaced by a single posterior sample and `P` the
//! pixel count of the mask. KL terms are summed over latent positions and
//! channels. The cross-entropy operations return pixel means; the objective
//! multiplies them back up to pixel sums (see [`CeReduction`]), so the
//! reconstruction term is the log-likelihood of the whole mask and sits on
//! the same footing as the summed KL. With [`CeReduction::Mean`] `P` is 1.
//! Everything is averaged over the batch.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{kl_scalar, Graph, NormMode, Var};
use crate::labels::{flatten_targets, one_hot, LabelMap};
use crate::model::{CeReduction, GaussianParams, LatentVars, LogitPyramid, NetworkWeights};
use crate::seed::rng_for;
use crate::tensor::{Scalar, Shape, Tensor};

/// Guard applied inside logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-10;

/// Per-component loss values of one step. The cross-entropy components are
/// recorded as they enter the total, i.e. already reduced per the model's
/// [`CeReduction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_ce: f64,
    /// Per latent level, index `l - 1`; empty for the deterministic baseline.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kl: Vec<f64>,
    /// Deep-supervision terms for levels `2..=L`, index `l - 2`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deep_sup_ce: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes `recon + Σ alpha_l · kl_l + Σ deep_sup`.
    pub fn sum_components(&self, alpha: &[f64]) -> f64 {
        let kl: f64 = self.kl.iter().zip(alpha).map(|(k, a)| a * k).sum();
        self.recon_ce + kl + self.deep_sup_ce.iter().sum::<f64>()
    }
}

/// Loss nodes inside a graph.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub recon: Var,
    pub kl: Vec<Var>,
    pub deep_sup: Vec<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().as_f64();
        LossBreakdown {
            recon_ce: v(self.recon),
            kl: self.kl.iter().map(|&k| v(k)).collect(),
            deep_sup_ce: self.deep_sup.iter().map(|&d| v(d)).collect(),
            total: v(self.total),
        }
    }
}

/// Builds the deep-supervision terms: `CE(up(s_hat_l), s)` for `l >= 2`.
pub fn deep_supervision_graph<T: Scalar>(g: &mut Graph<T>, logits: &[Var], targets: &[u8]) -> Vec<Var> {
    logits
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, &l)| {
            let up = g.upsample(l, 1 << i);
            g.cross_entropy(up, targets, None)
        })
        .collect()
}

/// Builds the training objective. `posterior` and `prior` hold
/// `(mu, sigma)` per level; the prior must have been conditioned on the
/// posterior's latents. Empty parameter lists give a cross-entropy-only
/// loss (the deterministic baseline).
pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    posterior: &[(Var, Var)],
    prior: &[(Var, Var)],
    logits: &[Var],
    targets: &[u8],
    alpha: &[f64],
    reduction: CeReduction,
) -> Result<LossVars> {
    if posterior.len() != prior.len() {
        return Err(Error::Shape(format!(
            "{} posterior levels vs {} prior levels",
            posterior.len(),
            prior.len()
        )));
    }
    if alpha.len() < posterior.len() {
        return Err(Error::Shape(format!("{} alpha weights for {} levels", alpha.len(), posterior.len())));
    }
    if logits.is_empty() {
        return Err(Error::Shape("empty logit pyramid".into()));
    }
    let ce_scale = match reduction {
        CeReduction::Sum => g.shape(logits[0]).plane() as f64,
        CeReduction::Mean => 1.0,
    };
    let reduce = |g: &mut Graph<T>, mean: Var| if ce_scale == 1.0 { mean } else { g.scale(mean, T::lit(ce_scale)) };
    let recon = g.cross_entropy(logits[0], targets, None);
    let recon = reduce(g, recon);
    let mut kl = Vec::with_capacity(posterior.len());
    let mut weighted = Vec::with_capacity(posterior.len());
    for (i, (q, p)) in posterior.iter().zip(prior).enumerate() {
        let k = g.kl_diag(q.0, q.1, p.0, p.1);
        kl.push(k);
        weighted.push(g.scale(k, T::lit(alpha[i])));
    }
    let deep_sup: Vec<Var> = deep_supervision_graph(g, logits, targets)
        .into_iter()
        .map(|d| reduce(g, d))
        .collect();
    let mut parts = vec![recon];
    parts.extend(&weighted);
    parts.extend(&deep_sup);
    let total = g.sum_scalars(&parts);
    Ok(LossVars {
        recon,
        kl,
        deep_sup,
        total,
    })
}

impl LatentVars {
    pub fn pairs(&self) -> Vec<(Var, Var)> {
        self.mu.iter().copied().zip(self.sigma.iter().copied()).collect()
    }
}

fn check_targets(logits: Shape, targets: &[LabelMap]) -> Result<()> {
    if targets.len() != logits.n {
        return Err(Error::Shape(format!("{} targets for logits {logits}", targets.len())));
    }
    for t in targets {
        if (t.height, t.width) != (logits.h, logits.w) {
            return Err(Error::Shape(format!(
                "target {}x{} does not match logits {logits}",
                t.height, t.width
            )));
        }
        t.validate(logits.c)?;
    }
    Ok(())
}

/// KL divergence between two diagonal Gaussians, summed over positions
/// and channels (and averaged over the batch axis, if any).
pub fn kl_diag_gaussian<T: Scalar>(q: &GaussianParams<T>, p: &GaussianParams<T>) -> Result<f64> {
    let shape = q.mu.shape();
    for t in [&q.sigma, &p.mu, &p.sigma] {
        if t.shape() != shape {
            return Err(Error::Shape(format!("KL arguments differ in shape: {shape} vs {}", t.shape())));
        }
    }
    if q.sigma.data().iter().chain(p.sigma.data()).any(|&s| !(s > T::zero())) {
        return Err(Error::InvalidInput("KL needs strictly positive sigmas".into()));
    }
    let total: f64 = (0..q.mu.len())
        .map(|i| {
            kl_scalar(
                q.mu.data()[i].as_f64(),
                q.sigma.data()[i].as_f64(),
                p.mu.data()[i].as_f64(),
                p.sigma.data()[i].as_f64(),
            )
        })
        .sum();
    Ok(total / shape.n as f64)
}

/// Mean (optionally weighted) pixel cross entropy of `logits` `(n, K, h, w)`
/// against one label map per batch item.
pub fn categorical_ce<T: Scalar>(logits: &Tensor<T>, targets: &[LabelMap], weights: Option<&[f64]>) -> Result<f64> {
    check_targets(logits.shape(), targets)?;
    let flat = flatten_targets(targets);
    if let Some(w) = weights {
        if w.len() != flat.len() {
            return Err(Error::Shape(format!("{} weights for {} pixels", w.len(), flat.len())));
        }
    }
    let store = crate::params::ParamStore::<T>::new();
    let mut g = Graph::new(&store, NormMode::Frozen);
    let v = g.input(logits.clone());
    let wt: Option<Vec<T>> = weights.map(|w| w.iter().map(|&x| T::lit(x)).collect());
    let ce = g.cross_entropy(v, &flat, wt.as_deref());
    Ok(g.value(ce).item().as_f64())
}

/// `CE(up(s_hat_l), s)` for `l = 2..=L`, upsampling by `2^(l-1)`.
pub fn deep_supervision_loss<T: Scalar>(pyr: &LogitPyramid<T>, s_gt: &[LabelMap]) -> Result<Vec<f64>> {
    let Some(first) = pyr.s_hat.first() else {
        return Err(Error::Shape("empty logit pyramid".into()));
    };
    check_targets(first.shape(), s_gt)?;
    let flat = flatten_targets(s_gt);
    let store = crate::params::ParamStore::<T>::new();
    let mut g = Graph::new(&store, NormMode::Frozen);
    let vars: Vec<Var> = pyr.s_hat.iter().map(|t| g.input(t.clone())).collect();
    for (i, &v) in vars.iter().enumerate() {
        let s = g.shape(v);
        let f = 1 << i;
        if s.h * f != first.shape().h || s.w * f != first.shape().w {
            return Err(Error::Shape(format!("pyramid level {} has shape {s}", i + 1)));
        }
    }
    let terms = deep_supervision_graph(&mut g, &vars, &flat);
    Ok(terms.iter().map(|&t| g.value(t).item().as_f64()).collect())
}

/// Value-level version of [`total_loss_graph`].
pub fn total_loss<T: Scalar>(
    posterior: &[GaussianParams<T>],
    prior: &[GaussianParams<T>],
    pyr: &LogitPyramid<T>,
    s_gt: &[LabelMap],
    alpha: &[f64],
    reduction: CeReduction,
) -> Result<LossBreakdown> {
    if posterior.len() != prior.len() {
        return Err(Error::Shape(format!(
            "{} posterior levels vs {} prior levels",
            posterior.len(),
            prior.len()
        )));
    }
    let Some(first) = pyr.s_hat.first() else {
        return Err(Error::Shape("empty logit pyramid".into()));
    };
    check_targets(first.shape(), s_gt)?;
    for (q, p) in posterior.iter().zip(prior) {
        if q.mu.shape() != p.mu.shape() {
            return Err(Error::Shape(format!("level {} posterior/prior shapes differ", q.level)));
        }
    }
    let flat = flatten_targets(s_gt);
    let store = crate::params::ParamStore::<T>::new();
    let mut g = Graph::new(&store, NormMode::Frozen);
    let mut pairs = |ps: &[GaussianParams<T>]| -> Vec<(Var, Var)> {
        ps.iter()
            .map(|p| (g.input(p.mu.clone()), g.input(p.sigma.clone())))
            .collect()
    };
    let q = pairs(posterior);
    let p = pairs(prior);
    let logits: Vec<Var> = pyr.s_hat.iter().map(|t| g.input(t.clone())).collect();
    let vars = total_loss_graph(&mut g, &q, &p, &logits, &flat, alpha, reduction)?;
    Ok(vars.breakdown(&g))
}

/// One-dimensional linear-Gaussian chain
/// `z_L ~ N(top_mean, top_var)`, `z_l | z_{l+1} ~ N(coef_l z_{l+1} + offset_l, var_l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianChain {
    pub top_mean: f64,
    pub top_var: f64,
    /// Index `l - 1` for `l = 1..L-1`.
    pub coef: Vec<f64>,
    pub offset: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianChain {
    pub fn levels(&self) -> usize {
        self.coef.len() + 1
    }

    fn validate(&self) -> Result<()> {
        if self.offset.len() != self.coef.len() || self.var.len() != self.coef.len() {
            return Err(Error::InvalidInput("chain coefficient lists differ in length".into()));
        }
        if !(self.top_var > 0.0) || self.var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidInput("chain variances must be positive".into()));
        }
        Ok(())
    }

    /// Joint mean and covariance of `(z_1, ..., z_L)`.
    pub fn joint(&self) -> (DVector<f64>, DMatrix<f64>) {
        let l = self.levels();
        // z = A z + b + e with A[l-1][l] = coef_l; solve (I - A) z = b + e.
        let mut a = DMatrix::<f64>::identity(l, l);
        let mut b = DVector::<f64>::zeros(l);
        let mut v = DMatrix::<f64>::zeros(l, l);
        for i in 0..l - 1 {
            a[(i, i + 1)] = -self.coef[i];
            b[i] = self.offset[i];
            v[(i, i)] = self.var[i];
        }
        b[l - 1] = self.top_mean;
        v[(l - 1, l - 1)] = self.top_var;
        let inv = a.try_inverse().expect("unit triangular matrix is invertible");
        let mean = &inv * b;
        let cov = &inv * v * inv.transpose();
        (mean, cov)
    }
}

/// Pair of chains `q` (approximate posterior) and `p` (prior).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianChainSpec {
    pub q: GaussianChain,
    pub p: GaussianChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainKlReport {
    /// KL between the joint Gaussians.
    pub lhs: f64,
    /// Top-level KL plus expected conditional KLs.
    pub rhs: f64,
    pub abs_diff: f64,
}

fn kl_mvn(mq: &DVector<f64>, cq: &DMatrix<f64>, mp: &DVector<f64>, cp: &DMatrix<f64>) -> f64 {
    let k = mq.len() as f64;
    let chol_p = cp.clone().cholesky().expect("positive definite covariance");
    let chol_q = cq.clone().cholesky().expect("positive definite covariance");
    let p_inv = chol_p.inverse();
    let d = mp - mq;
    let trace = (&p_inv * cq).trace();
    let quad = (d.transpose() * &p_inv * &d)[(0, 0)];
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
    0.5 * (trace + quad - k + logdet(&chol_p.l()) - logdet(&chol_q.l()))
}

/// Checks that the joint KL equals the level-wise decomposition used by
/// the training objective. Supports up to four levels.
pub fn verify_kl_chain_decomposition(spec: &LinearGaussianChainSpec) -> Result<ChainKlReport> {
    spec.q.validate()?;
    spec.p.validate()?;
    let l = spec.q.levels();
    if spec.p.levels() != l {
        return Err(Error::InvalidInput("chains differ in depth".into()));
    }
    if !(1..=4).contains(&l) {
        return Err(Error::InvalidInput(format!("chain depth {l} outside 1..=4")));
    }

    let (mq, cq) = spec.q.joint();
    let (mp, cp) = spec.p.joint();
    let lhs = kl_mvn(&mq, &cq, &mp, &cp);

    let kl1 = |m1: f64, v1: f64, m2: f64, v2: f64| 0.5 * (v1 / v2 + (m2 - m1).powi(2) / v2 - 1.0 + v2.ln() - v1.ln());
    let mut rhs = kl1(spec.q.top_mean, spec.q.top_var, spec.p.top_mean, spec.p.top_var);
    // Marginal of q(z_{l+1}), walking down from the top.
    let (mut m, mut v) = (spec.q.top_mean, spec.q.top_var);
    for i in (0..l - 1).rev() {
        let (q, p) = (&spec.q, &spec.p);
        // Mean difference (p - q) is linear in z: c z + d.
        let c = p.coef[i] - q.coef[i];
        let d = p.offset[i] - q.offset[i];
        let e_sq = c * c * (v + m * m) + 2.0 * c * d * m + d * d;
        rhs += 0.5 * (q.var[i] / p.var[i] + e_sq / p.var[i] - 1.0 + p.var[i].ln() - q.var[i].ln());
        m = q.coef[i] * m + q.offset[i];
        v = q.coef[i] * q.coef[i] * v + q.var[i];
    }
    Ok(ChainKlReport {
        lhs,
        rhs,
        abs_diff: (lhs - rhs).abs(),
    })
}

fn gaussian_log_density_sum<T: Scalar>(z: &Tensor<T>, mu: &Tensor<T>, sigma: &Tensor<T>, item: usize) -> f64 {
    let per = z.len() / z.shape().n;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    (item * per..(item + 1) * per)
        .map(|i| {
            let (zv, m, s) = (z.data()[i].as_f64(), mu.data()[i].as_f64(), sigma.data()[i].as_f64());
            let u = (zv - m) / s;
            -half_ln_2pi - s.ln() - 0.5 * u * u
        })
        .sum()
}

/// `Σ_pixels ln softmax(logits)[target]` for one batch item.
fn log_likelihood<T: Scalar>(logits: &Tensor<T>, target: &LabelMap, item: usize) -> f64 {
    let s = logits.shape();
    let p = s.plane();
    (0..p)
        .map(|i| {
            let vals: Vec<f64> = (0..s.c).map(|k| logits.data()[(item * s.c + k) * p + i].as_f64()).collect();
            let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            vals[target.data[i] as usize] - lse
        })
        .sum()
}

/// Per-sample log importance weights
/// `ln p(s|z) + ln p(z|x) - ln q(z|s,x)` for `k` posterior samples.
/// Sample `j` uses noise seeded by `(seed, j)`.
pub fn log_importance_weights<T: Scalar>(
    w: &NetworkWeights<T>,
    x: &Tensor<T>,
    s: &LabelMap,
    k: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if k < 1 {
        return Err(Error::InvalidInput("importance sample count must be at least 1".into()));
    }
    if x.shape().n != 1 {
        return Err(Error::Shape("importance weighting takes a single image".into()));
    }
    let cfg = w.config();
    let mut weights = Vec::with_capacity(k);
    const CHUNK: usize = 16;
    let mut start = 0;
    while start < k {
        let n = CHUNK.min(k - start);
        let noise: Vec<Tensor<T>> = {
            let per_sample: Vec<Vec<Tensor<T>>> = (start..start + n)
                .map(|j| sample_noise(cfg.latent_shapes(1), &mut rng_for(seed, &[j as u64])))
                .collect();
            (0..cfg.latent_levels)
                .map(|l| {
                    let parts: Vec<Tensor<T>> = per_sample.iter().map(|ps| ps[l].clone()).collect();
                    Tensor::stack_batch(&parts)
                })
                .collect()
        };
        let masks = vec![s.clone(); n];
        let mut g = Graph::new(w.store(), NormMode::Frozen);
        let xv = g.input(x.repeat_batch(n));
        let mv = g.input(one_hot(&masks, cfg.classes)?);
        let q = w.posterior_graph(&mut g, xv, mv, &noise)?;
        let inj: Vec<Option<Var>> = q.z.iter().map(|&z| Some(z)).collect();
        let p = w.prior_graph(&mut g, xv, &[], &inj)?;
        let logits = w.likelihood_graph(&mut g, &q.z)?;
        for item in 0..n {
            let mut lw = log_likelihood(g.value(logits[0]), s, item);
            for lvl in 0..cfg.latent_levels {
                let z = g.value(q.z[lvl]);
                lw += gaussian_log_density_sum(z, g.value(p.mu[lvl]), g.value(p.sigma[lvl]), item);
                lw -= gaussian_log_density_sum(z, g.value(q.mu[lvl]), g.value(q.sigma[lvl]), item);
            }
            weights.push(lw);
        }
        start += n;
    }
    Ok(weights)
}

/// `ln mean exp(v)`, computed stably.
pub fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Importance-weighted estimate of `ln p(s|x)` from `k` posterior samples.
/// With `k = 1` this is the single-sample ELBO estimate.
pub fn importance_weighted_logp_estimate<T: Scalar>(
    w: &NetworkWeights<T>,
    x: &Tensor<T>,
    s: &LabelMap,
    k: usize,
    seed: u64,
) -> Result<f64> {
    Ok(log_mean_exp(&log_importance_weights(w, x, s, k, seed)?))
}

/// Standard-normal noise for each latent shape.
pub fn sample_noise<T: Scalar, R: rand::Rng>(shapes: Vec<Shape>, rng: &mut R) -> Vec<Tensor<T>> {
    shapes
        .into_iter()
        .map(|s| {
            Tensor::from_fn(s, |_, _, _, _| {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                T::lit(v)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(mu: f64, sigma: f64) -> GaussianParams<f64> {
        GaussianParams::new(Tensor::scalar(mu), Tensor::scalar(sigma), 1).unwrap()
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let q = GaussianParams::new(
            Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![0.3, -1.0, 2.0, 0.1]),
            Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![0.5, 1.0, 2.0, 0.01]),
            1,
        )
        .unwrap();
        assert_eq!(kl_diag_gaussian(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let kl = kl_diag_gaussian(&scalar_params(1.0, 1.0), &scalar_params(0.0, 1.0)).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_bad_sigma() {
        let mut bad = scalar_params(0.0, 1.0);
        bad.sigma = Tensor::scalar(-1.0);
        assert!(kl_diag_gaussian(&bad, &scalar_params(0.0, 1.0)).is_err());
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3));
        let t = LabelMap::new(3, 3, vec![0, 1, 1, 0, 0, 1, 0, 1, 0]).unwrap();
        let ce = categorical_ce(&logits, &[t], None).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_give_tiny_ce() {
        let t = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let logits = Tensor::<f64>::from_fn(Shape::new(1, 3, 2, 2), |_, k, y, x| {
            if t.get(y, x) as usize == k { 20.0 } else { 0.0 }
        });
        assert!(categorical_ce(&logits, &[t], None).unwrap() < 1e-8);
    }

    #[test]
    fn ce_matches_hand_enumeration() {
        // Four pixels, three classes.
        let vals = [
            [0.2, -1.3, 0.7],
            [1.5, 0.0, -0.4],
            [-0.9, 2.2, 0.1],
            [0.0, 0.3, 0.3],
        ];
        let targets = [2u8, 0, 1, 1];
        let logits = Tensor::<f64>::from_fn(Shape::new(1, 3, 2, 2), |_, k, y, x| vals[y * 2 + x][k]);
        let mut expect = 0.0;
        for (v, &t) in vals.iter().zip(&targets) {
            let z: f64 = v.iter().map(|a| a.exp()).sum();
            expect += -(v[t as usize].exp() / z).ln();
        }
        expect /= 4.0;
        let got = categorical_ce(&logits, &[LabelMap::new(2, 2, targets.to_vec()).unwrap()], None).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn weighted_ce_ignores_masked_pixels() {
        let logits = Tensor::<f64>::from_vec(Shape::new(1, 2, 1, 2), vec![5.0, 0.0, 0.0, 0.0]);
        let t = LabelMap::new(1, 2, vec![1, 1]).unwrap();
        let ce = categorical_ce(&logits, &[t], Some(&[0.0, 1.0])).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_out_of_range_target() {
        let logits = Tensor::<f64>::zeros(Shape::new(1, 2, 1, 1));
        assert!(categorical_ce(&logits, &[LabelMap::new(1, 1, vec![2]).unwrap()], None).is_err());
    }

    #[test]
    fn single_level_pyramid_has_no_deep_supervision() {
        let pyr = LogitPyramid {
            s_hat: vec![Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4))],
        };
        assert!(deep_supervision_loss(&pyr, &[LabelMap::filled(4, 4, 0)]).unwrap().is_empty());
    }

    #[test]
    fn deep_supervision_matches_manual_upsampling() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) % 1000) as f64 / 250.0 - 2.0
        };
        let fine = Tensor::<f64>::from_fn(Shape::new(1, 2, 8, 8), |_, _, _, _| next());
        let coarse = Tensor::<f64>::from_fn(Shape::new(1, 2, 4, 4), |_, _, _, _| next());
        let gt = LabelMap::new(8, 8, (0..64).map(|i| ((i * 7) % 3 == 0) as u8).collect()).unwrap();
        let pyr = LogitPyramid {
            s_hat: vec![fine, coarse.clone()],
        };
        let ds = deep_supervision_loss(&pyr, std::slice::from_ref(&gt)).unwrap();
        // Independent route: copy each coarse logit into its 2x2 block by hand.
        let mut manual = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let a = coarse.at(0, 0, y / 2, x / 2);
                let b = coarse.at(0, 1, y / 2, x / 2);
                let t = gt.get(y, x);
                let chosen = if t == 0 { a } else { b };
                manual += -(chosen - (a.exp() + b.exp()).ln());
            }
        }
        manual /= 64.0;
        assert_eq!(ds.len(), 1);
        assert!((ds[0] - manual).abs() < 1e-12);
    }

    #[test]
    fn confident_coarse_level_has_tiny_deep_supervision() {
        let gt = LabelMap::filled(4, 4, 1);
        let coarse = Tensor::<f64>::from_fn(Shape::new(1, 2, 2, 2), |_, k, _, _| if k == 1 { 20.0 } else { 0.0 });
        let pyr = LogitPyramid {
            s_hat: vec![Tensor::zeros(Shape::new(1, 2, 4, 4)), coarse],
        };
        assert!(deep_supervision_loss(&pyr, &[gt]).unwrap()[0] < 1e-8);
    }

    #[test]
    fn identical_chains_decompose_to_zero() {
        let c = GaussianChain {
            top_mean: 0.4,
            top_var: 1.3,
            coef: vec![0.5, -1.2],
            offset: vec![0.1, 0.0],
            var: vec![0.7, 2.0],
        };
        let r = verify_kl_chain_decomposition(&LinearGaussianChainSpec { q: c.clone(), p: c }).unwrap();
        assert!(r.lhs.abs() < 1e-12 && r.rhs.abs() < 1e-12);
    }

    #[test]
    fn chain_rejects_nonpositive_variance() {
        let c = GaussianChain {
            top_mean: 0.0,
            top_var: 1.0,
            coef: vec![1.0],
            offset: vec![0.0],
            var: vec![0.0],
        };
        assert!(verify_kl_chain_decomposition(&LinearGaussianChainSpec { q: c.clone(), p: c }).is_err());
    }

    #[test]
    fn log_mean_exp_is_stable() {
        assert!((log_mean_exp(&[1000.0, 1000.0]) - 1000.0).abs() < 1e-12);
        assert!((log_mean_exp(&[0.0, 2f64.ln()]) - 1.5f64.ln()).abs() < 1e-12);
    }
}
