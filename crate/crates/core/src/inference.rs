//! Test-time sampling through the prior and likelihood networks, mean
//! predictions and γ uncertainty maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::{self, Cursor};
use crate::graph::{Graph, NormMode};
use crate::kernels::softmax_channels;
use crate::labels::LabelMap;
use crate::loss::sample_noise;
use crate::model::NetworkWeights;
use crate::seed::rng_for;
use crate::tensor::{Scalar, Tensor};

/// Guard inside `ln` for probabilities that may be exactly zero.
pub const EPS_LOG: f64 = 1e-8;

/// Samples decoded in one forward batch.
const SAMPLE_CHUNK: usize = 16;

pub const SAMPLE_SET_MAGIC: &[u8; 8] = b"PHISEGSS";
pub const SAMPLE_SET_VERSION: u32 = 1;

/// `N` segmentation samples of one image. Probabilities are stored per
/// sample in class-planar order `(K, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    pub probs: Vec<Vec<f32>>,
    pub labels: Vec<LabelMap>,
}

/// Index of the largest value; ties go to the lower index.
fn argmax<I: Iterator<Item = f64>>(values: I) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

impl SampleSet {
    /// Builds a set from probabilities, deriving the labels by argmax.
    pub fn from_probs(height: usize, width: usize, classes: usize, seed: u64, probs: Vec<Vec<f32>>) -> Result<Self> {
        let p = height * width;
        if probs.is_empty() {
            return Err(Error::InvalidInput("a sample set needs at least one sample".into()));
        }
        let mut labels = Vec::with_capacity(probs.len());
        for pr in &probs {
            if pr.len() != classes * p {
                return Err(Error::Shape(format!(
                    "sample has {} probabilities, expected {}",
                    pr.len(),
                    classes * p
                )));
            }
            let data = (0..p)
                .map(|i| argmax((0..classes).map(|k| pr[k * p + i] as f64)) as u8)
                .collect();
            labels.push(LabelMap::new(height, width, data)?);
        }
        Ok(Self {
            height,
            width,
            classes,
            seed,
            probs,
            labels,
        })
    }

    /// Builds a set of hard samples; probabilities are their one-hot codes.
    pub fn from_labels(classes: usize, seed: u64, labels: Vec<LabelMap>) -> Result<Self> {
        let Some(first) = labels.first() else {
            return Err(Error::InvalidInput("a sample set needs at least one sample".into()));
        };
        let (h, w) = (first.height, first.width);
        let mut probs = Vec::with_capacity(labels.len());
        for l in &labels {
            if (l.height, l.width) != (h, w) {
                return Err(Error::Shape("samples differ in size".into()));
            }
            l.validate(classes)?;
            let mut p = vec![0f32; classes * h * w];
            for (i, &c) in l.data.iter().enumerate() {
                p[c as usize * h * w + i] = 1.0;
            }
            probs.push(p);
        }
        Ok(Self {
            height: h,
            width: w,
            classes,
            seed,
            probs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Probability of class `k` at flat pixel `i` in sample `n`.
    #[inline]
    pub fn prob(&self, n: usize, k: usize, i: usize) -> f32 {
        self.probs[n][k * self.pixels() + i]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = self.pixels();
        let mut out = Vec::with_capacity(40 + self.len() * p * (1 + 4 * self.classes));
        out.extend_from_slice(SAMPLE_SET_MAGIC);
        out.extend_from_slice(&SAMPLE_SET_VERSION.to_le_bytes());
        for v in [self.len(), self.height, self.width, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&l.data);
        }
        for pr in &self.probs {
            out.extend_from_slice(&f32::to_le_bytes_vec(pr));
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(path, bytes);
        if cur.take(8)? != SAMPLE_SET_MAGIC {
            return Err(Error::format(path, "not a sample set (bad magic)"));
        }
        let version = cur.u32()?;
        if version != SAMPLE_SET_VERSION {
            return Err(Error::format(path, format!("unsupported sample set version {version}")));
        }
        let n = cur.u32()? as usize;
        let h = cur.u32()? as usize;
        let w = cur.u32()? as usize;
        let k = cur.u32()? as usize;
        let seed = cur.u64()?;
        if n == 0 || k < 2 {
            return Err(Error::format(path, "empty sample set or fewer than two classes"));
        }
        let p = h * w;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let l = LabelMap::new(h, w, cur.take(p)?.to_vec())?;
            l.validate(k).map_err(|e| Error::format(path, e.to_string()))?;
            labels.push(l);
        }
        let mut probs = Vec::with_capacity(n);
        for _ in 0..n {
            probs.push(cur.take(4 * k * p)?.chunks_exact(4).map(f32::from_le_chunk).collect());
        }
        cur.expect_end()?;
        Ok(Self {
            height: h,
            width: w,
            classes: k,
            seed,
            probs,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &fsio::read(path)?)
    }
}

/// Draws `n` samples for a single image `x` `(1, C, h, w)` through the
/// prior and likelihood networks with frozen normalization. Sample `j`
/// uses noise seeded by `(seed, j)`, so a set is reproducible and its
/// prefixes agree across different `n`.
pub fn draw_samples<T: Scalar>(w: &NetworkWeights<T>, x: &Tensor<T>, n: usize, seed: u64) -> Result<SampleSet> {
    if n < 1 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    let cfg = w.config();
    if x.shape().n != 1 {
        return Err(Error::Shape("draw_samples takes a single image".into()));
    }
    let (h, wd, k) = (cfg.height, cfg.width, cfg.classes);
    let to_probs = |logits: &Tensor<T>, item: usize| -> Vec<f32> {
        let p = softmax_channels(&logits.narrow_batch(item, 1));
        p.data().iter().map(|v| v.as_f64() as f32).collect()
    };
    if w.is_deterministic() {
        let mut g = Graph::new(w.store(), NormMode::Frozen);
        let xv = g.input(x.clone());
        let out = w.deterministic_graph(&mut g, xv)?;
        let probs = to_probs(g.value(out), 0);
        return SampleSet::from_probs(h, wd, k, seed, vec![probs; n]);
    }
    let mut probs = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let m = SAMPLE_CHUNK.min(n - start);
        let per: Vec<Vec<Tensor<T>>> = (start..start + m)
            .map(|j| sample_noise(cfg.latent_shapes(1), &mut rng_for(seed, &[j as u64])))
            .collect();
        let noise: Vec<Tensor<T>> = (0..cfg.latent_levels)
            .map(|l| Tensor::stack_batch(&per.iter().map(|p| p[l].clone()).collect::<Vec<_>>()))
            .collect();
        let mut g = Graph::new(w.store(), NormMode::Frozen);
        let xv = g.input(x.repeat_batch(m));
        let prior = w.prior_graph(&mut g, xv, &noise, &[])?;
        let logits = w.likelihood_graph(&mut g, &prior.z)?;
        let l1 = g.value(logits[0]);
        for item in 0..m {
            probs.push(to_probs(l1, item));
        }
        start += m;
    }
    SampleSet::from_probs(h, wd, k, seed, probs)
}

/// Real-valued map over the image grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} grid",
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-pixel expected cross entropy between the mean segmentation and
/// the samples.
pub type GammaMap = ScalarGrid;

/// Pixelwise mean of the sample probabilities and its argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPrediction {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Class-planar `(K, h, w)`.
    pub probs: Vec<f64>,
    pub labels: LabelMap,
}

pub fn mean_prediction(ss: &SampleSet) -> Result<MeanPrediction> {
    if ss.is_empty() {
        return Err(Error::InvalidInput("mean of an empty sample set".into()));
    }
    let p = ss.pixels();
    let mut probs = vec![0f64; ss.classes * p];
    for pr in &ss.probs {
        for (acc, &v) in probs.iter_mut().zip(pr) {
            *acc += v as f64;
        }
    }
    let inv = 1.0 / ss.len() as f64;
    probs.iter_mut().for_each(|v| *v *= inv);
    let data = (0..p)
        .map(|i| argmax((0..ss.classes).map(|k| probs[k * p + i])) as u8)
        .collect();
    Ok(MeanPrediction {
        height: ss.height,
        width: ss.width,
        classes: ss.classes,
        probs,
        labels: LabelMap::new(ss.height, ss.width, data)?,
    })
}

/// Per-pixel hard-label class frequencies, class-planar.
pub fn label_frequencies(ss: &SampleSet) -> Vec<f64> {
    let p = ss.pixels();
    let mut freq = vec![0f64; ss.classes * p];
    for l in &ss.labels {
        for (i, &c) in l.data.iter().enumerate() {
            freq[c as usize * p + i] += 1.0;
        }
    }
    let inv = 1.0 / ss.len().max(1) as f64;
    freq.iter_mut().for_each(|v| *v *= inv);
    freq
}

/// `γ_i = (1/N) Σ_n −ln(f[s_n,i] + ε)` where `f` are the hard-label
/// frequencies; clamped at zero.
pub fn gamma_map(ss: &SampleSet) -> GammaMap {
    let p = ss.pixels();
    let freq = label_frequencies(ss);
    let values = (0..p)
        .map(|i| {
            let g: f64 = (0..ss.classes)
                .map(|k| {
                    let f = freq[k * p + i];
                    if f > 0.0 { -f * (f + EPS_LOG).ln() } else { 0.0 }
                })
                .sum();
            g.max(0.0)
        })
        .collect();
    ScalarGrid {
        height: ss.height,
        width: ss.width,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(argmax([0.5, 0.5].into_iter()), 0);
        assert_eq!(argmax([0.2, 0.4, 0.4].into_iter()), 1);
    }

    #[test]
    fn tie_goes_to_class_zero() {
        let ss = SampleSet::from_probs(1, 1, 2, 0, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = mean_prediction(&ss).unwrap();
        assert_eq!(m.probs, vec![0.5, 0.5]);
        assert_eq!(m.labels.data, vec![0]);
    }

    #[test]
    fn gamma_of_even_split_is_ln2() {
        let a = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let b = LabelMap::new(1, 2, vec![1, 1]).unwrap();
        let ss = SampleSet::from_labels(2, 0, vec![a, b]).unwrap();
        let g = gamma_map(&ss);
        assert!((g.values[0] - 2f64.ln()).abs() < 1e-7);
        assert_eq!(g.values[1], 0.0);
    }

    #[test]
    fn bytes_round_trip() {
        let ss = SampleSet::from_probs(1, 2, 2, 42, vec![vec![0.25, 0.9, 0.75, 0.1]]).unwrap();
        let back = SampleSet::from_bytes(Path::new("mem"), &ss.to_bytes()).unwrap();
        assert_eq!(back, ss);
        assert_eq!(back.labels[0].data, vec![1, 0]);
    }
}
