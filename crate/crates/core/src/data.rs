//! Synthetic multi-annotator segmentation benchmark.
//!
//! Each case holds a smooth scalar field: an elliptical bump plus blurred
//! noise. The image is the field plus white noise, standardized per case.
//! Annotator `m` thresholds the field at `threshold + offset_m * step`,
//! dilates (positive radius) or erodes (negative radius) the result with a
//! disk, and with probability `omission_m` leaves the structure out
//! entirely. Every value is a pure function of the master seed, the case
//! index and the annotator index.
//!
//! On disk a dataset is a directory holding `manifest.json` and, per case,
//! `cases/<id>/image.f32` (little-endian `f32`, channel-first row-major)
//! and `cases/<id>/ann_<m>.u8` (row-major class indices).

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::labels::{Image, LabelMap};
use crate::seed::rng_for;
use crate::tensor::Scalar;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// How one simulated rater deviates from the reference contour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatorStyle {
    /// Threshold shift in units of [`SynthSpec::threshold_step`].
    pub threshold_offset: f64,
    /// Disk radius in pixels; positive dilates, negative erodes.
    pub radius_offset: i32,
    /// Probability of annotating the case as empty.
    pub omission_prob: f64,
}

impl AnnotatorStyle {
    pub fn neutral() -> Self {
        Self {
            threshold_offset: 0.0,
            radius_offset: 0,
            omission_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub cases: usize,
    pub height: usize,
    pub width: usize,
    /// Number of classes `K`; class `k` covers field values above the
    /// `k`-th threshold.
    pub classes: usize,
    pub annotators: Vec<AnnotatorStyle>,
    /// Field level of the reference contour.
    pub threshold: f64,
    pub threshold_step: f64,
    /// Field spacing between consecutive class thresholds when `K > 2`.
    pub class_gap: f64,
    /// Amplitude of the blurred noise added to the field.
    pub field_noise: f64,
    /// Gaussian blur scale of that noise, in pixels.
    pub blur_sigma: f64,
    /// Amplitude of the white noise in the image.
    pub image_noise: f64,
    /// Range of the bump's semi-axes, in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            cases: 300,
            height: 64,
            width: 64,
            classes: 2,
            annotators: vec![
                AnnotatorStyle::neutral(),
                AnnotatorStyle {
                    threshold_offset: 1.0,
                    radius_offset: 0,
                    omission_prob: 0.1,
                },
                AnnotatorStyle {
                    threshold_offset: -1.0,
                    radius_offset: 1,
                    omission_prob: 0.0,
                },
                AnnotatorStyle {
                    threshold_offset: 2.0,
                    radius_offset: -1,
                    omission_prob: 0.3,
                },
            ],
            threshold: 0.5,
            threshold_step: 0.12,
            class_gap: 0.25,
            field_noise: 0.25,
            blur_sigma: 3.0,
            image_noise: 0.3,
            min_radius: 6.0,
            max_radius: 14.0,
            split: [0.6, 0.2, 0.2],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.cases == 0 || self.height == 0 || self.width == 0 {
            return bad("cases, height and width must be positive".into());
        }
        if !(2..=256).contains(&self.classes) {
            return bad(format!("classes must be in [2, 256], got {}", self.classes));
        }
        if self.annotators.is_empty() {
            return bad("at least one annotator style is required".into());
        }
        for (m, a) in self.annotators.iter().enumerate() {
            if !(0.0..=1.0).contains(&a.omission_prob) {
                return bad(format!("annotator {m}: omission_prob {} outside [0, 1]", a.omission_prob));
            }
            if !a.threshold_offset.is_finite() {
                return bad(format!("annotator {m}: threshold_offset must be finite"));
            }
        }
        if !(self.min_radius > 0.0 && self.max_radius >= self.min_radius) {
            return bad("need 0 < min_radius <= max_radius".into());
        }
        if !(self.blur_sigma >= 0.0 && self.field_noise >= 0.0 && self.image_noise >= 0.0) {
            return bad("noise and blur parameters must be non-negative".into());
        }
        check_ratios(self.split)
    }

    /// Errors unless both image sides are divisible by `2^(levels-1)`.
    pub fn check_levels(&self, levels: usize) -> Result<()> {
        let f = 1usize << levels.saturating_sub(1);
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::InvalidConfig(format!(
                "image size {}x{} not divisible by 2^(R-1) = {f}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

fn check_ratios(r: [f64; 3]) -> Result<()> {
    if r.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split ratios {r:?} must be in [0, 1] and sum to 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Image,
    pub annotations: Vec<LabelMap>,
    pub split: Split,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:04}")
}

/// Separable Gaussian blur with clamped borders.
fn gaussian_blur(values: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, d) in (-r..=r).enumerate() {
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                    };
                    s += kernel[k] * src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = s / norm;
            }
        }
        out
    };
    pass(&pass(values, true), false)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// The latent scalar field of case `index`.
fn case_field(spec: &SynthSpec, index: usize) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = rng_for(spec.seed, &[index as u64, 0]);
    let cy = h as f64 * rng.random_range(0.3..0.7);
    let cx = w as f64 * rng.random_range(0.3..0.7);
    let ry = rng.random_range(spec.min_radius..=spec.max_radius);
    let rx = rng.random_range(spec.min_radius..=spec.max_radius);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();

    let mut noise_rng = rng_for(spec.seed, &[index as u64, 1]);
    let white: Vec<f64> = (0..h * w).map(|_| normal(&mut noise_rng)).collect();
    let mut smooth = gaussian_blur(&white, h, w, spec.blur_sigma);
    let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
    let sd = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / smooth.len() as f64).sqrt();
    if sd > 0.0 {
        smooth.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }

    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 + 0.5 - cy, (i % w) as f64 + 0.5 - cx);
            let u = (c * x + s * y) / rx;
            let v = (-s * x + c * y) / ry;
            (-0.5 * (u * u + v * v)).exp() + spec.field_noise * smooth[i]
        })
        .collect()
}

/// Disk dilation (`radius > 0`) or erosion (`radius < 0`) of a binary mask.
fn morph(mask: &[bool], h: usize, w: usize, radius: i32) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let r = radius.unsigned_abs() as isize;
    let dilate = radius > 0;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            let hit = |&(dy, dx): &(isize, isize)| {
                let (yy, xx) = (y + dy, x + dx);
                // Outside the image counts as background.
                yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize && mask[yy as usize * w + xx as usize]
            };
            if dilate {
                offsets.iter().any(hit)
            } else {
                offsets.iter().all(hit)
            }
        })
        .collect()
}

fn annotate(spec: &SynthSpec, field: &[f64], index: usize, m: usize) -> LabelMap {
    let (h, w) = (spec.height, spec.width);
    let style = &spec.annotators[m];
    let mut rng = rng_for(spec.seed, &[index as u64, 10 + m as u64]);
    let omitted = rng.random::<f64>() < style.omission_prob;
    let mut labels = vec![0u8; h * w];
    if !omitted {
        let base = spec.threshold + style.threshold_offset * spec.threshold_step;
        for k in 1..spec.classes {
            let t = base + (k - 1) as f64 * spec.class_gap;
            let level: Vec<bool> = field.iter().map(|&v| v > t).collect();
            for (l, on) in labels.iter_mut().zip(morph(&level, h, w, style.radius_offset)) {
                *l += on as u8;
            }
        }
    }
    LabelMap::new(h, w, labels).expect("sized by construction")
}

fn case_image(spec: &SynthSpec, field: &[f64], index: usize) -> Image {
    let mut rng = rng_for(spec.seed, &[index as u64, 2]);
    let raw: Vec<f64> = field.iter().map(|&v| v + spec.image_noise * normal(&mut rng)).collect();
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    Image {
        height: spec.height,
        width: spec.width,
        channels: 1,
        data: raw.iter().map(|v| ((v - mean) / sd) as f32).collect(),
    }
}

/// Case-level random partition into train/validation/test. Validation
/// and test sizes are the rounded fractions; train takes the rest.
pub fn split_dataset(cases: usize, ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    check_ratios(ratios)?;
    let n_val = (ratios[1] * cases as f64).round() as usize;
    let n_test = ((ratios[2] * cases as f64).round() as usize).min(cases - n_val.min(cases));
    let mut order: Vec<usize> = (0..cases).collect();
    order.shuffle(&mut rng_for(seed, &[u64::MAX]));
    let mut out = vec![Split::Train; cases];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_val {
            out[i] = Split::Val;
        } else if rank < n_val + n_test {
            out[i] = Split::Test;
        }
    }
    Ok(out)
}

/// Builds every case in memory.
pub fn synthesize(spec: &SynthSpec) -> Result<Vec<Case>> {
    spec.validate()?;
    let splits = split_dataset(spec.cases, spec.split, spec.seed)?;
    Ok((0..spec.cases)
        .map(|i| {
            let field = case_field(spec, i);
            Case {
                id: case_id(i),
                image: case_image(spec, &field, i),
                annotations: (0..spec.annotators.len()).map(|m| annotate(spec, &field, i, m)).collect(),
                split: splits[i],
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCase {
    pub id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub annotators: usize,
    pub cases: Vec<ManifestCase>,
    /// The generating spec, when synthetic.
    pub spec: Option<SynthSpec>,
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub cases: Vec<Case>,
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("cases").join(id).join("image.f32")
}

fn annotation_path(root: &Path, id: &str, m: usize) -> PathBuf {
    root.join("cases").join(id).join(format!("ann_{m}.u8"))
}

/// Synthesizes and writes a dataset. An existing dataset at `root` is only
/// replaced when `force` is set.
pub fn generate_dataset(spec: &SynthSpec, root: &Path, force: bool) -> Result<Dataset> {
    let cases = synthesize(spec)?;
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        height: spec.height,
        width: spec.width,
        channels: 1,
        classes: spec.classes,
        annotators: spec.annotators.len(),
        cases: cases
            .iter()
            .map(|c| ManifestCase {
                id: c.id.clone(),
                split: c.split,
            })
            .collect(),
        spec: Some(spec.clone()),
    };
    let ds = Dataset {
        root: root.to_path_buf(),
        manifest,
        cases,
    };
    ds.write(force)?;
    Ok(ds)
}

impl Dataset {
    /// Writes the manifest and case files under `self.root`.
    pub fn write(&self, force: bool) -> Result<()> {
        let manifest_path = self.root.join(MANIFEST_FILE);
        if manifest_path.exists() && !force {
            return Err(Error::io(
                &manifest_path,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "dataset exists; pass --force to overwrite"),
            ));
        }
        if force && self.root.join("cases").exists() {
            std::fs::remove_dir_all(self.root.join("cases")).map_err(|e| Error::io(self.root.join("cases"), e))?;
        }
        for c in &self.cases {
            fsio::write_atomic(&image_path(&self.root, &c.id), &f32::to_le_bytes_vec(&c.image.data))?;
            for (m, a) in c.annotations.iter().enumerate() {
                fsio::write_atomic(&annotation_path(&self.root, &c.id, m), &a.data)?;
            }
        }
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        json.push(b'\n');
        fsio::write_atomic(&self.root.join(MANIFEST_FILE), &json)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST_FILE);
        let manifest: Manifest = serde_json::from_slice(&fsio::read(&mpath)?)
            .map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(&mpath, format!("unsupported format version {}", manifest.format_version)));
        }
        let (h, w, ch) = (manifest.height, manifest.width, manifest.channels);
        let mut cases = Vec::with_capacity(manifest.cases.len());
        for mc in &manifest.cases {
            let ipath = image_path(root, &mc.id);
            let raw = fsio::read(&ipath)?;
            if raw.len() != 4 * h * w * ch {
                return Err(Error::format(&ipath, format!("expected {} bytes, got {}", 4 * h * w * ch, raw.len())));
            }
            let image = Image {
                height: h,
                width: w,
                channels: ch,
                data: raw.chunks_exact(4).map(f32::from_le_chunk).collect(),
            };
            let mut annotations = Vec::with_capacity(manifest.annotators);
            for m in 0..manifest.annotators {
                let apath = annotation_path(root, &mc.id, m);
                let a = LabelMap::new(h, w, fsio::read(&apath)?).map_err(|e| Error::format(&apath, e.to_string()))?;
                a.validate(manifest.classes).map_err(|e| Error::format(&apath, e.to_string()))?;
                annotations.push(a);
            }
            cases.push(Case {
                id: mc.id.clone(),
                image,
                annotations,
                split: mc.split,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            cases,
        })
    }

    /// Reassigns splits and persists the new assignment in the manifest.
    pub fn resplit(&mut self, ratios: [f64; 3], seed: u64) -> Result<()> {
        let splits = split_dataset(self.cases.len(), ratios, seed)?;
        for ((c, mc), s) in self.cases.iter_mut().zip(&mut self.manifest.cases).zip(splits) {
            c.split = s;
            mc.split = s;
        }
        self.write_manifest()
    }

    pub fn annotators(&self) -> usize {
        self.manifest.annotators
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes
    }

    /// Case indices of a split, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.cases.len()).filter(|&i| self.cases[i].split == split).collect()
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.cases.iter().position(|c| c.id == id)
    }
}

/// Which annotation accompanies an image in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorPolicy {
    /// A uniformly drawn annotator every time an image is emitted.
    RandomPerImage,
    /// Always the given annotator.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub cases: Vec<usize>,
    pub annotators: Vec<usize>,
    pub epoch: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn images<T: Scalar>(&self, ds: &Dataset) -> crate::tensor::Tensor<T> {
        let imgs: Vec<&Image> = self.cases.iter().map(|&i| &ds.cases[i].image).collect();
        crate::labels::stack_images(&imgs)
    }

    pub fn masks(&self, ds: &Dataset) -> Vec<LabelMap> {
        self.cases
            .iter()
            .zip(&self.annotators)
            .map(|(&i, &m)| ds.cases[i].annotations[m].clone())
            .collect()
    }
}

/// Endless stream of batches over one split. Each epoch visits every case
/// once in a fresh random order; the last batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    indices: Vec<usize>,
    order: Vec<usize>,
    batch_size: usize,
    policy: AnnotatorPolicy,
    annotators: usize,
    rng: ChaCha8Rng,
    pos: usize,
    epoch: usize,
}

impl BatchIterator {
    pub fn new(ds: &Dataset, split: Split, batch_size: usize, policy: AnnotatorPolicy, seed: u64) -> Result<Self> {
        let indices = ds.indices(split);
        if indices.is_empty() {
            return Err(Error::InvalidInput(format!("split {split:?} is empty")));
        }
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if let AnnotatorPolicy::Fixed(m) = policy {
            if m >= ds.annotators() {
                return Err(Error::InvalidInput(format!(
                    "annotator {m} out of range for {} annotators",
                    ds.annotators()
                )));
            }
        }
        let mut it = Self {
            order: indices.clone(),
            indices,
            batch_size,
            policy,
            annotators: ds.annotators(),
            rng: rng_for(seed, &[0xba7c4]),
            pos: 0,
            epoch: 0,
        };
        it.order.shuffle(&mut it.rng);
        Ok(it)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

impl Iterator for BatchIterator {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos == self.order.len() {
            self.order.clone_from(&self.indices);
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let cases = self.order[self.pos..end].to_vec();
        self.pos = end;
        let annotators = cases
            .iter()
            .map(|_| match self.policy {
                AnnotatorPolicy::RandomPerImage => self.rng.random_range(0..self.annotators),
                AnnotatorPolicy::Fixed(m) => m,
            })
            .collect();
        Some(Batch {
            cases,
            annotators,
            epoch: self.epoch,
        })
    }
}
