//! Evaluation metrics for sample-based segmentation.
//!
//! Hard masks are compared per class. A class absent from both masks
//! counts as perfect agreement (IoU = Dice = 1), which matters whenever
//! annotators disagree on whether a structure is present at all.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::inference::{gamma_map, ScalarGrid, SampleSet, EPS_LOG};
use crate::labels::LabelMap;

/// Annotations of one image by `M` raters.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub masks: Vec<LabelMap>,
    pub annotator_ids: Vec<String>,
}

impl AnnotationSet {
    pub fn new(masks: Vec<LabelMap>, annotator_ids: Vec<String>) -> Result<Self> {
        let Some(first) = masks.first() else {
            return Err(Error::InvalidInput("an annotation set needs at least one mask".into()));
        };
        if annotator_ids.len() != masks.len() {
            return Err(Error::InvalidInput(format!(
                "{} annotator ids for {} masks",
                annotator_ids.len(),
                masks.len()
            )));
        }
        if masks.iter().any(|m| (m.height, m.width) != (first.height, first.width)) {
            return Err(Error::Shape("annotations differ in size".into()));
        }
        Ok(Self { masks, annotator_ids })
    }

    /// Annotators named `"0"`, `"1"`, ...
    pub fn anonymous(masks: Vec<LabelMap>) -> Result<Self> {
        let ids = (0..masks.len()).map(|i| i.to_string()).collect();
        Self::new(masks, ids)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Foreground classes `1..K`.
pub fn foreground_classes(classes: usize) -> Vec<u8> {
    (1..classes as u8).collect()
}

fn check_pair(a: &LabelMap, b: &LabelMap, classes: &[u8]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::InvalidInput("empty class list".into()));
    }
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!(
            "masks {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `(|A ∩ B|, |A|, |B|)` for class `c`.
fn overlap(a: &LabelMap, b: &LabelMap, c: u8) -> (usize, usize, usize) {
    let mut counts = (0, 0, 0);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (x == c, y == c);
        counts.0 += (ia && ib) as usize;
        counts.1 += ia as usize;
        counts.2 += ib as usize;
    }
    counts
}

fn iou_from_counts(inter: usize, na: usize, nb: usize) -> f64 {
    let union = na + nb - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `1 - mean IoU` over `classes`.
pub fn jaccard_distance(a: &LabelMap, b: &LabelMap, classes: &[u8]) -> Result<f64> {
    check_pair(a, b, classes)?;
    let iou: f64 = classes
        .iter()
        .map(|&c| {
            let (i, na, nb) = overlap(a, b, c);
            iou_from_counts(i, na, nb)
        })
        .sum::<f64>()
        / classes.len() as f64;
    Ok(1.0 - iou)
}

/// Which pairs enter the within-set expectations of the energy distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GedEstimator {
    /// All `N²` and `M²` ordered pairs, including identical indices.
    #[default]
    Biased,
    /// Identical-index pairs excluded; a single-member set contributes 0.
    Unbiased,
}

/// Masks packed into one bitset per class, for fast pairwise IoU.
struct PackedMasks {
    words: usize,
    /// `bits[mask][class]`.
    bits: Vec<Vec<Vec<u64>>>,
    counts: Vec<Vec<u32>>,
}

impl PackedMasks {
    fn new(masks: &[&LabelMap], classes: &[u8]) -> Self {
        let pixels = masks.first().map_or(0, |m| m.len());
        let words = pixels.div_ceil(64);
        let mut bits = Vec::with_capacity(masks.len());
        let mut counts = Vec::with_capacity(masks.len());
        for m in masks {
            let mut per = vec![vec![0u64; words]; classes.len()];
            for (i, &v) in m.data.iter().enumerate() {
                if let Some(ci) = classes.iter().position(|&c| c == v) {
                    per[ci][i / 64] |= 1 << (i % 64);
                }
            }
            counts.push(per.iter().map(|b| b.iter().map(|w| w.count_ones()).sum()).collect());
            bits.push(per);
        }
        Self { words, bits, counts }
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        let k = self.counts[i].len();
        let mut iou = 0.0;
        for c in 0..k {
            let (a, b) = (&self.bits[i][c], &self.bits[j][c]);
            let inter: u32 = (0..self.words).map(|w| (a[w] & b[w]).count_ones()).sum();
            iou += iou_from_counts(inter as usize, self.counts[i][c] as usize, self.counts[j][c] as usize);
        }
        1.0 - iou / k as f64
    }
}

/// Squared generalised energy distance
/// `2 E[d(s, y)] - E[d(s, s')] - E[d(y, y')]` with `d = 1 - IoU`,
/// between hard sample masks and annotations. Not clamped: the biased
/// estimator can be slightly negative.
pub fn ged_squared_masks(
    samples: &[LabelMap],
    annotations: &[LabelMap],
    classes: &[u8],
    estimator: GedEstimator,
) -> Result<f64> {
    if samples.is_empty() || annotations.is_empty() {
        return Err(Error::InvalidInput("GED needs at least one sample and one annotation".into()));
    }
    for m in samples.iter().chain(annotations) {
        check_pair(&samples[0], m, classes)?;
    }
    let all: Vec<&LabelMap> = samples.iter().chain(annotations).collect();
    let packed = PackedMasks::new(&all, classes);
    let (n, m) = (samples.len(), annotations.len());

    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += packed.distance(i, n + j);
        }
    }
    cross /= (n * m) as f64;

    // Off-diagonal pairs, each counted once; d(a, a) = 0 so the diagonal
    // only changes the normaliser.
    let within = |offset: usize, len: usize| -> f64 {
        let mut sum = 0.0;
        for i in 0..len {
            for j in i + 1..len {
                sum += packed.distance(offset + i, offset + j);
            }
        }
        let pairs = match estimator {
            GedEstimator::Biased => (len * len) as f64,
            GedEstimator::Unbiased if len > 1 => (len * (len - 1)) as f64,
            GedEstimator::Unbiased => return 0.0,
        };
        2.0 * sum / pairs
    };
    Ok(2.0 * cross - within(0, n) - within(n, m))
}

/// [`ged_squared_masks`] on the hard labels of a sample set.
pub fn ged_squared(ss: &SampleSet, ann: &AnnotationSet, classes: &[u8], estimator: GedEstimator) -> Result<f64> {
    ged_squared_masks(&ss.labels, &ann.masks, classes, estimator)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScore {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Per-class `2|A ∩ B| / (|A| + |B|)` and their mean.
pub fn dice(pred: &LabelMap, gt: &LabelMap, classes: &[u8]) -> Result<DiceScore> {
    check_pair(pred, gt, classes)?;
    let per_class: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let (i, na, nb) = overlap(pred, gt, c);
            if na + nb == 0 {
                1.0
            } else {
                2.0 * i as f64 / (na + nb) as f64
            }
        })
        .collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(DiceScore { per_class, mean })
}

/// Per-pixel mean over samples of `-ln(p_n[y_i] + ε)`, using each
/// sample's soft probabilities.
pub fn ce_error_map(ss: &SampleSet, y: &LabelMap) -> Result<ScalarGrid> {
    if (y.height, y.width) != (ss.height, ss.width) {
        return Err(Error::Shape("annotation and samples differ in size".into()));
    }
    y.validate(ss.classes)?;
    let p = ss.pixels();
    let mut values = vec![0f64; p];
    for n in 0..ss.len() {
        for (i, v) in values.iter_mut().enumerate() {
            *v -= (ss.prob(n, y.data[i] as usize, i) as f64 + EPS_LOG).ln();
        }
    }
    let inv = 1.0 / ss.len() as f64;
    values.iter_mut().for_each(|v| *v *= inv);
    ScalarGrid::new(ss.height, ss.width, values)
}

/// Maps whose population standard deviation is below this are treated
/// as constant.
pub const NCC_MIN_STD: f64 = 1e-10;

/// Normalised cross correlation: the mean product of the standardized
/// maps (population standard deviation). Zero if either map is constant.
pub fn ncc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("NCC of maps with {} and {} values", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let std = |v: &[f64], m: f64| (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    let (sa, sb) = (std(a, ma), std(b, mb));
    if sa < NCC_MIN_STD || sb < NCC_MIN_STD {
        return Ok(0.0);
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

/// Mean over annotators of `NCC(γ, error map against that annotator)`.
pub fn s_ncc(ss: &SampleSet, ann: &AnnotationSet) -> Result<f64> {
    if ann.is_empty() {
        return Err(Error::InvalidInput("S_NCC needs at least one annotation".into()));
    }
    let gamma = gamma_map(ss);
    let mut total = 0.0;
    for y in &ann.masks {
        let err = ce_error_map(ss, y)?;
        total += ncc(&gamma.values, &err.values)?;
    }
    Ok(total / ann.len() as f64)
}

/// Outcome of a two-sided paired t-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
    /// All differences equal. `p` is then 1 if they are all zero and 0
    /// otherwise, and `t` is 0 or signed infinity.
    pub zero_variance: bool,
}

/// Two-sided paired Student t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("paired test on {} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput("paired test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let df = d.len() - 1;
    if var == 0.0 || d.iter().all(|&x| x == d[0]) {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (f64::INFINITY.copysign(mean), 0.0) };
        return Ok(TTestResult {
            t,
            p,
            df,
            mean_diff: mean,
            zero_variance: true,
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("valid degrees of freedom");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTestResult {
        t,
        p,
        df,
        mean_diff: mean,
        zero_variance: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub ged: f64,
    pub sncc: f64,
    pub dice: f64,
}

/// Means of the per-case values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub ged: f64,
    pub sncc: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    pub n_samples: usize,
    pub cases: Vec<CaseMetrics>,
}

impl MetricsReport {
    pub fn summary(&self) -> MetricsSummary {
        let n = self.cases.len().max(1) as f64;
        let mean = |f: fn(&CaseMetrics) -> f64| self.cases.iter().map(f).sum::<f64>() / n;
        MetricsSummary {
            ged: mean(|c| c.ged),
            sncc: mean(|c| c.sncc),
            dice: mean(|c| c.dice),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let f: fn(&CaseMetrics) -> f64 = match name {
            "ged" => |c| c.ged,
            "sncc" => |c| c.sncc,
            "dice" => |c| c.dice,
            _ => return None,
        };
        Some(self.cases.iter().map(f).collect())
    }

    /// Per-case table `case_id,ged,sncc,dice`, a blank line, then the
    /// aggregate block `method,dataset,n_samples,cases,ged,sncc,dice`.
    /// Floats use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,ged,sncc,dice\n");
        for c in &self.cases {
            let _ = writeln!(s, "{},{},{},{}", c.case_id, c.ged, c.sncc, c.dice);
        }
        let m = self.summary();
        let _ = writeln!(s, "\nmethod,dataset,n_samples,cases,ged,sncc,dice");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            self.method,
            self.dataset,
            self.n_samples,
            self.cases.len(),
            m.ged,
            m.sncc,
            m.dice
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> LabelMap {
        let h = rows.len();
        let w = rows[0].len();
        LabelMap::new(h, w, rows.iter().flat_map(|r| r.bytes().map(|b| b - b'0')).collect()).unwrap()
    }

    #[test]
    fn both_empty_counts_as_agreement() {
        let e = LabelMap::filled(2, 2, 0);
        assert_eq!(jaccard_distance(&e, &e, &[1]).unwrap(), 0.0);
        assert_eq!(dice(&e, &e, &[1]).unwrap().mean, 1.0);
    }

    #[test]
    fn empty_class_list_is_rejected() {
        let e = LabelMap::filled(2, 2, 0);
        assert!(jaccard_distance(&e, &e, &[]).is_err());
        assert!(dice(&e, &e, &[]).is_err());
    }

    #[test]
    fn packed_distance_matches_direct() {
        let a = mask(&["0110", "1111", "0000", "1001"]);
        let b = mask(&["0011", "0110", "1000", "1001"]);
        let packed = PackedMasks::new(&[&a, &b], &[1]);
        assert_eq!(packed.distance(0, 1), jaccard_distance(&a, &b, &[1]).unwrap());
    }

    #[test]
    fn unbiased_single_members_reduce_to_cross_term() {
        let a = mask(&["11", "00"]);
        let b = mask(&["10", "00"]);
        let g = ged_squared_masks(std::slice::from_ref(&a), std::slice::from_ref(&b), &[1], GedEstimator::Unbiased).unwrap();
        assert!((g - 2.0 * jaccard_distance(&a, &b, &[1]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn ncc_conventions() {
        let a = [1.0, 2.0, 4.0];
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ncc(&a, &[-1.0, -2.0, -4.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(ncc(&a, &[3.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn zero_variance_ttest_is_flagged() {
        let r = paired_ttest(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!(r.zero_variance && r.p == 1.0);
        let r = paired_ttest(&[2.0; 5], &[1.0; 5]).unwrap();
        assert!(r.zero_variance && r.p == 0.0);
    }

    #[test]
    fn csv_has_table_and_summary() {
        let r = MetricsReport {
            method: "m".into(),
            dataset: "d".into(),
            n_samples: 3,
            cases: vec![
                CaseMetrics {
                    case_id: "a".into(),
                    ged: 0.5,
                    sncc: 0.25,
                    dice: 1.0,
                },
                CaseMetrics {
                    case_id: "b".into(),
                    ged: 0.25,
                    sncc: 0.75,
                    dice: 0.5,
                },
            ],
        };
        assert_eq!(
            r.to_csv(),
            "case_id,ged,sncc,dice\na,0.5,0.25,1\nb,0.25,0.75,0.5\n\nmethod,dataset,n_samples,cases,ged,sncc,dice\nm,d,3,2,0.375,0.5,0.75\n"
        );
    }
}
