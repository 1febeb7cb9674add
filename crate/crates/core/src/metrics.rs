//! Saliency evaluation: AUC-Judd, AUC-Borji, CC, SIM, KL and NSS, plus a
//! directory-level evaluator producing per-image and mean scores.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{list_images, load_gray, resize_bilinear, ImageError, Tensor};

pub const DEFAULT_SPLITS: usize = 100;
pub const KL_EPS: f64 = 1e-12;
/// Gray level above which a fixation-map pixel counts as fixated.
pub const FIXATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("fixation map has no fixations")]
    NoFixations,
    #[error("every pixel is fixated")]
    AllFixated,
    #[error("map is constant")]
    ConstantInput,
    #[error("map has zero total mass")]
    ZeroMass,
    #[error("map contains negative or non-finite values")]
    InvalidValue,
    #[error("fixation map must be binary")]
    NotBinary,
    #[error("no counterpart for image {id} in {missing_from}")]
    MissingCounterpart { id: String, missing_from: String },
    #[error("no maps found to evaluate")]
    EmptyInput,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Binary map of fixated pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FixationMap {
    map: Tensor<f64>,
}

impl FixationMap {
    pub fn new(map: Tensor<f64>) -> Result<Self, MetricError> {
        map.dims2()?;
        if map.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(MetricError::NotBinary);
        }
        Ok(Self { map })
    }

    /// Pixels strictly above `threshold` are fixated.
    pub fn from_gray(gray: &Tensor<f64>, threshold: f64) -> Result<Self, MetricError> {
        Self::new(gray.map(|v| if v > threshold { 1.0 } else { 0.0 }))
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.map
    }

    pub fn shape(&self) -> &[usize] {
        self.map.shape()
    }

    pub fn count(&self) -> usize {
        self.map.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_fixated(&self, k: usize) -> bool {
        self.map.data()[k] == 1.0
    }
}

fn same_shape(a: &Tensor<f64>, b: &[usize]) -> Result<(), MetricError> {
    if a.shape() != b {
        return Err(MetricError::ShapeMismatch(a.shape().to_vec(), b.to_vec()));
    }
    Ok(())
}

fn finite(t: &Tensor<f64>) -> Result<(), MetricError> {
    if t.data().iter().any(|v| !v.is_finite()) {
        return Err(MetricError::InvalidValue);
    }
    Ok(())
}

fn nonnegative(t: &Tensor<f64>) -> Result<(), MetricError> {
    if t.data().iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(MetricError::InvalidValue);
    }
    Ok(())
}

/// Saliency values at fixated and at non-fixated pixels.
fn partition(sal: &Tensor<f64>, fix: &FixationMap) -> Result<(Vec<f64>, Vec<f64>), MetricError> {
    same_shape(sal, fix.shape())?;
    finite(sal)?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (k, &v) in sal.data().iter().enumerate() {
        if fix.is_fixated(k) {
            pos.push(v);
        } else {
            neg.push(v);
        }
    }
    if pos.is_empty() {
        return Err(MetricError::NoFixations);
    }
    if neg.is_empty() {
        return Err(MetricError::AllFixated);
    }
    Ok((pos, neg))
}

fn count_at_least(sorted_asc: &[f64], t: f64) -> usize {
    sorted_asc.len() - sorted_asc.partition_point(|&v| v < t)
}

/// ROC area with thresholds at the fixated values, counting `≥ t` as
/// positive, anchored at (0,0) and (1,1).
pub fn auc_judd(sal: &Tensor<f64>, fix: &FixationMap) -> Result<f64, MetricError> {
    let (mut pos, mut neg) = partition(sal, fix)?;
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut thresholds = pos.clone();
    thresholds.dedup();
    thresholds.reverse();
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut area = 0.0;
    let (mut tpr0, mut fpr0) = (0.0, 0.0);
    for &t in &thresholds {
        let tpr = count_at_least(&pos, t) as f64 / np;
        let fpr = count_at_least(&neg, t) as f64 / nn;
        area += (fpr - fpr0) * (tpr + tpr0) / 2.0;
        tpr0 = tpr;
        fpr0 = fpr;
    }
    area += (1.0 - fpr0) * (1.0 + tpr0) / 2.0;
    Ok(area)
}

/// Probability that a fixated value exceeds a negative one, ties counting half.
fn pairwise_auc(pos: &[f64], neg_sorted: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        let below = neg_sorted.partition_point(|&v| v < p);
        let upto = neg_sorted.partition_point(|&v| v <= p);
        wins += below as f64 + 0.5 * (upto - below) as f64;
    }
    wins / (pos.len() as f64 * neg_sorted.len() as f64)
}

/// Negative pixel indices for each split: as many as there are fixations,
/// drawn uniformly with replacement from the non-fixated pixels.
pub fn borji_negatives(
    fix: &FixationMap,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, MetricError> {
    let non: Vec<usize> = (0..fix.tensor().len())
        .filter(|&k| !fix.is_fixated(k))
        .collect();
    let nfix = fix.count();
    if nfix == 0 {
        return Err(MetricError::NoFixations);
    }
    if non.is_empty() {
        return Err(MetricError::AllFixated);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_splits)
        .map(|_| {
            (0..nfix)
                .map(|_| non[rng.random_range(0..non.len())])
                .collect()
        })
        .collect())
}

/// AUC of fixated pixels against an explicit negative sample.
pub fn auc_against(
    sal: &Tensor<f64>,
    fix: &FixationMap,
    negatives: &[usize],
) -> Result<f64, MetricError> {
    let (pos, _) = partition(sal, fix)?;
    if negatives.is_empty() {
        return Err(MetricError::AllFixated);
    }
    let mut neg: Vec<f64> = negatives.iter().map(|&k| sal.data()[k]).collect();
    neg.sort_by(f64::total_cmp);
    Ok(pairwise_auc(&pos, &neg))
}

pub fn auc_borji(
    sal: &Tensor<f64>,
    fix: &FixationMap,
    n_splits: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    partition(sal, fix)?;
    if n_splits == 0 {
        return Err(MetricError::EmptyInput);
    }
    let splits = borji_negatives(fix, n_splits, seed)?;
    let mut total = 0.0;
    for negs in &splits {
        total += auc_against(sal, fix, negs)?;
    }
    Ok(total / n_splits as f64)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Pearson correlation of the flattened maps.
pub fn cc(sal: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64, MetricError> {
    same_shape(sal, gt.shape())?;
    finite(sal)?;
    finite(gt)?;
    let (ma, sa) = mean_std(sal.data());
    let (mb, sb) = mean_std(gt.data());
    if is_constant(sal.data()) || is_constant(gt.data()) {
        return Err(MetricError::ConstantInput);
    }
    let n = sal.len() as f64;
    let cov = sal
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - ma) * (b - mb))
        .sum::<f64>()
        / n;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

fn to_distribution(t: &Tensor<f64>, eps: f64) -> Result<Vec<f64>, MetricError> {
    nonnegative(t)?;
    let total: f64 = t.data().iter().map(|v| v + eps).sum();
    if total <= 0.0 {
        return Err(MetricError::ZeroMass);
    }
    Ok(t.data().iter().map(|v| (v + eps) / total).collect())
}

/// Histogram intersection of the two sum-normalized maps.
pub fn sim(sal: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64, MetricError> {
    same_shape(sal, gt.shape())?;
    let p = to_distribution(sal, 0.0)?;
    let q = to_distribution(gt, 0.0)?;
    Ok(p.iter()
        .zip(&q)
        .map(|(a, b)| a.min(*b))
        .sum::<f64>()
        .min(1.0))
}

/// `KL(gt ‖ sal)` in nats, after adding [`KL_EPS`] per cell and normalizing.
pub fn kl_div(sal: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64, MetricError> {
    same_shape(sal, gt.shape())?;
    let s = to_distribution(sal, KL_EPS)?;
    let g = to_distribution(gt, KL_EPS)?;
    let kl: f64 = g.iter().zip(&s).map(|(gi, si)| gi * (gi / si).ln()).sum();
    Ok(kl.max(0.0))
}

/// Mean z-scored saliency (population std) at the fixated pixels.
pub fn nss(sal: &Tensor<f64>, fix: &FixationMap) -> Result<f64, MetricError> {
    same_shape(sal, fix.shape())?;
    finite(sal)?;
    let (mean, std) = mean_std(sal.data());
    if is_constant(sal.data()) {
        return Err(MetricError::ConstantInput);
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (k, &v) in sal.data().iter().enumerate() {
        if fix.is_fixated(k) {
            total += (v - mean) / std;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricError::NoFixations);
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub auc_judd: f64,
    pub auc_borji: f64,
    pub cc: f64,
    pub sim: f64,
    pub kl: f64,
    pub nss: f64,
}

impl MetricValues {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.auc_judd,
            self.auc_borji,
            self.cc,
            self.sim,
            self.kl,
            self.nss,
        ]
    }

    fn from_array(a: [f64; 6]) -> Self {
        Self {
            auc_judd: a[0],
            auc_borji: a[1],
            cc: a[2],
            sim: a[3],
            kl: a[4],
            nss: a[5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageScore>,
    /// Unweighted mean over `images`.
    pub aggregate: MetricValues,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "image_id,auc_judd,auc_borji,cc,sim,kl,nss";

    pub fn from_scores(images: Vec<ImageScore>) -> Result<Self, MetricError> {
        if images.is_empty() {
            return Err(MetricError::EmptyInput);
        }
        let mut sum = [0.0; 6];
        for s in &images {
            for (acc, v) in sum.iter_mut().zip(s.values.as_array()) {
                *acc += v;
            }
        }
        let n = images.len() as f64;
        let aggregate = MetricValues::from_array(sum.map(|v| v / n));
        Ok(Self { images, aggregate })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per image, no aggregate row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.images {
            let v = r.values.as_array().map(|x| x.to_string()).join(",");
            s.push_str(&format!("{},{v}\n", r.image_id));
        }
        s
    }
}

/// All six scores for one image. `pred` is resized to the ground-truth
/// resolution first; `gt` is the fixation density map.
pub fn score_image(
    pred: &Tensor<f64>,
    gt: &Tensor<f64>,
    fix: &FixationMap,
    n_splits: usize,
    seed: u64,
) -> Result<MetricValues, MetricError> {
    let (h, w) = gt.dims2()?;
    same_shape(gt, fix.shape())?;
    let p = if pred.shape() == gt.shape() {
        pred.clone()
    } else {
        resize_bilinear(pred, h, w)?
    };
    Ok(MetricValues {
        auc_judd: auc_judd(&p, fix)?,
        auc_borji: auc_borji(&p, fix, n_splits, seed)?,
        cc: cc(&p, gt)?,
        sim: sim(&p, gt)?,
        kl: kl_div(&p, gt)?,
        nss: nss(&p, fix)?,
    })
}

/// Score every image id present in all three directories. An id found in
/// only some of them is an error. Image `i` (in sorted id order) draws its
/// AUC-Borji negatives with seed `seed + i`.
pub fn evaluate(
    pred_dir: &Path,
    gt_dir: &Path,
    fix_dir: &Path,
    n_splits: usize,
    seed: u64,
) -> Result<MetricReport, MetricError> {
    let dirs = [
        (pred_dir, list_images(pred_dir)?),
        (gt_dir, list_images(gt_dir)?),
        (fix_dir, list_images(fix_dir)?),
    ];
    let mut ids: Vec<&String> = dirs.iter().flat_map(|(_, m)| m.keys()).collect();
    ids.sort();
    ids.dedup();
    if ids.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    for id in &ids {
        if let Some((dir, _)) = dirs.iter().find(|(_, m)| !m.contains_key(*id)) {
            return Err(MetricError::MissingCounterpart {
                id: id.to_string(),
                missing_from: dir.display().to_string(),
            });
        }
    }
    let mut scores = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let pred = load_gray(&dirs[0].1[*id])?;
        let gt = load_gray(&dirs[1].1[*id])?;
        let fix = FixationMap::from_gray(&load_gray(&dirs[2].1[*id])?, FIXATION_THRESHOLD)?;
        let values = score_image(&pred, &gt, &fix, n_splits, seed.wrapping_add(i as u64))?;
        scores.push(ImageScore {
            image_id: id.to_string(),
            values,
        });
    }
    MetricReport::from_scores(scores)
}
