//! Independent oracles shared by the integration tests: finite differences,
//! a from-scratch network forward pass, a dense stationary-distribution
//! solve and exhaustive-threshold ROC areas.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use wepsam::imagecore::Tensor;
use wepsam::metrics::FixationMap;
use wepsam::net::{NetSpec, ParamSet};

pub const FD_STEP: f64 = 1e-5;
/// Relative errors use `max(|a|, |b|, REL_FLOOR)` as denominator so that
/// near-zero components are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Values that are pairwise at least `gap` apart and at least `gap` from 0.
pub fn separated_vec(rng: &mut impl Rng, n: usize, gap: f64) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, n, 1.0);
        let mut s = v.clone();
        s.push(0.0);
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|w| w[1] - w[0] >= gap) {
            return v;
        }
    }
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + FD_STEP;
            let up = f(&p);
            p[i] = x[i] - FD_STEP;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reduced layout used for end-to-end gradient checks.
pub fn reduced_spec() -> NetSpec {
    NetSpec {
        input_side: 16,
        channels: [2, 3, 4],
        kernels: [5, 3, 3],
        fc1: 8,
        fc2: 8,
        maxout_pieces: 2,
    }
}

/// Network forward written directly from the layer definitions. Returns the
/// output and the sequence of discrete choices (ReLU signs, pool and maxout
/// winners) so callers can tell when a perturbation crosses a kink.
pub fn oracle_forward(spec: &NetSpec, p: &ParamSet<f64>, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut pattern = Vec::new();
    let mut x = input.to_vec();
    let mut c_in = 3;
    let mut side = spec.input_side;
    for stage in 0..3 {
        let f_out = spec.channels[stage];
        let k = spec.kernels[stage];
        let r = (k / 2) as isize;
        let w = p.conv_weight(stage);
        let b = p.conv_bias(stage);
        let mut y = vec![0.0; f_out * side * side];
        for f in 0..f_out {
            for i in 0..side {
                for j in 0..side {
                    let mut acc = b[f];
                    for c in 0..c_in {
                        for u in 0..k {
                            for v in 0..k {
                                let ii = i as isize + u as isize - r;
                                let jj = j as isize + v as isize - r;
                                if ii < 0 || jj < 0 || ii >= side as isize || jj >= side as isize {
                                    continue;
                                }
                                acc += w[((f * c_in + c) * k + u) * k + v]
                                    * x[(c * side + ii as usize) * side + jj as usize];
                            }
                        }
                    }
                    pattern.push((acc > 0.0) as usize);
                    y[(f * side + i) * side + j] = acc.max(0.0);
                }
            }
        }
        let half = side / 2;
        let mut pooled = vec![0.0; f_out * half * half];
        for f in 0..f_out {
            for i in 0..half {
                for j in 0..half {
                    let cands = [
                        (2 * i, 2 * j),
                        (2 * i, 2 * j + 1),
                        (2 * i + 1, 2 * j),
                        (2 * i + 1, 2 * j + 1),
                    ];
                    let mut best = 0;
                    for (n, &(a, bb)) in cands.iter().enumerate() {
                        if y[(f * side + a) * side + bb] > y[(f * side + cands[best].0) * side + cands[best].1] {
                            best = n;
                        }
                    }
                    pattern.push(best);
                    let (a, bb) = cands[best];
                    pooled[(f * half + i) * half + j] = y[(f * side + a) * side + bb];
                }
            }
        }
        x = pooled;
        c_in = f_out;
        side = half;
    }
    let fc = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        b.iter()
            .enumerate()
            .map(|(m, bm)| bm + dot(&w[m * x.len()..(m + 1) * x.len()], x))
            .collect()
    };
    let h: Vec<f64> = fc(&x, p.fc_weight(0), p.fc_bias(0))
        .into_iter()
        .map(|v| {
            pattern.push((v > 0.0) as usize);
            v.max(0.0)
        })
        .collect();
    let z = fc(&h, p.fc_weight(1), p.fc_bias(1));
    let out = z
        .chunks(spec.maxout_pieces)
        .map(|g| {
            let mut best = 0;
            for (n, &v) in g.iter().enumerate() {
                if v > g[best] {
                    best = n;
                }
            }
            pattern.push(best);
            g[best]
        })
        .collect();
    (out, pattern)
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Random parameters with the given std for weights and biases alike.
pub fn random_params(spec: &NetSpec, rng: &mut impl Rng, std: f64) -> ParamSet<f64> {
    let shapes = spec.param_shapes();
    let tensors = shapes
        .iter()
        .map(|(_, s)| {
            let n = s.iter().product();
            Tensor::new(s.clone(), normal_vec(rng, n, std)).unwrap()
        })
        .collect();
    ParamSet::from_tensors(spec, tensors).unwrap()
}

pub fn flatten(p: &ParamSet<f64>) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

pub fn unflatten(spec: &NetSpec, flat: &[f64]) -> ParamSet<f64> {
    let mut at = 0;
    let tensors = spec
        .param_shapes()
        .iter()
        .map(|(_, s)| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat[at..at + n].to_vec()).unwrap();
            at += n;
            t
        })
        .collect();
    ParamSet::from_tensors(spec, tensors).unwrap()
}

/// Stationary distribution by Gaussian elimination on `(Pᵀ − I) v = 0` with
/// one equation replaced by `Σ v = 1`.
pub fn dense_stationary(n: usize, p: &[f64]) -> Vec<f64> {
    let mut a = vec![0.0; n * (n + 1)];
    for i in 0..n {
        for j in 0..n {
            a[i * (n + 1) + j] = p[j * n + i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1) * (n + 1) + j] = 1.0;
    }
    a[(n - 1) * (n + 1) + n] = 1.0;
    let w = n + 1;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x * w + col].abs().total_cmp(&a[y * w + col].abs()))
            .unwrap();
        for k in 0..w {
            a.swap(col * w + k, piv * w + k);
        }
        let d = a[col * w + col];
        for k in 0..w {
            a[col * w + k] /= d;
        }
        for row in 0..n {
            if row != col {
                let f = a[row * w + col];
                if f != 0.0 {
                    for k in 0..w {
                        a[row * w + k] -= f * a[col * w + k];
                    }
                }
            }
        }
    }
    (0..n).map(|i| a[i * w + n]).collect()
}

/// ROC area by enumerating `thresholds` in descending order and counting
/// `value ≥ t` over both sets by full scans, anchored at (0,0) and (1,1).
fn roc_area(pos: &[f64], neg: &[f64], mut thresholds: Vec<f64>) -> f64 {
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let tp = pos.iter().filter(|&&v| v >= t).count() as f64 / pos.len() as f64;
        let fp = neg.iter().filter(|&&v| v >= t).count() as f64 / neg.len() as f64;
        pts.push((fp, tp));
    }
    pts.push((1.0, 1.0));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

pub fn brute_auc_judd(sal: &Tensor<f64>, fix: &FixationMap) -> f64 {
    let (mut pos, mut neg) = (vec![], vec![]);
    for (k, &v) in sal.data().iter().enumerate() {
        if fix.is_fixated(k) {
            pos.push(v)
        } else {
            neg.push(v)
        }
    }
    let th = pos.clone();
    roc_area(&pos, &neg, th)
}

/// Thresholds at every distinct value of positives and sampled negatives.
pub fn brute_auc_split(sal: &Tensor<f64>, fix: &FixationMap, negatives: &[usize]) -> f64 {
    let pos: Vec<f64> = (0..sal.len()).filter(|&k| fix.is_fixated(k)).map(|k| sal.data()[k]).collect();
    let neg: Vec<f64> = negatives.iter().map(|&k| sal.data()[k]).collect();
    let th: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    roc_area(&pos, &neg, th)
}

/// Random map with ties (values on a coarse grid) and a fixation map with at
/// least one fixated and one free pixel.
pub fn random_map_pair(rng: &mut impl Rng, h: usize, w: usize) -> (Tensor<f64>, FixationMap) {
    let levels = rng.random_range(2..12);
    let sal = Tensor::from_fn_2d(h, w, |_, _| rng.random_range(0..levels) as f64 / levels as f64);
    loop {
        let f: Vec<f64> = (0..h * w).map(|_| (rng.random::<f64>() < 0.2) as u8 as f64).collect();
        let c = f.iter().sum::<f64>() as usize;
        if c >= 1 && c < h * w {
            return (sal, FixationMap::new(tensor(&[h, w], f)).unwrap());
        }
    }
}
