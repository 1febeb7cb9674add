//! Markov chains on the pixel lattice and their equilibrium distributions.

use crate::imagecore::Tensor;

use super::GbvsError;

/// Floor added before taking logs of feature values.
pub const LOG_EPS: f64 = 1e-4;

/// Row-sum tolerance accepted by [`equilibrium_distribution`].
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Dense row-stochastic transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    n: usize,
    p: Vec<f64>,
}

impl MarkovChain {
    /// Wrap a dense matrix without normalising it; use
    /// [`MarkovChain::from_weights`] to build from raw weights.
    pub fn from_dense(n: usize, p: Vec<f64>) -> Self {
        assert_eq!(p.len(), n * n, "transition matrix must be n x n");
        Self { n, p }
    }

    /// Row-normalise nonnegative weights. A row with no weight becomes
    /// uniform over every other node.
    pub fn from_weights(n: usize, mut w: Vec<f64>) -> Self {
        assert_eq!(w.len(), n * n, "weight matrix must be n x n");
        for a in 0..n {
            let row = &mut w[a * n..(a + 1) * n];
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            } else if n == 1 {
                row[0] = 1.0;
            } else {
                let u = 1.0 / (n - 1) as f64;
                for (b, v) in row.iter_mut().enumerate() {
                    *v = if b == a { 0.0 } else { u };
                }
            }
        }
        Self { n, p: w }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.p[a * self.n + b]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.p[a * self.n..(a + 1) * self.n]
    }

    /// Largest deviation of a row sum from 1, or `None` if an entry is negative
    /// or non-finite.
    pub fn max_row_error(&self) -> Option<f64> {
        let mut worst = 0.0f64;
        for a in 0..self.n {
            let row = self.row(a);
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return None;
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        Some(worst)
    }

    /// `vᵀP`.
    pub fn left_multiply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (a, &va) in v.iter().enumerate() {
            if va == 0.0 {
                continue;
            }
            for (o, &pab) in out.iter_mut().zip(self.row(a)) {
                *o += va * pab;
            }
        }
        out
    }
}

/// Gaussian distance falloff indexed by `(|di|, |dj|)`.
pub(crate) struct Falloff {
    cols: usize,
    table: Vec<f64>,
}

impl Falloff {
    pub(crate) fn new(h: usize, w: usize, sigma: f64) -> Self {
        let denom = 2.0 * sigma * sigma;
        let mut table = Vec::with_capacity(h * w);
        for di in 0..h {
            for dj in 0..w {
                table.push((-((di * di + dj * dj) as f64) / denom).exp());
            }
        }
        Self { cols: w, table }
    }

    #[inline]
    pub(crate) fn at(&self, a: usize, b: usize) -> f64 {
        let (ai, aj) = (a / self.cols, a % self.cols);
        let (bi, bj) = (b / self.cols, b % self.cols);
        self.table[ai.abs_diff(bi) * self.cols + aj.abs_diff(bj)]
    }
}

fn check_sigma(sigma: f64) -> Result<(), GbvsError> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(GbvsError::InvalidSigma(sigma))
    }
}

pub(crate) fn log_values(f: &Tensor<f64>) -> Vec<f64> {
    f.data().iter().map(|&v| (v + LOG_EPS).ln()).collect()
}

/// Chain whose transitions favour nearby nodes with dissimilar feature values:
/// `w(a, b) = |log(f(a)+ε) − log(f(b)+ε)| · exp(−d²/2σ²)`, no self loops.
pub fn build_dissimilarity_chain(f: &Tensor<f64>, sigma: f64) -> Result<MarkovChain, GbvsError> {
    check_sigma(sigma)?;
    let (h, w) = f.dims2()?;
    if f.data().iter().any(|v| !v.is_finite()) {
        return Err(GbvsError::NonFinite);
    }
    let n = h * w;
    let logs = log_values(f);
    let falloff = Falloff::new(h, w, sigma);
    let mut weights = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            if a != b {
                weights[a * n + b] = (logs[a] - logs[b]).abs() * falloff.at(a, b);
            }
        }
    }
    Ok(MarkovChain::from_weights(n, weights))
}

/// Chain that moves mass towards nearby nodes of high activation:
/// `w(a, b) = act(b) · exp(−d²/2σ²)`, self loops included.
pub fn build_concentration_chain(
    activation: &Tensor<f64>,
    sigma: f64,
) -> Result<MarkovChain, GbvsError> {
    check_sigma(sigma)?;
    let (h, w) = activation.dims2()?;
    if activation
        .data()
        .iter()
        .any(|v| !(v.is_finite() && *v >= 0.0))
    {
        return Err(GbvsError::NegativeActivation);
    }
    let n = h * w;
    let act = activation.data();
    let falloff = Falloff::new(h, w, sigma);
    let mut weights = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            weights[a * n + b] = act[b] * falloff.at(a, b);
        }
    }
    Ok(MarkovChain::from_weights(n, weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub distribution: Vec<f64>,
    pub iterations: usize,
    /// `false` when `max_iter` was reached before the residual met `tol`.
    pub converged: bool,
    pub residual: f64,
}

fn renormalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

/// Stationary distribution by averaged power iteration `v ← (v + vᵀP) / 2`
/// from the uniform vector. The averaging makes periodic chains converge.
pub fn equilibrium_distribution(
    chain: &MarkovChain,
    tol: f64,
    max_iter: usize,
) -> Result<Equilibrium, GbvsError> {
    if !(tol > 0.0) {
        return Err(GbvsError::InvalidTolerance(tol));
    }
    match chain.max_row_error() {
        Some(e) if e <= STOCHASTIC_TOL => {}
        Some(e) => return Err(GbvsError::NotStochastic(e)),
        None => return Err(GbvsError::NotStochastic(f64::INFINITY)),
    }
    let n = chain.len();
    let mut v = vec![1.0 / n as f64; n];
    let mut iterations = 0;
    let residual = loop {
        let next = chain.left_multiply(&v);
        let residual: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        if residual <= tol || iterations == max_iter {
            break residual;
        }
        v.iter_mut()
            .zip(&next)
            .for_each(|(a, b)| *a = 0.5 * (*a + b));
        renormalize(&mut v);
        iterations += 1;
    };
    Ok(Equilibrium {
        distribution: v,
        iterations,
        converged: residual <= tol,
        residual,
    })
}

/// Stationary distribution of the dissimilarity chain without materialising
/// it. The weights are symmetric, so detailed balance gives `v ∝` weighted
/// degree. A constant map has no weight at all and its chain is uniform.
///
/// Returns `None` if only some nodes have zero degree, since their uniform
/// fallback rows break reversibility.
pub fn dissimilarity_equilibrium(
    f: &Tensor<f64>,
    sigma: f64,
) -> Result<Option<Vec<f64>>, GbvsError> {
    check_sigma(sigma)?;
    let (h, w) = f.dims2()?;
    let n = h * w;
    let logs = log_values(f);
    let falloff = Falloff::new(h, w, sigma);
    let mut degree = vec![0.0; n];
    for a in 0..n {
        for b in (a + 1)..n {
            let wab = (logs[a] - logs[b]).abs() * falloff.at(a, b);
            degree[a] += wab;
            degree[b] += wab;
        }
    }
    let isolated = degree.iter().filter(|&&d| d == 0.0).count();
    if isolated > 0 && isolated < n {
        return Ok(None);
    }
    Ok(Some(degree_distribution(degree)))
}

/// Closed form for the concentration chain: detailed balance holds with
/// `v(a) ∝ act(a) · Σ_c act(c) exp(−d²/2σ²)`.
///
/// Returns `None` when some row of the chain has no weight; the uniform
/// fallback row breaks reversibility there.
pub fn concentration_equilibrium(
    activation: &Tensor<f64>,
    sigma: f64,
) -> Result<Option<Vec<f64>>, GbvsError> {
    check_sigma(sigma)?;
    let (h, w) = activation.dims2()?;
    let act = activation.data();
    if act.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(GbvsError::NegativeActivation);
    }
    let n = h * w;
    let falloff = Falloff::new(h, w, sigma);
    let mut reach = act.to_vec();
    for a in 0..n {
        for b in (a + 1)..n {
            let g = falloff.at(a, b);
            reach[a] += act[b] * g;
            reach[b] += act[a] * g;
        }
    }
    if reach.iter().any(|&r| r == 0.0) {
        return Ok(None);
    }
    let mass: Vec<f64> = act.iter().zip(&reach).map(|(a, r)| a * r).collect();
    Ok(Some(degree_distribution(mass)))
}

fn degree_distribution(mut degree: Vec<f64>) -> Vec<f64> {
    let total: f64 = degree.iter().sum();
    if total > 0.0 {
        degree.iter_mut().for_each(|d| *d /= total);
    } else {
        let u = 1.0 / degree.len() as f64;
        degree.iter_mut().for_each(|d| *d = u);
    }
    degree
}
