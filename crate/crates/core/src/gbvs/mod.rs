//! Graph-based visual saliency used to produce weak training labels.
//!
//! Each feature channel is turned into a Markov chain over the pixel lattice
//! whose transitions favour nearby, dissimilar nodes. The chain's equilibrium
//! is the channel activation. A second chain, weighted by that activation,
//! concentrates mass on the strongest regions. Channel maps are summed and
//! rescaled to `[0, 1]`.
//!
//! Both chains have symmetric base weights, so their equilibria have closed
//! forms via detailed balance. [`Solver::Reversible`] uses those; the power
//! iteration path is kept for general chains and as a cross-check.

mod chain;
mod features;

use thiserror::Error;

use crate::imagecore::{normalize_unit, ImageError, ImageRgb, Resolution, SaliencyMap, Tensor};

pub use chain::{
    build_concentration_chain, build_dissimilarity_chain, concentration_equilibrium,
    dissimilarity_equilibrium, equilibrium_distribution, Equilibrium, MarkovChain, LOG_EPS,
    STOCHASTIC_TOL,
};
pub use features::{
    extract_features_at, gabor_kernel, Channel, FeatureMap, GABOR_SIGMA, GABOR_SIZE,
    GABOR_WAVELENGTH,
};

pub const WORKING_SIDE: usize = 32;
pub const DEFAULT_SIGMA_FRAC: f64 = 0.15;
pub const EQUILIBRIUM_TOL: f64 = 1e-9;
pub const EQUILIBRIUM_MAX_ITER: usize = 10_000;

#[derive(Debug, Error)]
pub enum GbvsError {
    #[error("distance falloff sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("transition matrix is not row-stochastic (max row error {0:e})")]
    NotStochastic(f64),
    #[error("feature map contains non-finite values")]
    NonFinite,
    #[error("activation must be finite and nonnegative")]
    NegativeActivation,
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    /// Closed-form equilibria from detailed balance, with power iteration as
    /// the fallback when a chain has uniform fallback rows.
    Reversible,
    /// Materialise every chain and run averaged power iteration.
    PowerIteration,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbvsParams {
    pub working_side: usize,
    /// Distance falloff as a fraction of the working width.
    pub sigma_frac: f64,
    pub solver: Solver,
}

impl Default for GbvsParams {
    fn default() -> Self {
        Self {
            working_side: WORKING_SIDE,
            sigma_frac: DEFAULT_SIGMA_FRAC,
            solver: Solver::Reversible,
        }
    }
}

impl GbvsParams {
    pub fn sigma(&self) -> f64 {
        self.sigma_frac * self.working_side as f64
    }
}

pub fn extract_features(img: &ImageRgb) -> Result<Vec<FeatureMap>, ImageError> {
    extract_features_at(img, WORKING_SIDE)
}

fn is_flat(v: &[f64]) -> bool {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    hi - lo <= 1e-12 * hi.abs()
}

fn power_equilibrium(chain: &MarkovChain) -> Result<Vec<f64>, GbvsError> {
    Ok(equilibrium_distribution(chain, EQUILIBRIUM_TOL, EQUILIBRIUM_MAX_ITER)?.distribution)
}

/// Second Markov pass: equilibrium of the chain with
/// `w(a, b) = act(b) · exp(−d²/2σ²)`, reshaped to the input grid.
///
/// A flat activation carries no signal and maps to the uniform distribution.
pub fn concentrate(activation: &Tensor<f64>, sigma: f64) -> Result<Tensor<f64>, GbvsError> {
    concentrate_with(activation, sigma, Solver::PowerIteration)
}

fn concentrate_with(
    activation: &Tensor<f64>,
    sigma: f64,
    solver: Solver,
) -> Result<Tensor<f64>, GbvsError> {
    let (h, w) = activation.dims2()?;
    if is_flat(activation.data()) {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(GbvsError::InvalidSigma(sigma));
        }
        return Ok(Tensor::full(vec![h, w], 1.0 / (h * w) as f64));
    }
    let closed = match solver {
        Solver::Reversible => concentration_equilibrium(activation, sigma)?,
        Solver::PowerIteration => None,
    };
    let v = match closed {
        Some(v) => v,
        None => power_equilibrium(&build_concentration_chain(activation, sigma)?)?,
    };
    Ok(Tensor::new(vec![h, w], v)?)
}

/// Equilibrium of the dissimilarity chain built from one feature map.
pub fn channel_activation(
    f: &Tensor<f64>,
    sigma: f64,
    solver: Solver,
) -> Result<Tensor<f64>, GbvsError> {
    let (h, w) = f.dims2()?;
    let closed = match solver {
        Solver::Reversible => dissimilarity_equilibrium(f, sigma)?,
        Solver::PowerIteration => None,
    };
    let v = match closed {
        Some(v) => v,
        None => power_equilibrium(&build_dissimilarity_chain(f, sigma)?)?,
    };
    Ok(Tensor::new(vec![h, w], v)?)
}

pub fn gbvs_saliency(img: &ImageRgb) -> Result<SaliencyMap, GbvsError> {
    gbvs_saliency_with(img, &GbvsParams::default())
}

pub fn gbvs_saliency_with(img: &ImageRgb, params: &GbvsParams) -> Result<SaliencyMap, GbvsError> {
    let side = params.working_side;
    let sigma = params.sigma();
    let features = extract_features_at(img, side)?;
    let mut total = Tensor::zeros(vec![side, side]);
    for fm in &features {
        let act = channel_activation(&fm.map, sigma, params.solver)?;
        let conc = concentrate_with(&act, sigma, params.solver)?;
        for (t, c) in total.data_mut().iter_mut().zip(conc.data()) {
            *t += c;
        }
    }
    let map = normalize_unit(&total)?;
    let resolution = if side == SaliencyMap::NETWORK_SIDE {
        Resolution::Network32
    } else {
        Resolution::Full
    };
    Ok(SaliencyMap::new(map, resolution)?)
}
