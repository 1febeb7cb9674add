//! Seeded synthetic scenes: bright blobs on a textured ground, with a
//! blob-density map standing in for human fixation density.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imagecore::{ImageRgb, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: ImageRgb,
    /// Sum of Gaussians at the blob centres, scaled to max 1.
    pub density: Tensor<f64>,
    pub blobs: Vec<Blob>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub side: usize,
    pub max_blobs: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Density spread relative to the blob radius.
    pub density_spread: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            side: 64,
            max_blobs: 3,
            min_radius: 4.0,
            max_radius: 9.0,
            density_spread: 1.0,
        }
    }
}

pub fn scene(params: &SceneParams, rng: &mut impl Rng) -> Scene {
    let n = params.side;
    let s = n as f64;
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let ground: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.4));
    let freq = rng.random_range(0.15..0.5);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let count = rng.random_range(1..=params.max_blobs.max(1));
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let radius = rng.random_range(params.min_radius..=params.max_radius);
            Blob {
                row: rng.random_range(radius..s - radius),
                col: rng.random_range(radius..s - radius),
                radius,
            }
        })
        .collect();
    let colors: Vec<[f64; 3]> = blobs
        .iter()
        .map(|_| std::array::from_fn(|_| rng.random_range(0.75..1.0)))
        .collect();
    let texture: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = ((k / n) as f64, (k % n) as f64);
            0.06 * (freq * (i * ca + j * sa)).sin() + noise.sample(rng)
        })
        .collect();

    let image = ImageRgb::from_fn(n, n, |i, j| {
        let (y, x) = (i as f64, j as f64);
        let mut px: [f64; 3] = std::array::from_fn(|c| ground[c] + texture[i * n + j]);
        for (b, col) in blobs.iter().zip(&colors) {
            let d = ((y - b.row).powi(2) + (x - b.col).powi(2)).sqrt();
            // soft edge over one pixel
            let a = (b.radius + 0.5 - d).clamp(0.0, 1.0);
            for c in 0..3 {
                px[c] = px[c] * (1.0 - a) + col[c] * a;
            }
        }
        px
    });

    let mut density = Tensor::from_fn_2d(n, n, |i, j| {
        blobs
            .iter()
            .map(|b| {
                let sigma = params.density_spread * b.radius;
                let d2 = (i as f64 - b.row).powi(2) + (j as f64 - b.col).powi(2);
                (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .sum::<f64>()
    });
    let peak = density.max();
    density.data_mut().iter_mut().for_each(|v| *v /= peak);
    Scene {
        image,
        density,
        blobs,
    }
}

/// `count` scenes from one seed.
pub fn corpus(count: usize, params: &SceneParams, seed: u64) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| scene(params, &mut rng)).collect()
}

/// Binary map marking the pixels nearest each blob centre.
pub fn fixations(scene: &Scene) -> Tensor<f64> {
    let (h, w) = scene.density.dims2().expect("2-d density");
    let mut t = Tensor::zeros(vec![h, w]);
    for b in &scene.blobs {
        let i = (b.row.round() as usize).min(h - 1);
        let j = (b.col.round() as usize).min(w - 1);
        t.data_mut()[i * w + j] = 1.0;
    }
    t
}
