use std::f64::consts::PI;

use crate::imagecore::{normalize_unit, resize_rgb, rgb_to_gray, ImageError, ImageRgb, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Intensity,
    OpponentRg,
    OpponentBy,
    Orientation0,
    Orientation45,
    Orientation90,
    Orientation135,
}

impl Channel {
    pub const ALL: [Channel; 7] = [
        Channel::Intensity,
        Channel::OpponentRg,
        Channel::OpponentBy,
        Channel::Orientation0,
        Channel::Orientation45,
        Channel::Orientation90,
        Channel::Orientation135,
    ];

    /// Edge orientation in degrees for the Gabor channels.
    pub fn orientation_degrees(self) -> Option<f64> {
        match self {
            Channel::Orientation0 => Some(0.0),
            Channel::Orientation45 => Some(45.0),
            Channel::Orientation90 => Some(90.0),
            Channel::Orientation135 => Some(135.0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channel: Channel,
    pub map: Tensor<f64>,
}

pub const GABOR_SIZE: usize = 9;
pub const GABOR_WAVELENGTH: f64 = 4.0;
pub const GABOR_SIGMA: f64 = 2.0;

/// Responses below this magnitude are rounding residue and are flushed to 0
/// so that `normalize_unit` does not blow them up to full range.
const RESPONSE_FLOOR: f64 = 1e-12;

/// Odd-phase Gabor kernel, `GABOR_SIZE` square, row-major `[dy][dx]`.
///
/// `theta_deg` is the orientation of the edge the kernel responds to: the
/// carrier runs perpendicular to it, so 90° picks up vertical edges.
pub fn gabor_kernel(theta_deg: f64) -> Vec<f64> {
    let half = (GABOR_SIZE / 2) as isize;
    let theta = theta_deg.to_radians();
    let (s, c) = theta.sin_cos();
    let mut k = Vec::with_capacity(GABOR_SIZE * GABOR_SIZE);
    for dy in -half..=half {
        for dx in -half..=half {
            let (x, y) = (dx as f64, dy as f64);
            let carrier = -x * s + y * c;
            let envelope = (-(x * x + y * y) / (2.0 * GABOR_SIGMA * GABOR_SIGMA)).exp();
            k.push(envelope * (2.0 * PI * carrier / GABOR_WAVELENGTH).sin());
        }
    }
    k
}

/// Magnitude of the odd Gabor response with edge-replicating borders.
///
/// The kernel is antisymmetric, so each tap pair is folded into one product
/// against the difference of mirrored samples. A constant input then gives an
/// exact zero.
fn gabor_magnitude(src: &Tensor<f64>, kernel: &[f64]) -> Tensor<f64> {
    let (h, w) = src.dims2().expect("feature source is rank 2");
    let half = (GABOR_SIZE / 2) as isize;
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        src.at2(i, j)
    };
    // taps strictly before the centre in row-major order; their mirrors are after it
    let taps: Vec<(isize, isize, f64)> = (0..GABOR_SIZE * GABOR_SIZE / 2)
        .map(|idx| {
            let dy = (idx / GABOR_SIZE) as isize - half;
            let dx = (idx % GABOR_SIZE) as isize - half;
            (dy, dx, kernel[idx])
        })
        .collect();
    Tensor::from_fn_2d(h, w, |i, j| {
        let (i, j) = (i as isize, j as isize);
        let r: f64 = taps
            .iter()
            .map(|&(dy, dx, k)| k * (at(i + dy, j + dx) - at(i - dy, j - dx)))
            .sum();
        let m = r.abs();
        if m < RESPONSE_FLOOR {
            0.0
        } else {
            m
        }
    })
}

/// Seven channel maps at `side`×`side`, each rescaled to `[0, 1]`.
pub fn extract_features_at(img: &ImageRgb, side: usize) -> Result<Vec<FeatureMap>, ImageError> {
    let small = resize_rgb(img, side, side)?;
    let (r, g, b) = (small.channel(0), small.channel(1), small.channel(2));
    let gray = rgb_to_gray(&small);
    let rg = Tensor::from_fn_2d(side, side, |i, j| r.at2(i, j) - g.at2(i, j));
    let by = Tensor::from_fn_2d(side, side, |i, j| {
        b.at2(i, j) - (r.at2(i, j) + g.at2(i, j)) / 2.0
    });

    let mut out = Vec::with_capacity(Channel::ALL.len());
    for ch in Channel::ALL {
        let raw = match ch {
            Channel::Intensity => gray.clone(),
            Channel::OpponentRg => rg.clone(),
            Channel::OpponentBy => by.clone(),
            _ => {
                let theta = ch.orientation_degrees().expect("orientation channel");
                gabor_magnitude(&gray, &gabor_kernel(theta))
            }
        };
        out.push(FeatureMap {
            channel: ch,
            map: normalize_unit(&raw)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn energy(maps: &[FeatureMap], ch: Channel) -> f64 {
        maps.iter().find(|m| m.channel == ch).unwrap().map.sum()
    }

    #[test]
    fn kernels_are_odd() {
        for theta in [0.0, 45.0, 90.0, 135.0] {
            let k = gabor_kernel(theta);
            let n = k.len();
            for idx in 0..n {
                assert_eq!(k[idx], -k[n - 1 - idx]);
            }
        }
    }

    #[test]
    fn constant_image_features() {
        let img = ImageRgb::from_fn(40, 40, |_, _| [0.4, 0.4, 0.4]);
        let f = extract_features_at(&img, 32).unwrap();
        assert_eq!(f.len(), 7);
        for m in &f {
            assert_eq!(m.map.shape(), &[32, 32]);
            assert!(m.map.data().iter().all(|&v| v == 0.0), "{:?}", m.channel);
        }
    }

    #[test]
    fn vertical_edge_favours_ninety_degrees() {
        let img = ImageRgb::from_fn(32, 32, |_, j| if j < 16 { [0.1; 3] } else { [0.9; 3] });
        let f = extract_features_at(&img, 32).unwrap();
        let e90 = energy(&f, Channel::Orientation90);
        let e0 = energy(&f, Channel::Orientation0);
        assert!(e90 > e0, "e90 {e90} e0 {e0}");
        assert!(e90 > 0.0);
    }

    #[test]
    fn pure_red_opponency_is_flat() {
        let img = ImageRgb::from_fn(32, 32, |_, _| [1.0, 0.0, 0.0]);
        let small = resize_rgb(&img, 32, 32).unwrap();
        let (r, g) = (small.channel(0), small.channel(1));
        assert!(r.data().iter().zip(g.data()).all(|(a, b)| a - b == 1.0));
        let f = extract_features_at(&img, 32).unwrap();
        assert!(f[1].map.data().iter().all(|&v| v == 0.0));
        assert!(f[2].map.data().iter().all(|&v| v == 0.0));
    }
}
