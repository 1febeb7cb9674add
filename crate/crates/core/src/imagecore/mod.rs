//! Tensors, image containers, file I/O and resampling shared by every stage
//! of the pipeline.

mod io;
mod tensor;

use thiserror::Error;

pub use io::{
    list_images, load_gray, load_image, save_pgm, save_png_gray, save_ppm, save_saliency,
    IMAGE_EXTENSIONS,
};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("cannot decode {path}: {reason}")]
    DecodeError { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("shape mismatch: expected {expected} elements, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("input contains no finite value")]
    NonFiniteInput,
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
}

/// RGB image stored as `[H, W, 3]` with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    tensor: Tensor<f64>,
}

impl ImageRgb {
    pub fn new(tensor: Tensor<f64>) -> Result<Self, ImageError> {
        match tensor.shape() {
            [_, _, 3] => {}
            other => {
                return Err(ImageError::InvalidDimensions(format!(
                    "expected [H, W, 3], got {other:?}"
                )))
            }
        }
        if let Some(&bad) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange(bad));
        }
        Ok(Self { tensor })
    }

    /// Build an image from a per-pixel closure returning `(r, g, b)`.
    /// Values are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height {
            for j in 0..width {
                let px = f(i, j);
                data.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            tensor: Tensor::new(vec![height, width, 3], data).expect("shape matches"),
        }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.tensor
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let base = (i * self.width() + j) * 3;
        let d = self.tensor.data();
        [d[base], d[base + 1], d[base + 2]]
    }

    /// One channel as an `[H, W]` tensor.
    pub fn channel(&self, c: usize) -> Tensor<f64> {
        assert!(c < 3, "channel index {c} out of range");
        let d = self.tensor.data();
        let data = d.iter().skip(c).step_by(3).copied().collect();
        Tensor::new(vec![self.height(), self.width()], data).expect("shape matches")
    }

    pub fn from_channels(
        r: &Tensor<f64>,
        g: &Tensor<f64>,
        b: &Tensor<f64>,
    ) -> Result<Self, ImageError> {
        let (h, w) = r.dims2()?;
        if g.shape() != r.shape() || b.shape() != r.shape() {
            return Err(ImageError::InvalidDimensions(
                "channel shapes differ".to_string(),
            ));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for k in 0..h * w {
            data.push(r.data()[k]);
            data.push(g.data()[k]);
            data.push(b.data()[k]);
        }
        Self::new(Tensor::new(vec![h, w, 3], data)?)
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width();
        Self::from_fn(self.height(), w, |i, j| self.pixel(i, w - 1 - j))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Network32,
    Full,
}

/// Single-channel nonnegative map.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    tensor: Tensor<f64>,
    resolution: Resolution,
}

impl SaliencyMap {
    pub const NETWORK_SIDE: usize = 32;

    pub fn new(tensor: Tensor<f64>, resolution: Resolution) -> Result<Self, ImageError> {
        let (h, w) = tensor.dims2()?;
        if resolution == Resolution::Network32
            && (h != Self::NETWORK_SIDE || w != Self::NETWORK_SIDE)
        {
            return Err(ImageError::InvalidDimensions(format!(
                "network-resolution map must be 32x32, got {h}x{w}"
            )));
        }
        if let Some(&bad) = tensor.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(ImageError::OutOfRange(bad));
        }
        Ok(Self { tensor, resolution })
    }

    /// Full-resolution map from any `[H, W]` tensor.
    pub fn full(tensor: Tensor<f64>) -> Result<Self, ImageError> {
        Self::new(tensor, Resolution::Full)
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f64> {
        self.tensor
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }
}

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub fn rgb_to_gray(img: &ImageRgb) -> Tensor<f64> {
    let data = img
        .tensor()
        .data()
        .chunks_exact(3)
        .map(|px| {
            let g = LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2];
            g.clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(vec![img.height(), img.width()], data).expect("shape matches")
}

/// Corner-aligned source coordinate for destination index `dst`.
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    if dst_len == 1 {
        (src_len as f64 - 1.0) / 2.0
    } else {
        dst as f64 * (src_len as f64 - 1.0) / (dst_len as f64 - 1.0)
    }
}

/// Interpolation taps `(lo, hi, frac)` along one axis.
fn taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    (0..dst_len)
        .map(|d| {
            let s = source_coord(d, src_len, dst_len);
            let lo = (s.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resampling with corner-aligned sample positions.
///
/// Each output is a convex combination of at most four source pixels, so the
/// output range never leaves the input range.
pub fn resize_bilinear(
    src: &Tensor<f64>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<f64>, ImageError> {
    let (h, w) = src.dims2()?;
    if out_h == 0 || out_w == 0 {
        return Err(ImageError::InvalidDimensions(format!(
            "target size {out_h}x{out_w}"
        )));
    }
    if out_h == h && out_w == w {
        return Ok(src.clone());
    }
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let d = src.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = d[r0 * w + c0] * (1.0 - fx) + d[r0 * w + c1] * fx;
            let bottom = d[r1 * w + c0] * (1.0 - fx) + d[r1 * w + c1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Resample every channel of an RGB image.
pub fn resize_rgb(img: &ImageRgb, out_h: usize, out_w: usize) -> Result<ImageRgb, ImageError> {
    let channels: Vec<Tensor<f64>> = (0..3)
        .map(|c| {
            resize_bilinear(&img.channel(c), out_h, out_w).map(|t| t.map(|v| v.clamp(0.0, 1.0)))
        })
        .collect::<Result<_, _>>()?;
    ImageRgb::from_channels(&channels[0], &channels[1], &channels[2])
}

/// Affine rescale to `[0, 1]`; a constant map becomes all zeros.
///
/// Non-finite entries are ignored when computing the range and mapped to 0.
pub fn normalize_unit(map: &Tensor<f64>) -> Result<Tensor<f64>, ImageError> {
    let finite = map.data().iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return Err(ImageError::NonFiniteInput);
    }
    if hi <= lo {
        return Ok(Tensor::zeros(map.shape().to_vec()));
    }
    let span = hi - lo;
    Ok(map.map(|v| if v.is_finite() { (v - lo) / span } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_fn_2d(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn gray_conversion_cases() {
        let white = ImageRgb::from_fn(2, 2, |_, _| [1.0; 3]);
        assert!(rgb_to_gray(&white)
            .data()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-15));
        let red = ImageRgb::from_fn(1, 1, |_, _| [1.0, 0.0, 0.0]);
        assert_eq!(rgb_to_gray(&red).data()[0], 0.299);
        let mid = ImageRgb::from_fn(1, 1, |_, _| [0.5; 3]);
        assert!((rgb_to_gray(&mid).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = Tensor::full(vec![3, 5], 0.7);
        let up = resize_bilinear(&c, 11, 4).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let x = t2(&[&[0.1, 0.9], &[0.3, 0.2]]);
        assert_eq!(resize_bilinear(&x, 2, 2).unwrap(), x);
    }

    #[test]
    fn resize_two_by_three_middle_column() {
        let x = t2(&[&[0.0, 1.0], &[0.0, 1.0]]);
        let y = resize_bilinear(&x, 2, 3).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.at2(0, 1), 0.5);
        assert_eq!(y.at2(1, 1), 0.5);
        assert_eq!(y.at2(0, 0), 0.0);
        assert_eq!(y.at2(1, 2), 1.0);
    }

    #[test]
    fn resize_single_output_samples_center() {
        let x = t2(&[&[0.0, 1.0], &[2.0, 3.0]]);
        let y = resize_bilinear(&x, 1, 1).unwrap();
        assert_eq!(y.data()[0], 1.5);
    }

    #[test]
    fn resize_rejects_zero_target() {
        let x = Tensor::full(vec![2, 2], 1.0);
        assert!(matches!(
            resize_bilinear(&x, 0, 3),
            Err(ImageError::InvalidDimensions(_))
        ));
    }

    #[test]
    fn normalize_cases() {
        let x = t2(&[&[2.0, 4.0], &[6.0, 8.0]]);
        let y = normalize_unit(&x).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let c = Tensor::full(vec![3, 3], 4.2);
        assert!(normalize_unit(&c).unwrap().data().iter().all(|&v| v == 0.0));
        let unit = t2(&[&[0.0, 0.25], &[0.5, 1.0]]);
        assert_eq!(normalize_unit(&unit).unwrap(), unit);
        let bad = Tensor::full(vec![2, 1], f64::NAN);
        assert!(matches!(
            normalize_unit(&bad),
            Err(ImageError::NonFiniteInput)
        ));
    }

    #[test]
    fn saliency_map_contracts() {
        assert!(SaliencyMap::new(Tensor::zeros(vec![32, 32]), Resolution::Network32).is_ok());
        assert!(SaliencyMap::new(Tensor::zeros(vec![16, 32]), Resolution::Network32).is_err());
        assert!(SaliencyMap::full(Tensor::full(vec![2, 2], -0.1)).is_err());
    }

    #[test]
    fn image_rejects_out_of_range() {
        let t = Tensor::new(vec![1, 1, 3], vec![0.0, 1.5, 0.0]).unwrap();
        assert!(ImageRgb::new(t).is_err());
    }
}
