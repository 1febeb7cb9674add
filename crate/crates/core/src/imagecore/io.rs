//! Readers and writers for binary PGM/PPM and 8-bit PNG.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{rgb_to_gray, ImageError, ImageRgb, Tensor};

struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    /// Samples scaled to `[0, 1]`, interleaved.
    samples: Vec<f64>,
}

fn decode_err(path: &Path, reason: impl Into<String>) -> ImageError {
    ImageError::DecodeError {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, ImageError> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ImageError::FileNotFound(path.display().to_string()),
        _ => ImageError::Io {
            path: path.display().to_string(),
            source: e,
        },
    })
}

fn parse_pnm(path: &Path, bytes: &[u8]) -> Result<Raster, ImageError> {
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(decode_err(path, "unsupported PNM variant")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(decode_err(path, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text
            .parse()
            .map_err(|_| decode_err(path, "malformed header field"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(decode_err(path, "missing raster separator"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(decode_err(path, "invalid header values"));
    }
    let bytes_per_sample = if maxval > 255 { 2 } else { 1 };
    let count = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < count * bytes_per_sample {
        return Err(decode_err(path, "truncated raster"));
    }
    let scale = maxval as f64;
    let samples = if bytes_per_sample == 1 {
        raster[..count]
            .iter()
            .map(|&b| (b as f64 / scale).min(1.0))
            .collect()
    } else {
        raster[..count * 2]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / scale).min(1.0))
            .collect()
    };
    Ok(Raster {
        width,
        height,
        channels,
        samples,
    })
}

fn parse_png(path: &Path, bytes: &[u8]) -> Result<Raster, ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| decode_err(path, e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img.color(),
        image::ColorType::L8
            | image::ColorType::L16
            | image::ColorType::La8
            | image::ColorType::La16
    );
    if gray {
        let samples = img
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(|b| b as f64 / 255.0)
            .collect();
        Ok(Raster {
            width,
            height,
            channels: 1,
            samples,
        })
    } else {
        let samples = img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|b| b as f64 / 255.0)
            .collect();
        Ok(Raster {
            width,
            height,
            channels: 3,
            samples,
        })
    }
}

fn read_raster(path: &Path) -> Result<Raster, ImageError> {
    let bytes = read_bytes(path)?;
    if bytes.len() >= 8 && bytes[..8] == [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a] {
        parse_png(path, &bytes)
    } else if bytes.len() >= 2 && bytes[0] == b'P' {
        parse_pnm(path, &bytes)
    } else {
        Err(decode_err(path, "unrecognised image format"))
    }
}

/// Load a PNG, PGM (P5) or PPM (P6) file as RGB in `[0, 1]`.
/// Grayscale sources are replicated across the three channels.
pub const IMAGE_EXTENSIONS: [&str; 4] = ["pgm", "ppm", "pnm", "png"];

/// Files in `dir` with an image extension, keyed by file stem.
pub fn list_images(dir: impl AsRef<Path>) -> Result<BTreeMap<String, PathBuf>, ImageError> {
    let dir = dir.as_ref();
    let io_err = |source| ImageError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(io_err)? {
        let path = e.map_err(io_err)?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRgb, ImageError> {
    let path = path.as_ref();
    let r = read_raster(path)?;
    let data = if r.channels == 1 {
        r.samples.iter().flat_map(|&v| [v, v, v]).collect()
    } else {
        r.samples
    };
    ImageRgb::new(Tensor::new(vec![r.height, r.width, 3], data)?)
}

/// Load an image as a single `[H, W]` channel; colour sources go through luma.
pub fn load_gray(path: impl AsRef<Path>) -> Result<Tensor<f64>, ImageError> {
    let path = path.as_ref();
    let r = read_raster(path)?;
    if r.channels == 1 {
        Tensor::new(vec![r.height, r.width], r.samples)
    } else {
        let img = ImageRgb::new(Tensor::new(vec![r.height, r.width, 3], r.samples)?)?;
        Ok(rgb_to_gray(&img))
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ImageError> {
    let io_err = |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(bytes).map_err(io_err)?;
    Ok(())
}

/// Binary PGM with maxval 255; values are clamped to `[0, 1]` and rounded.
pub fn save_pgm(path: impl AsRef<Path>, map: &Tensor<f64>) -> Result<(), ImageError> {
    let (h, w) = map.dims2()?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.data().iter().map(|&v| quantize(v)));
    write_file(path.as_ref(), &bytes)
}

pub fn save_ppm(path: impl AsRef<Path>, img: &ImageRgb) -> Result<(), ImageError> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend(img.tensor().data().iter().map(|&v| quantize(v)));
    write_file(path.as_ref(), &bytes)
}

pub fn save_png_gray(path: impl AsRef<Path>, map: &Tensor<f64>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let (h, w) = map.dims2()?;
    let raw: Vec<u8> = map.data().iter().map(|&v| quantize(v)).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| ImageError::InvalidDimensions(format!("{h}x{w}")))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| decode_err(path, e.to_string()))
}

/// Write a map as PNG when the extension is `.png`, PGM otherwise.
pub fn save_saliency(path: impl AsRef<Path>, map: &Tensor<f64>) -> Result<(), ImageError> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => save_png_gray(path, map),
        _ => save_pgm(path, map),
    }
}
