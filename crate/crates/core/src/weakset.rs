//! Histogram entropy of weak labels, low-entropy selection and JSON-lines
//! dataset manifests.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::Tensor;

pub const BINS: usize = 256;

/// Desk-scale default for how many weak labels are kept.
pub const DEFAULT_K: usize = 10_000;

#[derive(Debug, Error)]
pub enum WeaksetError {
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("duplicate image_id {0:?} in manifest")]
    DuplicateId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    pub map_path: PathBuf,
    pub entropy_bits: f64,
    pub split: Split,
}

/// 256-bin histogram; `v` goes to bin `min(floor(v·256), 255)`.
pub fn histogram256(map: &Tensor<f64>) -> Result<[u64; BINS], WeaksetError> {
    let mut counts = [0u64; BINS];
    for &v in map.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(WeaksetError::OutOfRange(v));
        }
        let bin = ((v * BINS as f64).floor() as usize).min(BINS - 1);
        counts[bin] += 1;
    }
    Ok(counts)
}

/// Shannon entropy in bits of the normalised 256-bin histogram.
pub fn entropy(map: &Tensor<f64>) -> Result<f64, WeaksetError> {
    let counts = histogram256(map)?;
    let total = map.len() as f64;
    let e: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    // a single occupied bin yields -0.0
    Ok(e.max(0.0))
}

/// The `k` lowest-entropy records, ties broken by `image_id`.
pub fn select_low_entropy(records: &[WeakLabelRecord], k: usize) -> Vec<WeakLabelRecord> {
    let mut sorted: Vec<&WeakLabelRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.entropy_bits
            .total_cmp(&b.entropy_bits)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    sorted.into_iter().take(k).cloned().collect()
}

/// Re-tag splits: records are shuffled by a seeded generator and the first
/// `round(val_fraction · n)` become validation, at least one when `n ≥ 2`
/// and `val_fraction > 0`. Record order is kept.
pub fn assign_splits(records: &mut [WeakLabelRecord], val_fraction: f64, seed: u64) {
    let n = records.len();
    let mut n_val = (val_fraction.clamp(0.0, 1.0) * n as f64).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for r in records.iter_mut() {
        r.split = Split::Train;
    }
    for &k in &order[..n_val.min(n)] {
        records[k].split = Split::Val;
    }
}

/// Ordered records with unique `image_id`s.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    records: Vec<WeakLabelRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<WeakLabelRecord>) -> Result<Self, WeaksetError> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(WeaksetError::DuplicateId(r.image_id.clone()));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[WeakLabelRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records carrying the given split tag.
    pub fn split(&self, split: Split) -> Self {
        Self {
            records: self
                .records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
        }
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self, WeaksetError> {
        let path = path.as_ref();
        let io_err = |source| WeaksetError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = fs::File::open(path).map_err(io_err)?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| WeaksetError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::new(records)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), WeaksetError> {
        let path = path.as_ref();
        let io_err = |source| WeaksetError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("records serialize");
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(&out).map_err(io_err)
    }
}
