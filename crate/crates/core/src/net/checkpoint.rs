//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `WEPSAM01`, then a sequence of tensors until end
//! of file. Each tensor is `u32` name length, UTF-8 name, `u32` rank, `rank`
//! `u32` dims, then the values as little-endian `f32`. All integers are
//! little-endian. The first tensor, `arch`, records the layer widths; the
//! parameters follow in layer order, then their velocities (`<name>.velocity`).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::imagecore::Tensor;

use super::{NetError, NetSpec, NetworkParams, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WEPSAM01";
const ARCH: &str = "arch";
const VELOCITY_SUFFIX: &str = ".velocity";

fn push_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend((d as u32).to_le_bytes());
    }
    for v in values {
        buf.extend(v.to_le_bytes());
    }
}

fn arch_values(spec: &NetSpec) -> Vec<f32> {
    let mut v = vec![spec.input_side];
    v.extend(spec.channels);
    v.extend(spec.kernels);
    v.extend([spec.fc1, spec.fc2, spec.maxout_pieces]);
    v.into_iter().map(|x| x as f32).collect()
}

pub fn encode_checkpoint(params: &NetworkParams<f32>) -> Vec<u8> {
    let mut buf = CHECKPOINT_MAGIC.to_vec();
    push_tensor(&mut buf, ARCH, &[10], &arch_values(&params.spec));
    let shapes = params.spec.param_shapes();
    for ((name, shape), t) in shapes.iter().zip(params.weights.tensors()) {
        push_tensor(&mut buf, name, shape, t.data());
    }
    for ((name, shape), t) in shapes.iter().zip(params.velocity.tensors()) {
        push_tensor(
            &mut buf,
            &format!("{name}{VELOCITY_SUFFIX}"),
            shape,
            t.data(),
        );
    }
    buf
}

/// Write via a temporary sibling file and rename, so readers never see a
/// partial checkpoint.
pub fn write_checkpoint(
    path: impl AsRef<Path>,
    params: &NetworkParams<f32>,
) -> Result<(), NetError> {
    let path = path.as_ref();
    let io_err = |source| NetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&encode_checkpoint(params)).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    fs::rename(&tmp, path).map_err(io_err)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], origin: &str) -> Result<NetworkParams<f32>, NetError> {
    let corrupt = |reason: &str| NetError::Checkpoint {
        path: origin.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("unknown magic"));
    }
    let mut r = Reader { bytes, pos: 8 };
    let mut tensors: HashMap<String, Tensor<f32>> = HashMap::new();
    while r.pos < bytes.len() {
        let name_len = r.u32().ok_or_else(|| corrupt("truncated name length"))?;
        let name = r.take(name_len).ok_or_else(|| corrupt("truncated name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| corrupt("name is not UTF-8"))?;
        let rank = r.u32().ok_or_else(|| corrupt("truncated rank"))?;
        if rank == 0 || rank > 8 {
            return Err(corrupt("unsupported tensor rank"));
        }
        let dims = (0..rank)
            .map(|_| r.u32())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| corrupt("truncated dims"))?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt("tensor too large"))?;
        let raw = r
            .take(
                count
                    .checked_mul(4)
                    .ok_or_else(|| corrupt("tensor too large"))?,
            )
            .ok_or_else(|| corrupt("truncated tensor data"))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(dims, values).map_err(|e| corrupt(&e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(corrupt(&format!("duplicate tensor {name}")));
        }
    }

    let arch = tensors
        .remove(ARCH)
        .ok_or_else(|| corrupt("missing arch record"))?;
    let a: Vec<usize> = arch.data().iter().map(|&v| v as usize).collect();
    if a.len() != 10 {
        return Err(corrupt("malformed arch record"));
    }
    let spec = NetSpec {
        input_side: a[0],
        channels: [a[1], a[2], a[3]],
        kernels: [a[4], a[5], a[6]],
        fc1: a[7],
        fc2: a[8],
        maxout_pieces: a[9],
    };
    spec.validate()?;
    let mut take_set = |suffix: &str| -> Result<ParamSet<f32>, NetError> {
        let list = spec
            .param_shapes()
            .into_iter()
            .map(|(name, _)| {
                let key = format!("{name}{suffix}");
                tensors
                    .remove(&key)
                    .ok_or_else(|| corrupt(&format!("missing tensor {key}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        ParamSet::from_tensors(&spec, list)
            .map_err(|e| NetError::CheckpointShapeMismatch(e.to_string()))
    };
    let weights = take_set("")?;
    let velocity = take_set(VELOCITY_SUFFIX)?;
    Ok(NetworkParams {
        spec,
        weights,
        velocity,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<NetworkParams<f32>, NetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
