//! The five-layer saliency CNN: three conv-ReLU-maxpool stages, a ReLU fully
//! connected layer, and a fully connected layer reduced by maxout to the
//! flattened 32×32 map.

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::imagecore::{resize_rgb, ImageError, ImageRgb, Scalar, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use layers::{
    conv2d, conv2d_backward, fully_connected, fully_connected_backward, maxout, maxout_backward,
    maxpool2, maxpool2_backward, mse_loss, relu, relu_backward, ConvGrads, FcGrads,
};

pub const INIT_WEIGHT_STD: f64 = 0.01;
pub const INIT_BIAS: f64 = 0.1;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("max pooling needs even dimensions, got {height}x{width}")]
    OddDimension { height: usize, width: usize },
    #[error("length {len} is not divisible into {pieces} maxout pieces")]
    IndivisibleLength { len: usize, pieces: usize },
    #[error("invalid network layout: {0}")]
    InvalidSpec(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("checkpoint does not match the network layout: {0}")]
    CheckpointShapeMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetSpec {
    /// Side of the square RGB input.
    pub input_side: usize,
    pub channels: [usize; 3],
    pub kernels: [usize; 3],
    pub fc1: usize,
    pub fc2: usize,
    pub maxout_pieces: usize,
}

impl NetSpec {
    /// 128×128 input, 32/64/128 channels, 32768→2048→2048→1024.
    pub const fn standard() -> Self {
        Self {
            input_side: 128,
            channels: [32, 64, 128],
            kernels: [5, 3, 3],
            fc1: 2048,
            fc2: 2048,
            maxout_pieces: 2,
        }
    }

    /// Same layer stack and 1024-D output at a size that trains on a laptop
    /// CPU: 32×32 input, 8/16/16 channels, 256→256→2048→1024.
    pub const fn compact() -> Self {
        Self {
            input_side: 32,
            channels: [8, 16, 16],
            kernels: [5, 3, 3],
            fc1: 256,
            fc2: 2048,
            maxout_pieces: 2,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidSpec(m));
        if self.input_side == 0 || self.input_side % 8 != 0 {
            return bad(format!(
                "input side {} must be a positive multiple of 8",
                self.input_side
            ));
        }
        if self.channels.contains(&0) || self.fc1 == 0 || self.fc2 == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.kernels.iter().any(|&k| k % 2 == 0) {
            return bad(format!("kernels {:?} must be odd", self.kernels));
        }
        if self.maxout_pieces == 0 || self.fc2 % self.maxout_pieces != 0 {
            return bad(format!(
                "fc2 width {} not divisible by {} maxout pieces",
                self.fc2, self.maxout_pieces
            ));
        }
        Ok(())
    }

    pub fn stage_side(&self, stage: usize) -> usize {
        self.input_side >> stage
    }

    pub fn flatten(&self) -> usize {
        let s = self.stage_side(3);
        s * s * self.channels[2]
    }

    pub fn outputs(&self) -> usize {
        self.fc2 / self.maxout_pieces
    }

    /// Output map side when the output is a square map.
    pub fn output_side(&self) -> Option<usize> {
        let n = self.outputs();
        let s = (n as f64).sqrt().round() as usize;
        (s * s == n).then_some(s)
    }

    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let [c1, c2, c3] = self.channels;
        let [k1, k2, k3] = self.kernels;
        vec![
            ("conv1.weight", vec![c1, 3, k1, k1]),
            ("conv1.bias", vec![c1]),
            ("conv2.weight", vec![c2, c1, k2, k2]),
            ("conv2.bias", vec![c2]),
            ("conv3.weight", vec![c3, c2, k3, k3]),
            ("conv3.bias", vec![c3]),
            ("fc1.weight", vec![self.fc1, self.flatten()]),
            ("fc1.bias", vec![self.fc1]),
            ("fc2.weight", vec![self.fc2, self.fc1]),
            ("fc2.bias", vec![self.fc2]),
        ]
    }
}

/// Ordered parameter tensors in [`NetSpec::param_shapes`] order. Also used
/// for gradients and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros(spec: &NetSpec) -> Self {
        Self {
            tensors: spec
                .param_shapes()
                .into_iter()
                .map(|(_, s)| Tensor::zeros(s))
                .collect(),
        }
    }

    pub fn from_tensors(spec: &NetSpec, tensors: Vec<Tensor<T>>) -> Result<Self, NetError> {
        let shapes = spec.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(NetError::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(NetError::ShapeMismatch(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn conv_weight(&self, stage: usize) -> &[T] {
        self.tensors[2 * stage].data()
    }

    pub fn conv_bias(&self, stage: usize) -> &[T] {
        self.tensors[2 * stage + 1].data()
    }

    pub fn fc_weight(&self, layer: usize) -> &[T] {
        self.tensors[6 + 2 * layer].data()
    }

    pub fn fc_bias(&self, layer: usize) -> &[T] {
        self.tensors[7 + 2 * layer].data()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Learnable parameters plus the Nesterov velocity for each tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub spec: NetSpec,
    pub weights: ParamSet<T>,
    pub velocity: ParamSet<T>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            spec: self.spec,
            weights: self.weights.cast(),
            velocity: self.velocity.cast(),
        }
    }
}

/// Weights drawn from `N(0, 0.01²)` with a seeded ChaCha generator, biases
/// 0.1, velocities 0.
pub fn init_params<T: Scalar>(spec: &NetSpec, seed: u64) -> Result<NetworkParams<T>, NetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_WEIGHT_STD).expect("valid std");
    let tensors = spec
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            if name.ends_with(".bias") {
                Tensor::full(shape, T::of(INIT_BIAS))
            } else {
                let len = shape.iter().product();
                let data = (0..len).map(|_| T::of(normal.sample(&mut rng))).collect();
                Tensor::new(shape, data).expect("shape matches")
            }
        })
        .collect();
    Ok(NetworkParams {
        spec: *spec,
        weights: ParamSet { tensors },
        velocity: ParamSet::zeros(spec),
    })
}

/// Intermediate values kept by the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Zero-padded input of each conv stage.
    conv_in: [Vec<T>; 3],
    /// Post-ReLU conv output of each stage (pooling input).
    conv_act: [Vec<T>; 3],
    pool_idx: [Vec<usize>; 3],
    flat: Vec<T>,
    hidden: Vec<T>,
    fc2_out: Vec<T>,
    maxout_idx: Vec<usize>,
}

fn check_input<T: Scalar>(spec: &NetSpec, input: &[T]) -> Result<(), NetError> {
    let expect = 3 * spec.input_side * spec.input_side;
    if input.len() != expect {
        return Err(NetError::ShapeMismatch(format!(
            "network input has {} values, expected {expect}",
            input.len()
        )));
    }
    Ok(())
}

/// Forward pass over a standardized `[3, S, S]` input.
pub fn forward_cached<T: Scalar>(
    spec: &NetSpec,
    params: &ParamSet<T>,
    input: &[T],
) -> Result<(Vec<T>, ForwardCache<T>), NetError> {
    check_input(spec, input)?;
    let mut x = input.to_vec();
    let mut in_ch = 3;
    let mut conv_in: [Vec<T>; 3] = Default::default();
    let mut conv_act: [Vec<T>; 3] = Default::default();
    let mut pool_idx: [Vec<usize>; 3] = Default::default();
    for stage in 0..3 {
        let side = spec.stage_side(stage);
        let (k, f) = (spec.kernels[stage], spec.channels[stage]);
        let xpad = layers::pad_chw(&x, in_ch, side, side, k / 2);
        let mut y = layers::conv_forward(
            &xpad,
            in_ch,
            side,
            side,
            params.conv_weight(stage),
            params.conv_bias(stage),
            f,
            k,
        );
        layers::relu_in_place(&mut y);
        let (pooled, idx) = layers::maxpool2_forward(&y, f, side, side);
        conv_in[stage] = xpad;
        conv_act[stage] = y;
        pool_idx[stage] = idx;
        x = pooled;
        in_ch = f;
    }
    let flat = x;
    let mut hidden = layers::fc_forward(&flat, params.fc_weight(0), params.fc_bias(0));
    layers::relu_in_place(&mut hidden);
    let fc2_out = layers::fc_forward(&hidden, params.fc_weight(1), params.fc_bias(1));
    let (out, maxout_idx) = layers::maxout_forward(&fc2_out, spec.maxout_pieces);
    Ok((
        out,
        ForwardCache {
            conv_in,
            conv_act,
            pool_idx,
            flat,
            hidden,
            fc2_out,
            maxout_idx,
        },
    ))
}

pub fn forward_raw<T: Scalar>(
    spec: &NetSpec,
    params: &ParamSet<T>,
    input: &[T],
) -> Result<Vec<T>, NetError> {
    forward_cached(spec, params, input).map(|(out, _)| out)
}

/// Backpropagate `grad_out` (∂L/∂output) and add parameter gradients to `acc`.
pub fn backward_into<T: Scalar>(
    spec: &NetSpec,
    params: &ParamSet<T>,
    cache: &ForwardCache<T>,
    grad_out: &[T],
    acc: &mut ParamSet<T>,
) {
    let g_fc2 = layers::route_backward(grad_out, &cache.maxout_idx, cache.fc2_out.len());
    let mut g_hidden = {
        let (w2, b2) = split_pair(acc, 8);
        layers::fc_backward(&cache.hidden, params.fc_weight(1), &g_fc2, w2, b2, true)
            .expect("requested")
    };
    layers::relu_mask(&cache.hidden, &mut g_hidden);
    let mut g = {
        let (w1, b1) = split_pair(acc, 6);
        layers::fc_backward(&cache.flat, params.fc_weight(0), &g_hidden, w1, b1, true)
            .expect("requested")
    };
    for stage in (0..3).rev() {
        let side = spec.stage_side(stage);
        let f = spec.channels[stage];
        let in_ch = if stage == 0 {
            3
        } else {
            spec.channels[stage - 1]
        };
        let mut g_act =
            layers::route_backward(&g, &cache.pool_idx[stage], cache.conv_act[stage].len());
        layers::relu_mask(&cache.conv_act[stage], &mut g_act);
        let (w, b) = split_pair(acc, 2 * stage);
        let dx = layers::conv_backward(
            &cache.conv_in[stage],
            in_ch,
            side,
            side,
            params.conv_weight(stage),
            f,
            spec.kernels[stage],
            &g_act,
            w,
            b,
            stage > 0,
        );
        if let Some(dx) = dx {
            g = dx;
        }
    }
}

fn split_pair<T: Scalar>(acc: &mut ParamSet<T>, idx: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = acc.tensors_mut()[idx..idx + 2].split_at_mut(1);
    (a[0].data_mut(), b[0].data_mut())
}

/// Loss and parameter gradient for one sample; gradients are added to `acc`.
pub fn loss_and_grad_into<T: Scalar>(
    spec: &NetSpec,
    params: &ParamSet<T>,
    input: &[T],
    target: &[T],
    acc: &mut ParamSet<T>,
) -> Result<T, NetError> {
    let (out, cache) = forward_cached(spec, params, input)?;
    if target.len() != out.len() {
        return Err(NetError::ShapeMismatch(format!(
            "target has {} values, network emits {}",
            target.len(),
            out.len()
        )));
    }
    let (loss, grad) = layers::mse(&out, target);
    backward_into(spec, params, &cache, &grad, acc);
    Ok(loss)
}

/// Freshly allocated gradient for one `(input, target)` pair.
pub fn backward<T: Scalar>(
    spec: &NetSpec,
    params: &ParamSet<T>,
    input: &[T],
    target: &[T],
) -> Result<(T, ParamSet<T>), NetError> {
    let mut acc = ParamSet::zeros(spec);
    let loss = loss_and_grad_into(spec, params, input, target, &mut acc)?;
    Ok((loss, acc))
}

/// Resize to the network input, then standardize each channel by its own
/// mean and population std (floored at 1e-6). Output is `[3, S, S]`.
pub fn prepare_input<T: Scalar>(spec: &NetSpec, img: &ImageRgb) -> Result<Vec<T>, NetError> {
    let side = spec.input_side;
    let small = resize_rgb(img, side, side)?;
    let mut out = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        let ch = small.channel(c);
        let n = ch.len() as f64;
        let mean = ch.sum() / n;
        let var = ch
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt().max(STD_FLOOR);
        out.extend(ch.data().iter().map(|v| T::of((v - mean) / std)));
    }
    Ok(out)
}

/// Network output for an RGB image, as a `[outputs]` tensor.
pub fn forward<T: Scalar>(
    params: &NetworkParams<T>,
    img: &ImageRgb,
) -> Result<Tensor<T>, NetError> {
    let input = prepare_input(&params.spec, img)?;
    let out = forward_raw(&params.spec, &params.weights, &input)?;
    Ok(Tensor::new(vec![out.len()], out)?)
}
