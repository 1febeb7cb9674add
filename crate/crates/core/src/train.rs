//! Two-stage training: weak pretraining and fine-tuning share one loop of
//! seeded minibatch SGD with Nesterov momentum and a geometric learning-rate
//! decay, logging mean train and validation loss per epoch.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imagecore::{
    load_gray, load_image, resize_bilinear, ImageError, ImageRgb, SaliencyMap, Scalar, Tensor,
};
use crate::net::{
    forward, forward_raw, init_params, loss_and_grad_into, prepare_input, read_checkpoint,
    write_checkpoint, NetError, NetSpec, NetworkParams, ParamSet,
};
use crate::weakset::DatasetManifest;

pub const PRETRAIN_EPOCHS: usize = 500;
pub const FINETUNE_EPOCHS: usize = 1200;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const LR_START: f64 = 0.3;
pub const LR_END: f64 = 1e-4;
pub const MOMENTUM: f64 = 0.9;
pub const CHECKPOINT_EVERY: usize = 50;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("epoch {epoch} outside 0..{total}")]
    InvalidRange { epoch: usize, total: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("checkpoint does not match the configured network: {0}")]
    CheckpointShapeMismatch(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (lr {lr:e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn default_epochs(self) -> usize {
        match self {
            Stage::Pretrain => PRETRAIN_EPOCHS,
            Stage::Finetune => FINETUNE_EPOCHS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Random,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub arch: NetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub seed: u64,
    pub init: Init,
    /// Checkpoints, `loss.csv` and the final model go here when set.
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            arch: NetSpec::standard(),
            epochs: stage.default_epochs(),
            batch_size: DEFAULT_BATCH_SIZE,
            lr_start: LR_START,
            lr_end: LR_END,
            momentum: MOMENTUM,
            seed: 0,
            init: Init::Random,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        check_rates(self.lr_start, self.lr_end)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        self.arch.validate()?;
        Ok(())
    }
}

/// `lr_start ≥ lr_end > 0`, or both equal (a constant schedule, zero allowed).
fn check_rates(lr_start: f64, lr_end: f64) -> Result<(), TrainError> {
    let ok = lr_start.is_finite()
        && lr_end.is_finite()
        && (lr_start == lr_end && lr_start >= 0.0 || lr_start > lr_end && lr_end > 0.0);
    if ok {
        Ok(())
    } else {
        Err(TrainError::InvalidConfig(format!(
            "learning rates must satisfy lr_start >= lr_end > 0 (got {lr_start}, {lr_end})"
        )))
    }
}

/// Geometric decay from `lr_start` at epoch 0 to `lr_end` at `total − 1`.
pub fn lr_schedule(
    epoch: usize,
    total: usize,
    lr_start: f64,
    lr_end: f64,
) -> Result<f64, TrainError> {
    if epoch >= total {
        return Err(TrainError::InvalidRange { epoch, total });
    }
    check_rates(lr_start, lr_end)?;
    if total == 1 || lr_start == lr_end {
        return Ok(lr_start);
    }
    if epoch == total - 1 {
        return Ok(lr_end);
    }
    let frac = epoch as f64 / (total - 1) as f64;
    Ok(lr_start * (lr_end / lr_start).powf(frac))
}

/// One Nesterov update on flat buffers:
/// `v ← μv − ηg`, then `p ← p + μv − ηg`.
pub fn nesterov_update<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: T,
    mu: T,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v - lr * g;
        *p = *p + mu * *v - lr * g;
    }
    Ok(())
}

pub fn nesterov_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    velocity: &mut ParamSet<T>,
    lr: T,
    mu: T,
) -> Result<(), TrainError> {
    if params.tensors().len() != grads.tensors().len()
        || params.tensors().len() != velocity.tensors().len()
    {
        return Err(TrainError::ShapeMismatch(
            "parameter sets differ in length".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    for ((p, g), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut().iter_mut())
    {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(TrainError::ShapeMismatch(format!(
                "{:?} / {:?} / {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        nesterov_update(p.data_mut(), g.data(), v.data_mut(), lr, mu)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,lr";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.lr
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Preprocessed `(input, target)` pairs held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub inputs: Vec<Vec<f32>>,
    pub targets: Vec<Vec<f32>>,
}

/// Map flattened row-major at the network output resolution, clamped to `[0, 1]`.
pub fn prepare_target(spec: &NetSpec, map: &Tensor<f64>) -> Result<Vec<f32>, TrainError> {
    let side = spec.output_side().ok_or_else(|| {
        TrainError::InvalidConfig(format!(
            "network output {} is not a square map",
            spec.outputs()
        ))
    })?;
    let small = resize_bilinear(map, side, side)?;
    Ok(small
        .data()
        .iter()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn from_images(
        spec: &NetSpec,
        items: &[(String, ImageRgb, Tensor<f64>)],
    ) -> Result<Self, TrainError> {
        let mut ds = Dataset {
            ids: Vec::with_capacity(items.len()),
            inputs: Vec::with_capacity(items.len()),
            targets: Vec::with_capacity(items.len()),
        };
        for (id, img, map) in items {
            ds.ids.push(id.clone());
            ds.inputs.push(prepare_input(spec, img)?);
            ds.targets.push(prepare_target(spec, map)?);
        }
        Ok(ds)
    }

    /// Load every `image_path` / `map_path` pair of a manifest. Relative paths
    /// resolve against `base`.
    pub fn from_manifest(
        spec: &NetSpec,
        manifest: &DatasetManifest,
        base: &Path,
    ) -> Result<Self, TrainError> {
        let mut ds = Dataset {
            ids: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        for r in manifest.records() {
            let img = load_image(base.join(&r.image_path))?;
            let map = load_gray(base.join(&r.map_path))?;
            ds.ids.push(r.image_id.clone());
            ds.inputs.push(prepare_input(spec, &img)?);
            ds.targets.push(prepare_target(spec, &map)?);
        }
        Ok(ds)
    }
}

/// Mean loss of `params` over a dataset, accumulated in `f64`.
pub fn mean_loss(params: &NetworkParams<f32>, data: &Dataset) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (x, t) in data.inputs.iter().zip(&data.targets) {
        let out = forward_raw(&params.spec, &params.weights, x)?;
        total += out
            .iter()
            .zip(t)
            .map(|(&p, &q)| {
                let d = (p - q) as f64;
                d * d
            })
            .sum::<f64>()
            / out.len() as f64;
    }
    Ok(total / data.len() as f64)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Initial parameters for a run: seeded random init, or a checkpoint whose
/// layout must equal `cfg.arch`. Checkpoint velocities are kept.
pub fn initial_params(cfg: &TrainConfig) -> Result<NetworkParams<f32>, TrainError> {
    match &cfg.init {
        Init::Random => Ok(init_params(&cfg.arch, cfg.seed)?),
        Init::Checkpoint(path) => {
            let p = read_checkpoint(path)?;
            if p.spec != cfg.arch {
                return Err(TrainError::CheckpointShapeMismatch(format!(
                    "checkpoint layout {:?}, configured {:?}",
                    p.spec, cfg.arch
                )));
            }
            Ok(p)
        }
    }
}

/// Train from `init` on preloaded data.
pub fn train_on(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    init: NetworkParams<f32>,
) -> Result<(NetworkParams<f32>, LossLog), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    if init.spec != cfg.arch {
        return Err(TrainError::CheckpointShapeMismatch(format!(
            "initial layout {:?}, configured {:?}",
            init.spec, cfg.arch
        )));
    }
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    let spec = cfg.arch;
    let NetworkParams {
        mut weights,
        mut velocity,
        ..
    } = init;
    let mut grads = ParamSet::<f32>::zeros(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = LossLog::default();
    let mu = cfg.momentum as f32;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)?;
        order.shuffle(&mut rng);
        let mut weighted = 0.0f64;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.fill_zero();
            let mut batch_loss = 0.0f64;
            for &k in batch {
                let l = loss_and_grad_into(
                    &spec,
                    &weights,
                    &train.inputs[k],
                    &train.targets[k],
                    &mut grads,
                )?;
                batch_loss += l as f64;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: batch_idx,
                    lr,
                });
            }
            let scale = 1.0 / batch.len() as f32;
            for t in grads.tensors_mut() {
                t.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
            nesterov_step(&mut weights, &grads, &mut velocity, lr as f32, mu).map_err(
                |e| match e {
                    TrainError::NonFiniteGradient => TrainError::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch: batch_idx,
                        lr,
                    },
                    other => other,
                },
            )?;
            // batch mean weighted by batch size
            weighted += batch_loss;
        }
        let current = NetworkParams {
            spec,
            weights,
            velocity,
        };
        let val_loss = mean_loss(&current, val)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: epoch + 1,
                batch: usize::MAX,
                lr,
            });
        }
        log.rows.push(LossRow {
            epoch: epoch + 1,
            train_loss: weighted / train.len() as f64,
            val_loss,
            lr,
        });
        if let Some(dir) = &cfg.out_dir {
            if (epoch + 1) % CHECKPOINT_EVERY == 0 {
                write_checkpoint(dir.join(format!("epoch_{:04}.ckpt", epoch + 1)), &current)?;
            }
        }
        NetworkParams {
            weights,
            velocity,
            ..
        } = current;
    }

    let params = NetworkParams {
        spec,
        weights,
        velocity,
    };
    if let Some(dir) = &cfg.out_dir {
        write_checkpoint(dir.join("final.ckpt"), &params)?;
        log.write_csv(dir.join("loss.csv"))?;
    }
    Ok((params, log))
}

/// Load both manifests and train. Relative manifest paths resolve against
/// `base`.
pub fn train_stage(
    train: &DatasetManifest,
    val: &DatasetManifest,
    cfg: &TrainConfig,
    base: &Path,
) -> Result<(NetworkParams<f32>, LossLog), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let init = initial_params(cfg)?;
    let train_ds = Dataset::from_manifest(&cfg.arch, train, base)?;
    let val_ds = Dataset::from_manifest(&cfg.arch, val, base)?;
    train_on(&train_ds, &val_ds, cfg, init)
}

/// Network map at 32×32, clamped to `[0, 1]`, before upscaling.
pub fn predict_network(
    params: &NetworkParams<f32>,
    img: &ImageRgb,
) -> Result<Tensor<f64>, TrainError> {
    let side = params.spec.output_side().ok_or_else(|| {
        TrainError::InvalidConfig(format!(
            "network output {} is not a square map",
            params.spec.outputs()
        ))
    })?;
    let out = forward(params, img)?;
    let data = out
        .data()
        .iter()
        .map(|&v| (v as f64).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::new(vec![side, side], data)?)
}

/// Saliency at the input image's own resolution.
pub fn predict(params: &NetworkParams<f32>, img: &ImageRgb) -> Result<SaliencyMap, TrainError> {
    let small = predict_network(params, img)?;
    let full = resize_bilinear(&small, img.height(), img.width())?;
    Ok(SaliencyMap::full(full.map(|v| v.clamp(0.0, 1.0)))?)
}
