//! `wepsam` command line.
//!
//! Exit codes: 0 ok, 1 usage or other failure, 2 empty input, 3 checkpoint
//! mismatch, 4 numeric divergence, 5 decode failure, 6 missing counterpart.
//! Every random choice is driven by `--seed`, which defaults to 0.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::gbvs::{gbvs_saliency_with, GbvsError, GbvsParams, DEFAULT_SIGMA_FRAC};
use crate::imagecore::{list_images, load_image, save_pgm, save_png_gray, ImageError};
use crate::metrics::{evaluate, MetricError, DEFAULT_SPLITS};
use crate::net::{read_checkpoint, NetError, NetSpec};
use crate::train::{
    initial_params, predict, train_on, Dataset, Init, Stage, TrainConfig, TrainError,
    DEFAULT_BATCH_SIZE, LR_END, LR_START, MOMENTUM,
};
use crate::weakset::{
    assign_splits, entropy, select_low_entropy, DatasetManifest, Split, WeakLabelRecord,
    WeaksetError, DEFAULT_K,
};

pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Parser)]
#[command(name = "wepsam", version, about = "Weakly pre-learnt saliency model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute graph-based weak saliency labels for a directory of images.
    Weaklabel(WeaklabelArgs),
    /// Keep the K lowest-entropy weak labels.
    Filter(FilterArgs),
    /// Train on weak labels.
    Pretrain(PretrainArgs),
    /// Train on ground-truth maps, from a checkpoint or `--init random`.
    Finetune(FinetuneArgs),
    /// Predict full-resolution saliency maps.
    Predict(PredictArgs),
    /// Score predictions against ground-truth density and fixation maps.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct WeaklabelArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Distance falloff as a fraction of the working width.
    #[arg(long, default_value_t = DEFAULT_SIGMA_FRAC)]
    sigma_frac: f64,
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Arch {
    Standard,
    Compact,
}

impl Arch {
    fn spec(self) -> NetSpec {
        match self {
            Arch::Standard => NetSpec::standard(),
            Arch::Compact => NetSpec::compact(),
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON-lines manifest with train/val split tags.
    #[arg(long, conflicts_with_all = ["images", "maps"], required_unless_present = "images")]
    manifest: Option<PathBuf>,
    /// Image directory, paired by file stem with `--maps`.
    #[arg(long, requires = "maps")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    maps: Option<PathBuf>,
    /// Validation share when pairing `--images` with `--maps`.
    #[arg(long, default_value_t = DEFAULT_VAL_FRACTION)]
    val_fraction: f64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = LR_START)]
    lr_start: f64,
    #[arg(long, default_value_t = LR_END)]
    lr_end: f64,
    #[arg(long, default_value_t = MOMENTUM)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Arch::Standard)]
    arch: Arch,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// `random` or a checkpoint path.
    #[arg(long, default_value = "random")]
    init: String,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// `random` or a checkpoint path.
    #[arg(long)]
    init: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MapFormat {
    Pgm,
    Png,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = MapFormat::Pgm)]
    format: MapFormat,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    fix: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SPLITS)]
    splits: usize,
    /// JSON report path; the CSV goes next to it with a `.csv` extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Usage = 1,
    EmptyInput = 2,
    CheckpointMismatch = 3,
    Divergence = 4,
    Decode = 5,
    MissingCounterpart = 6,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    fn new(code: ExitCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn image_code(e: &ImageError) -> ExitCode {
    match e {
        ImageError::FileNotFound(_) | ImageError::DecodeError { .. } => ExitCode::Decode,
        _ => ExitCode::Usage,
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        Self::new(image_code(&e), e.to_string())
    }
}

fn net_code(e: &NetError) -> ExitCode {
    match e {
        NetError::CheckpointShapeMismatch(_) => ExitCode::CheckpointMismatch,
        NetError::Checkpoint { .. } => ExitCode::Decode,
        NetError::Image(ie) => image_code(ie),
        _ => ExitCode::Usage,
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        Self::new(net_code(&e), e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::CheckpointShapeMismatch(_) => ExitCode::CheckpointMismatch,
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient => {
                ExitCode::Divergence
            }
            TrainError::EmptyDataset(_) => ExitCode::EmptyInput,
            TrainError::Net(ne) => net_code(ne),
            TrainError::Image(ie) => image_code(ie),
            _ => ExitCode::Usage,
        };
        Self::new(code, e.to_string())
    }
}

impl From<WeaksetError> for CliError {
    fn from(e: WeaksetError) -> Self {
        let code = match &e {
            WeaksetError::Parse { .. } => ExitCode::Decode,
            _ => ExitCode::Usage,
        };
        Self::new(code, e.to_string())
    }
}

impl From<GbvsError> for CliError {
    fn from(e: GbvsError) -> Self {
        Self::new(ExitCode::Usage, e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        let code = match &e {
            MetricError::MissingCounterpart { .. } => ExitCode::MissingCounterpart,
            MetricError::EmptyInput => ExitCode::EmptyInput,
            MetricError::Image(ie) => image_code(ie),
            _ => ExitCode::Usage,
        };
        Self::new(code, e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(
        ExitCode::Usage,
        format!("i/o error on {}: {e}", path.display()),
    )
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(path).map_err(|e| io_error(path, e))
}

fn cmd_weaklabel(a: &WeaklabelArgs) -> Result<(), CliError> {
    let params = GbvsParams {
        sigma_frac: a.sigma_frac,
        ..GbvsParams::default()
    };
    if !(params.sigma() > 0.0 && params.sigma().is_finite()) {
        return Err(CliError::new(
            ExitCode::Usage,
            format!("invalid --sigma-frac {}", a.sigma_frac),
        ));
    }
    let images = list_images(&a.images)?;
    if images.is_empty() {
        return Err(CliError::new(
            ExitCode::EmptyInput,
            format!("no images in {}", a.images.display()),
        ));
    }
    let maps_dir = a.out_dir.join("maps");
    create_dir(&maps_dir)?;
    let maps_dir = absolute(&maps_dir)?;
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for (id, path) in &images {
        let img = match load_image(path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let map = gbvs_saliency_with(&img, &params)?.into_tensor();
        let map_path = maps_dir.join(format!("{id}.pgm"));
        save_pgm(&map_path, &map)?;
        records.push(WeakLabelRecord {
            image_id: id.clone(),
            image_path: absolute(path)?,
            map_path,
            entropy_bits: entropy(&map)?,
            split: Split::Train,
        });
    }
    if records.is_empty() {
        return Err(CliError::new(
            ExitCode::EmptyInput,
            format!(
                "no decodable images in {} ({skipped} skipped)",
                a.images.display()
            ),
        ));
    }
    assign_splits(&mut records, a.val_fraction, a.seed);
    let n = records.len();
    let manifest_path = a.out_dir.join("manifest.jsonl");
    DatasetManifest::new(records)?.write_jsonl(&manifest_path)?;
    println!(
        "weaklabel: {n} labelled, {skipped} skipped, manifest {}",
        manifest_path.display()
    );
    Ok(())
}

fn cmd_filter(a: &FilterArgs) -> Result<(), CliError> {
    let manifest = DatasetManifest::read_jsonl(&a.manifest)?;
    if manifest.is_empty() {
        return Err(CliError::new(ExitCode::EmptyInput, "manifest is empty"));
    }
    let mut kept = select_low_entropy(manifest.records(), a.k);
    assign_splits(&mut kept, a.val_fraction, a.seed);
    let n = kept.len();
    DatasetManifest::new(kept)?.write_jsonl(&a.out)?;
    println!("filter: kept {n} of {}", manifest.len());
    Ok(())
}

fn load_training_data(t: &TrainArgs, spec: &NetSpec) -> Result<(Dataset, Dataset), CliError> {
    let (train, val, base) = match (&t.manifest, &t.images, &t.maps) {
        (Some(m), _, _) => {
            let manifest = DatasetManifest::read_jsonl(m)?;
            let base = m.parent().map(Path::to_path_buf).unwrap_or_default();
            (
                manifest.split(Split::Train),
                manifest.split(Split::Val),
                base,
            )
        }
        (None, Some(images), Some(maps)) => {
            let images = list_images(images)?;
            let maps_found = list_images(maps)?;
            let mut records = Vec::new();
            for (id, path) in &images {
                let map_path = maps_found.get(id).ok_or_else(|| {
                    CliError::new(
                        ExitCode::MissingCounterpart,
                        format!("no map for image {id} in {}", maps.display()),
                    )
                })?;
                records.push(WeakLabelRecord {
                    image_id: id.clone(),
                    image_path: path.clone(),
                    map_path: map_path.clone(),
                    entropy_bits: 0.0,
                    split: Split::Train,
                });
            }
            if let Some(id) = maps_found.keys().find(|id| !images.contains_key(*id)) {
                return Err(CliError::new(
                    ExitCode::MissingCounterpart,
                    format!("no image for map {id}"),
                ));
            }
            assign_splits(&mut records, t.val_fraction, t.seed);
            let manifest = DatasetManifest::new(records)?;
            (
                manifest.split(Split::Train),
                manifest.split(Split::Val),
                PathBuf::new(),
            )
        }
        _ => {
            return Err(CliError::new(
                ExitCode::Usage,
                "give --manifest or --images with --maps",
            ))
        }
    };
    if train.is_empty() || val.is_empty() {
        return Err(CliError::new(
            ExitCode::EmptyInput,
            format!(
                "need training and validation samples (got {} / {})",
                train.len(),
                val.len()
            ),
        ));
    }
    Ok((
        Dataset::from_manifest(spec, &train, &base)?,
        Dataset::from_manifest(spec, &val, &base)?,
    ))
}

fn cmd_train(stage: Stage, t: &TrainArgs, init: &str) -> Result<(), CliError> {
    let spec = t.arch.spec();
    let cfg = TrainConfig {
        stage,
        arch: spec,
        epochs: t.epochs.unwrap_or(stage.default_epochs()),
        batch_size: t.batch_size,
        lr_start: t.lr_start,
        lr_end: t.lr_end,
        momentum: t.momentum,
        seed: t.seed,
        init: if init == "random" {
            Init::Random
        } else {
            Init::Checkpoint(PathBuf::from(init))
        },
        out_dir: Some(t.out_dir.clone()),
    };
    cfg.validate()
        .map_err(|e| CliError::new(ExitCode::Usage, e.to_string()))?;
    let init_params = initial_params(&cfg)?;
    let (train, val) = load_training_data(t, &spec)?;
    let (_, log) = train_on(&train, &val, &cfg, init_params)?;
    let last = log.rows.last().expect("at least one epoch");
    println!(
        "{}: {} epochs on {} samples, final train {:.6e} val {:.6e}, outputs in {}",
        match stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        },
        log.rows.len(),
        train.len(),
        last.train_loss,
        last.val_loss,
        t.out_dir.display()
    );
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    let params = read_checkpoint(&a.checkpoint)?;
    let images = list_images(&a.images)?;
    if images.is_empty() {
        return Err(CliError::new(
            ExitCode::EmptyInput,
            format!("no images in {}", a.images.display()),
        ));
    }
    create_dir(&a.out_dir)?;
    let mut written = 0usize;
    let mut skipped = 0usize;
    for (id, path) in &images {
        let img = match load_image(path) {
            Ok(img) => img,
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let map = predict(&params, &img)?.into_tensor();
        match a.format {
            MapFormat::Pgm => save_pgm(a.out_dir.join(format!("{id}.pgm")), &map)?,
            MapFormat::Png => save_png_gray(a.out_dir.join(format!("{id}.png")), &map)?,
        }
        written += 1;
    }
    println!("predict: {written} written, {skipped} skipped");
    if written == 0 {
        return Err(CliError::new(ExitCode::EmptyInput, "no decodable images"));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let report = evaluate(&a.pred, &a.gt, &a.fix, a.splits, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&a.out, report.to_json()).map_err(|e| io_error(&a.out, e))?;
    let csv = a.out.with_extension("csv");
    fs::write(&csv, report.to_csv()).map_err(|e| io_error(&csv, e))?;
    let m = report.aggregate;
    println!(
        "eval: {} images; auc_judd {:.4} auc_borji {:.4} cc {:.4} sim {:.4} kl {:.4} nss {:.4}",
        report.images.len(),
        m.auc_judd,
        m.auc_borji,
        m.cc,
        m.sim,
        m.kl,
        m.nss
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Weaklabel(a) => cmd_weaklabel(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Pretrain(a) => cmd_train(Stage::Pretrain, &a.train, &a.init),
        Command::Finetune(a) => cmd_train(Stage::Finetune, &a.train, &a.init),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Parse `args` (program name first) and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::Usage
            } else {
                ExitCode::Ok
            } as i32;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::Ok as i32,
        Err(e) => {
            eprintln!("error: {e}");
            e.code as i32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn finetune_requires_init() {
        let r = Cli::try_parse_from([
            "wepsam",
            "finetune",
            "--manifest",
            "m.jsonl",
            "--out-dir",
            "o",
        ]);
        assert!(r.is_err());
        let ok = Cli::try_parse_from([
            "wepsam",
            "finetune",
            "--manifest",
            "m.jsonl",
            "--out-dir",
            "o",
            "--init",
            "random",
        ]);
        assert!(ok.is_ok());
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from([
            "wepsam",
            "filter",
            "--manifest",
            "m",
            "--out",
            "o",
            "--bogus"
        ])
        .is_err());
    }

    #[test]
    fn error_codes() {
        let e: CliError = TrainError::NonFiniteLoss {
            epoch: 1,
            batch: 0,
            lr: 0.3,
        }
        .into();
        assert_eq!(e.code, ExitCode::Divergence);
        let e: CliError = TrainError::Net(NetError::CheckpointShapeMismatch("x".into())).into();
        assert_eq!(e.code, ExitCode::CheckpointMismatch);
        let e: CliError = MetricError::MissingCounterpart {
            id: "a".into(),
            missing_from: "gt".into(),
        }
        .into();
        assert_eq!(e.code, ExitCode::MissingCounterpart);
    }
}
