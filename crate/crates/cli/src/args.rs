use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "herdcount", version, about = "Aerial animal detection and counting pipeline")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tile images into labelled patches (JSON-lines manifest).
    Tile(TileArgs),
    /// Assign images to train/val/test splits by point count.
    Split(SplitArgs),
    /// Train the patch classifier (PPN).
    Pretrain(PretrainArgs),
    /// Train the point detector (stage 1 or 2).
    Train(TrainArgs),
    /// Mine hard-negative patches with a stage-1 detector.
    MineHnp(MineArgs),
    /// Count animals on full images.
    Infer(InferArgs),
    /// Flag patches likely to contain animals with a PPN.
    Prescreen(PrescreenArgs),
    /// Score detections against ground truth.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic benchmark suite.
    Synth(SynthArgs),
    /// Density statistics, result tables and count scatter data.
    Report(ReportArgs),
    /// Serve the review API.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Tile(_) => "tile",
            Command::Split(_) => "split",
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::MineHnp(_) => "mine-hnp",
            Command::Infer(_) => "infer",
            Command::Prescreen(_) => "prescreen",
            Command::Evaluate(_) => "evaluate",
            Command::Synth(_) => "synth",
            Command::Report(_) => "report",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TilingArgs {
    /// Patch side in pixels [default: suite tiling, else 512].
    #[arg(long)]
    pub patch_size: Option<u32>,
    /// Overlap between neighbouring patches in pixels [default: suite tiling, else 78].
    #[arg(long)]
    pub overlap: Option<u32>,
    /// Margin around a patch within which points still label it non-empty.
    #[arg(long, default_value_t = 0.0)]
    pub dilation: f64,
    /// Patches with a larger nodata fraction are dropped.
    #[arg(long, default_value_t = herdcount_core::geo::DEFAULT_NODATA_THRESHOLD)]
    pub nodata_threshold: f64,
    /// Channel value marking nodata pixels when no validity mask exists.
    #[arg(long, default_value_t = 0)]
    pub nodata_sentinel: u8,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TileArgs {
    /// Data directory (images/, annotations.csv, ...).
    #[arg(long)]
    pub data: PathBuf,
    /// Output patch manifest (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each patch as PNG into this directory.
    #[arg(long)]
    pub patches_dir: Option<PathBuf>,
    #[command(flatten)]
    pub tiling: TilingArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output split file (JSON object image_id → split).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON object image_id → herd; images without an entry share one herd.
    #[arg(long)]
    pub herds: Option<PathBuf>,
    /// Pin an image to a split, e.g. `img_07=test_2019`. Repeatable.
    #[arg(long = "pin", value_name = "ID=SPLIT")]
    pub pins: Vec<String>,
    /// Train, val and test point shares.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.7, 0.1, 0.2])]
    pub ratios: Vec<f64>,
    /// Split that receives the test share.
    #[arg(long, default_value = "test_2017")]
    pub test_split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Patch manifest for a per-split empty/non-empty report.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Tiny,
    Desk,
    Full,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelPreset::Desk)]
    pub model: ModelPreset,
    /// JSON or TOML backbone configuration replacing the preset's backbone.
    #[arg(long)]
    pub backbone_config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    /// JSON or TOML file with training settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable flip and colour augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneInit {
    Scratch,
    External,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Output directory for the checkpoint, manifest and loss curve.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = BackboneInit::Scratch)]
    pub init: BackboneInit,
    /// Weight file for `--init external`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub tiling: TilingArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorInitArg {
    Scratch,
    External,
    Ppn,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Stage-1 backbone initialization.
    #[arg(long, value_enum, default_value_t = DetectorInitArg::Scratch)]
    pub init: DetectorInitArg,
    /// PPN checkpoint (`--init ppn`) or weight file (`--init external`).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Stage-1 checkpoint to continue from (stage 2).
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// Mined hard negatives from training images (stage 2).
    #[arg(long)]
    pub hnps: Option<PathBuf>,
    /// Mined hard negatives from validation images (stage 2).
    #[arg(long)]
    pub val_hnps: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub tiling: TilingArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DetectArgs {
    /// Detection threshold [default: the checkpoint's calibrated threshold].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Keep peaks regardless of the class map.
    #[arg(long)]
    pub no_gate: bool,
    /// Detections this close across patches are merged.
    #[arg(long, default_value_t = herdcount_core::eval::TP_RADIUS)]
    pub merge_radius: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Stage-1 detector checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Hard negatives from training images (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Hard negatives from validation images (JSON lines).
    #[arg(long)]
    pub val_out: Option<PathBuf>,
    /// Matching radius for deciding a detection is false.
    #[arg(long, default_value_t = herdcount_core::eval::TP_RADIUS)]
    pub radius: f64,
    #[command(flatten)]
    pub detect: DetectArgs,
    #[command(flatten)]
    pub tiling: TilingArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Data directory holding images/ (annotations are not needed).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for detections.csv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict to these image ids. Repeatable.
    #[arg(long = "image")]
    pub images: Vec<String>,
    #[command(flatten)]
    pub detect: DetectArgs,
    #[command(flatten)]
    pub tiling: TilingArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PrescreenArgs {
    /// PPN checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Flagged patches (JSON lines), most likely first.
    #[arg(long)]
    pub out: PathBuf,
    /// Probability at or above which a patch is flagged.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[command(flatten)]
    pub tiling: TilingArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Arg {
    Identity,
    Fitted,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Detections CSV `image_id,x,y,confidence`.
    #[arg(long)]
    pub detections: PathBuf,
    /// Ground-truth CSV `image_id,x,y`.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Metrics report (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// True-positive radius in pixels.
    #[arg(long, default_value_t = herdcount_core::eval::TP_RADIUS)]
    pub radius: f64,
    /// Also score these images when they have neither points nor detections.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = R2Arg::Identity)]
    pub r2: R2Arg,
    /// Bootstrap replicates for the MAE interval; 0 skips it.
    #[arg(long, default_value_t = 10_000)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// separable | cluttered | dense | sparse_edge
    #[arg(long)]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Patch manifest: writes density.json and density.png.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split file used with --manifest: writes stratification.json.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Metrics report as `MODEL:TEST_SET=PATH`; writes table.csv. Repeatable.
    #[arg(long = "metrics", value_name = "MODEL:TEST_SET=PATH")]
    pub metrics: Vec<String>,
    /// Detections CSV for scatter.csv (needs --annotations).
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    /// Directory with images/, flagged.jsonl and detections.csv.
    #[arg(long, env = "DATA_ROOT")]
    pub data_root: PathBuf,
    #[arg(long, env = "PORT", default_value_t = 8787)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[command(flatten)]
    pub tiling: TilingArgs,
}
