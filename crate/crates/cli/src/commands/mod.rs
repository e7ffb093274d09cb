//! One function per CLI command. Each resolves where its run manifest goes
//! before doing any work, so failures are recorded too.

mod detect;
mod prep;
mod train;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use herdcount_core::detect::{DetectionPoint, Frame};
use herdcount_core::geo::{PatchingConfig, TilingConfig};
use herdcount_model::checkpoint::Checkpoint;
use herdcount_model::train::{InitKind, Task, TrainConfig};
use herdcount_model::{BackboneConfig, ModelConfig, ModelKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::{Command, ModelArgs, ModelPreset, OptimArgs, TilingArgs};
use crate::data::DataDir;
use crate::error::{CliError, Result};
use crate::run::RunLog;

pub use detect::{evaluate, infer, prescreen};
pub use prep::{report, split, synth, tile};
pub use train::{mine_hnp, pretrain, train};

/// Runs a batch command. `serve` is started separately by the binary.
pub fn dispatch(command: &Command, log: &mut RunLog) -> Result<()> {
    match command {
        Command::Tile(a) => tile(a, log),
        Command::Split(a) => split(a, log),
        Command::Pretrain(a) => pretrain(a, log),
        Command::Train(a) => train(a, log),
        Command::MineHnp(a) => mine_hnp(a, log),
        Command::Infer(a) => infer(a, log),
        Command::Prescreen(a) => prescreen(a, log),
        Command::Evaluate(a) => evaluate(a, log),
        Command::Synth(a) => synth(a, log),
        Command::Report(a) => report(a, log),
        Command::Serve(_) => Err(CliError::Usage("serve runs as a service, not a batch command".into())),
    }
}

/// Tiling from flags, falling back to the data directory's suite tiling and
/// then to the 512 px / 78 px defaults.
pub fn tiling(args: &TilingArgs, suite: Option<TilingConfig>) -> Result<TilingConfig> {
    let base = suite.unwrap_or_default();
    let t = TilingConfig {
        patch_size: args.patch_size.unwrap_or(base.patch_size),
        overlap_px: args.overlap.unwrap_or(base.overlap_px),
        ..base
    };
    t.validate()
        .map_err(|e| CliError::Usage(format!("--patch-size/--overlap: {e}")))?;
    Ok(t)
}

pub fn patching(args: &TilingArgs, data: &DataDir) -> Result<PatchingConfig> {
    if !(0.0..=1.0).contains(&args.nodata_threshold) {
        return Err(CliError::Usage(format!(
            "--nodata-threshold {} is outside [0, 1]",
            args.nodata_threshold
        )));
    }
    if !(args.dilation >= 0.0) {
        return Err(CliError::Usage("--dilation must be non-negative".into()));
    }
    Ok(PatchingConfig {
        tiling: tiling(args, data.suite_tiling)?,
        dilation_px: args.dilation,
        nodata_threshold: args.nodata_threshold,
        nodata_sentinel: args.nodata_sentinel,
    })
}

/// Reads JSON, or TOML when the extension says so.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn model_config(args: &ModelArgs) -> Result<ModelConfig> {
    let mut m = match args.model {
        ModelPreset::Tiny => ModelConfig::tiny(),
        ModelPreset::Desk => ModelConfig::desk(),
        ModelPreset::Full => ModelConfig::full(),
    };
    if let Some(path) = &args.backbone_config {
        m.backbone = read_config::<BackboneConfig>(path)?;
    }
    m.validate()?;
    Ok(m)
}

/// Training settings accepted from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub max_epochs: Option<usize>,
    pub seed: Option<u64>,
    pub augment: Option<bool>,
}

pub fn train_config(task: Task, init: InitKind, args: &OptimArgs) -> Result<TrainConfig> {
    let file = match &args.config {
        Some(p) => read_config::<TrainFile>(p)?,
        None => TrainFile::default(),
    };
    let mut c = TrainConfig::defaults(task, init);
    if let Some(v) = args.lr.or(file.learning_rate) {
        c.learning_rate = v;
    }
    if let Some(v) = args.weight_decay.or(file.weight_decay) {
        c.weight_decay = v;
    }
    if let Some(v) = args.batch_size.or(file.batch_size) {
        c.batch_size = v;
    }
    if let Some(v) = args.patience.or(file.patience) {
        c.patience = v;
    }
    if let Some(v) = args.epochs.or(file.max_epochs) {
        c.max_epochs = v;
    }
    if let Some(v) = args.seed.or(file.seed) {
        c.seed = v;
    }
    if args.no_augment || file.augment == Some(false) {
        c.augment = herdcount_core::dataset::AugmentConfig::none();
    }
    c.validate()?;
    Ok(c)
}

pub fn load_checkpoint(path: &Path, kind: ModelKind) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.kind != kind {
        return Err(CliError::Input(format!(
            "{} holds a {:?} model, expected {:?}",
            path.display(),
            ck.meta.kind,
            kind
        )));
    }
    Ok(ck)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DetectionRow {
    image_id: String,
    x: f64,
    y: f64,
    confidence: f64,
}

/// Writes image-frame detections as `image_id,x,y,confidence`.
pub fn write_detections(path: &Path, dets: &[DetectionPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    for d in dets {
        w.serialize(DetectionRow {
            image_id: d.source_id.clone(),
            x: d.x,
            y: d.y,
            confidence: d.confidence,
        })
        .map_err(|e| CliError::Input(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<BTreeMap<String, Vec<DetectionPoint>>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut out: BTreeMap<String, Vec<DetectionPoint>> = BTreeMap::new();
    for (i, row) in r.deserialize::<DetectionRow>().enumerate() {
        let row = row.map_err(|e| CliError::Input(format!("{} line {}: {e}", path.display(), i + 2)))?;
        out.entry(row.image_id.clone()).or_default().push(DetectionPoint {
            x: row.x,
            y: row.y,
            confidence: row.confidence,
            frame: Frame::ImageGlobal,
            source_id: row.image_id,
        });
    }
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_parent(file: &Path) -> Result<()> {
    match file.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) => create_dir(p),
        None => Ok(()),
    }
}
