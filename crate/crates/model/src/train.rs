use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use herdcount_core::dataset::{augment, binary_batch_sampler, AugmentConfig, SamplerConfig};
use herdcount_core::geo::PointAnnotation;
use herdcount_core::seed::{derive_seed, derive_seed_index, rng};
use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{build_backbone, lineage_chain, transfer_weights, Checkpoint, Init, Lineage};
use crate::config::{LossConfig, ModelConfig};
use crate::data::{fingerprint, PatchSample};
use crate::error::{io, Error, Result};
use crate::infer::{calibrate_threshold, InferenceConfig};
use crate::loss::{bce_with_logits, detector_loss};
use crate::net::{images_to_tensor, Network};
use crate::optim::{Adam, AdamConfig};
use crate::params::ModelKind;
use crate::target::{grids_to_tensor, make_fidt_target, FidtParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ppn,
    DetectorStage1,
    DetectorStage2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Scratch,
    ExternalPretrained,
    PpnTransfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub init: InitKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub fidt: FidtParams,
    pub loss: LossConfig,
}

impl TrainConfig {
    /// Defaults: Adam with weight decay 3e-4, patience 15; learning rate
    /// 1e-3 from scratch and 1e-4 from pretrained weights; 1e-6 for the
    /// second detector stage; batch 32 for the PPN and 16 for detectors.
    pub fn defaults(task: Task, init: InitKind) -> Self {
        let learning_rate = match (task, init) {
            (Task::DetectorStage2, _) => 1e-6,
            (_, InitKind::Scratch) => 1e-3,
            _ => 1e-4,
        };
        TrainConfig {
            task,
            init,
            learning_rate,
            weight_decay: 3e-4,
            batch_size: if task == Task::Ppn { 32 } else { 16 },
            patience: 15,
            max_epochs: 500,
            seed: 0,
            augment: AugmentConfig::default(),
            fidt: FidtParams::default(),
            loss: LossConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.patience < 1 || self.max_epochs < 1 {
            return Err(Error::Config("patience and max_epochs must be at least 1".into()));
        }
        let bbs = matches!(self.task, Task::Ppn | Task::DetectorStage2);
        if self.batch_size < 2 || (bbs && self.batch_size % 2 != 0) {
            return Err(Error::Config(format!(
                "batch_size {} must be at least 2{}",
                self.batch_size,
                if bbs { " and even" } else { "" }
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stop iff none of the last `patience` losses is strictly below the
/// minimum of everything before them.
pub fn early_stop(history: &[f64], patience: usize) -> StopDecision {
    if patience == 0 || history.len() <= patience {
        return StopDecision::Continue;
    }
    let split = history.len() - patience;
    let best_before = history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    if history[split..].iter().any(|&v| v < best_before) {
        StopDecision::Continue
    } else {
        StopDecision::Stop
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: Task,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub lineage: Vec<Lineage>,
    pub lineage_chain: String,
    pub epochs: Vec<EpochRecord>,
    pub stopping_epoch: usize,
    pub early_stopped: bool,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub detection_threshold: Option<f64>,
    pub checkpoint_path: Option<String>,
    /// Dataset role → content hash.
    pub dataset_fingerprints: BTreeMap<String, String>,
    pub dataset_sizes: BTreeMap<String, usize>,
    pub hnp_count: Option<usize>,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model holding the best-validation weights.
    pub network: Network,
    pub checkpoint: Checkpoint,
    pub manifest: RunManifest,
}

impl TrainOutcome {
    /// Writes `<name>.safetensors` (+ `.json` metadata), `<name>.manifest.json`
    /// and `<name>.loss.csv` into `dir`; returns the checkpoint path.
    pub fn save(&mut self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let ckpt = dir.join(format!("{name}.safetensors"));
        self.checkpoint.save(&ckpt)?;
        self.manifest.checkpoint_path = Some(ckpt.display().to_string());
        let manifest = dir.join(format!("{name}.manifest.json"));
        let tmp = manifest.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| io(&tmp, e))?;
        fs::rename(&tmp, &manifest).map_err(|e| io(&manifest, e))?;
        let csv = dir.join(format!("{name}.loss.csv"));
        fs::write(&csv, self.manifest.loss_csv()).map_err(|e| io(&csv, e))?;
        Ok(ckpt)
    }
}

/// Called after every epoch with the current (not best) weights.
pub type EpochHook<'a> = Option<&'a mut dyn FnMut(usize, &Network) -> Result<()>>;

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn augmented(sample: &PatchSample, cfg: &AugmentConfig, seed: Option<u64>) -> (RgbImage, Vec<(f64, f64)>) {
    match seed {
        None => (sample.image.clone(), sample.points.clone()),
        Some(seed) => {
            let pts: Vec<PointAnnotation> = sample
                .points
                .iter()
                .map(|&(x, y)| PointAnnotation::new("", x, y))
                .collect();
            let (img, pts, _) = augment(&sample.image, &pts, cfg, seed);
            (img, pts.into_iter().map(|p| (p.x, p.y)).collect())
        }
    }
}

struct Batch {
    x: Tensor,
    labels: Option<Tensor>,
    heatmap: Option<Tensor>,
    class_grid: Option<Tensor>,
    len: usize,
}

fn make_batch(net: &Network, cfg: &TrainConfig, samples: &[&PatchSample], seed: Option<u64>) -> Result<Batch> {
    let mut images = Vec::with_capacity(samples.len());
    let mut points = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (img, pts) = augmented(s, &cfg.augment, seed.map(|sd| derive_seed_index(sd, i as u64)));
        images.push(img);
        points.push(pts);
    }
    let refs: Vec<&RgbImage> = images.iter().collect();
    let dtype = net.dtype();
    let x = images_to_tensor(&refs, dtype)?;
    let len = samples.len();
    match net.kind {
        ModelKind::Ppn => {
            let labels: Vec<f32> = points.iter().map(|p| if p.is_empty() { 0.0 } else { 1.0 }).collect();
            let labels = Tensor::from_vec(labels, len, &candle_core::Device::Cpu)?.to_dtype(dtype)?;
            Ok(Batch {
                x,
                labels: Some(labels),
                heatmap: None,
                class_grid: None,
                len,
            })
        }
        ModelKind::Detector => {
            let b = &net.config.backbone;
            let targets: Vec<_> = images
                .iter()
                .zip(&points)
                .map(|(img, pts)| {
                    make_fidt_target(
                        pts,
                        img.width(),
                        img.height(),
                        &cfg.fidt,
                        b.output_stride,
                        b.down_factor(),
                    )
                })
                .collect();
            let heat: Vec<_> = targets.iter().map(|t| &t.heatmap).collect();
            let cls: Vec<_> = targets.iter().map(|t| &t.class_grid).collect();
            Ok(Batch {
                x,
                labels: None,
                heatmap: Some(grids_to_tensor(&heat, dtype)?),
                class_grid: Some(grids_to_tensor(&cls, dtype)?),
                len,
            })
        }
    }
}

fn batch_loss(net: &Network, cfg: &TrainConfig, batch: &Batch) -> Result<Tensor> {
    match net.kind {
        ModelKind::Ppn => bce_with_logits(&net.ppn_logits(&batch.x)?, batch.labels.as_ref().unwrap()),
        ModelKind::Detector => {
            let out = net.detector_forward(&batch.x)?;
            Ok(detector_loss(
                &out,
                batch.heatmap.as_ref().unwrap(),
                batch.class_grid.as_ref().unwrap(),
                &cfg.loss,
            )?
            .total)
        }
    }
}

/// Fixed validation batches, built once.
struct ValSet {
    batches: Vec<Batch>,
    total: usize,
}

impl ValSet {
    fn new(net: &Network, cfg: &TrainConfig, val: &[PatchSample]) -> Result<Self> {
        if val.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
        let refs: Vec<&PatchSample> = val.iter().collect();
        let batches = refs
            .chunks(cfg.batch_size.max(1))
            .map(|c| make_batch(net, cfg, c, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(ValSet {
            batches,
            total: val.len(),
        })
    }

    fn loss(&self, net: &Network, cfg: &TrainConfig) -> Result<f64> {
        net.set_training(false);
        let mut sum = 0.0;
        for b in &self.batches {
            sum += scalar(&batch_loss(net, cfg, b)?)? * b.len as f64;
        }
        Ok(sum / self.total as f64)
    }
}

/// Validation loss exactly as computed during training: batches of
/// `cfg.batch_size` in order, no augmentation, averaged per patch.
pub fn validation_loss(net: &Network, cfg: &TrainConfig, val: &[PatchSample]) -> Result<f64> {
    ValSet::new(net, cfg, val)?.loss(net, cfg)
}

struct FitResult {
    epochs: Vec<EpochRecord>,
    best_epoch: usize,
    best_val_loss: f64,
    early_stopped: bool,
}

fn fit(
    net: &Network,
    cfg: &TrainConfig,
    train: &[&PatchSample],
    val: &ValSet,
    plan: &dyn Fn(usize) -> Result<Vec<Vec<usize>>>,
    mut hook: EpochHook<'_>,
) -> Result<FitResult> {
    let mut opt = Adam::new(cfg.adam());
    let mut epochs = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, BTreeMap<String, Tensor>)> = None;
    let mut early_stopped = false;
    for epoch in 1..=cfg.max_epochs {
        let batches = plan(epoch)?;
        let (mut sum, mut n) = (0.0, 0usize);
        net.set_training(true);
        for (bi, idx) in batches.iter().enumerate() {
            let samples: Vec<&PatchSample> = idx.iter().map(|&i| train[i]).collect();
            let seed = derive_seed_index(derive_seed(cfg.seed, "augment"), (epoch as u64) << 32 | bi as u64);
            let batch = make_batch(net, cfg, &samples, Some(seed))?;
            let loss = batch_loss(net, cfg, &batch)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                net.set_training(false);
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("training loss {v} at batch {bi}"),
                });
            }
            let grads = loss.backward()?;
            opt.step(net.params(), &grads)?;
            sum += v * batch.len as f64;
            n += batch.len;
        }
        net.set_training(false);
        let train_loss = if n > 0 { sum / n as f64 } else { f64::NAN };
        let val_loss = val.loss(net, cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        tracing::info!(epoch, train_loss, val_loss, "epoch finished");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().map_or(true, |(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, net.params().to_tensors()?));
        }
        history.push(val_loss);
        if let Some(h) = hook.as_mut() {
            h(epoch, net)?;
        }
        if early_stop(&history, cfg.patience) == StopDecision::Stop {
            early_stopped = true;
            break;
        }
    }
    let (best_epoch, best_val_loss, weights) = best.expect("at least one epoch ran");
    for (name, t) in &weights {
        net.params().set(name, t)?;
    }
    Ok(FitResult {
        epochs,
        best_epoch,
        best_val_loss,
        early_stopped,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish(
    net: Network,
    cfg: &TrainConfig,
    lineage: Vec<Lineage>,
    fit: FitResult,
    datasets: &[(&str, &[&PatchSample])],
    detection_threshold: Option<f64>,
    hnp_count: Option<usize>,
    notes: Vec<String>,
    warnings: Vec<String>,
) -> Result<TrainOutcome> {
    let mut checkpoint = Checkpoint::from_network(&net, lineage.clone(), cfg.seed)?;
    checkpoint.meta.epochs = fit.epochs.len();
    checkpoint.meta.best_val_loss = Some(fit.best_val_loss);
    checkpoint.meta.learning_rate = Some(cfg.learning_rate);
    checkpoint.meta.detection_threshold = detection_threshold;
    let mut dataset_fingerprints = BTreeMap::new();
    let mut dataset_sizes = BTreeMap::new();
    for (role, samples) in datasets {
        let owned: Vec<PatchSample> = samples.iter().map(|s| (*s).clone()).collect();
        dataset_fingerprints.insert(role.to_string(), fingerprint(&owned));
        dataset_sizes.insert(role.to_string(), samples.len());
    }
    let manifest = RunManifest {
        task: cfg.task,
        config: cfg.clone(),
        model: net.config.clone(),
        lineage_chain: lineage_chain(&lineage),
        lineage,
        stopping_epoch: fit.epochs.len(),
        early_stopped: fit.early_stopped,
        best_epoch: fit.best_epoch,
        best_val_loss: fit.best_val_loss,
        epochs: fit.epochs,
        detection_threshold,
        checkpoint_path: None,
        dataset_fingerprints,
        dataset_sizes,
        hnp_count,
        notes,
        warnings,
    };
    Ok(TrainOutcome {
        network: net,
        checkpoint,
        manifest,
    })
}

fn check_task(cfg: &TrainConfig, task: Task) -> Result<()> {
    cfg.validate()?;
    if cfg.task != task {
        return Err(Error::Config(format!("config is for {:?}, not {:?}", cfg.task, task)));
    }
    Ok(())
}

fn bbs_plan<'a>(
    cfg: &'a TrainConfig,
    empty: Vec<usize>,
    non_empty: Vec<usize>,
    stream: &'static str,
) -> impl Fn(usize) -> Result<Vec<Vec<usize>>> + 'a {
    move |epoch| {
        let plan = binary_batch_sampler(
            &empty,
            &non_empty,
            &SamplerConfig::new(cfg.batch_size),
            derive_seed(cfg.seed, stream),
            epoch as u64,
        )?;
        Ok(plan
            .batches
            .into_iter()
            .map(|b| b.items.into_iter().map(|(i, _)| i).collect())
            .collect())
    }
}

/// Trains the patch classifier with balanced batches; returns the
/// best-validation checkpoint.
pub fn train_ppn(
    cfg: &TrainConfig,
    model: &ModelConfig,
    init: &Init,
    train: &[PatchSample],
    val: &[PatchSample],
    hook: EpochHook<'_>,
) -> Result<TrainOutcome> {
    check_task(cfg, Task::Ppn)?;
    let expected = match init {
        Init::Scratch => InitKind::Scratch,
        Init::ExternalPretrained(_) => InitKind::ExternalPretrained,
    };
    if cfg.init != expected {
        return Err(Error::Config(format!(
            "config init {:?} does not match the supplied {:?}",
            cfg.init, expected
        )));
    }
    let empty: Vec<usize> = (0..train.len()).filter(|&i| !train[i].is_positive()).collect();
    let non_empty: Vec<usize> = (0..train.len()).filter(|&i| train[i].is_positive()).collect();
    if empty.is_empty() || non_empty.is_empty() {
        return Err(Error::Config(
            "PPN training needs both empty and non-empty patches".into(),
        ));
    }
    let (net, lineage) = build_backbone(model.clone(), ModelKind::Ppn, init, cfg.seed, DType::F32)?;
    let valset = ValSet::new(&net, cfg, val)?;
    let refs: Vec<&PatchSample> = train.iter().collect();
    let plan = bbs_plan(cfg, empty, non_empty, "ppn-bbs");
    let fit = fit(&net, cfg, &refs, &valset, &plan, hook)?;
    let vrefs: Vec<&PatchSample> = val.iter().collect();
    finish(
        net,
        cfg,
        lineage,
        fit,
        &[("train", &refs), ("val", &vrefs)],
        None,
        None,
        Vec::new(),
        Vec::new(),
    )
}

/// Where the first detector stage takes its backbone from.
#[derive(Debug, Clone)]
pub enum DetectorInit<'a> {
    Scratch,
    ExternalPretrained(PathBuf),
    PpnTransfer(&'a Checkpoint),
}

fn require_positive(samples: &[PatchSample], role: &str) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| !s.is_positive()) {
        return Err(Error::Data(format!(
            "stage 1 {role} data must hold only positive patches; `{}` is empty",
            s.patch_id
        )));
    }
    Ok(())
}

fn calibrate(net: &Network, val: &[PatchSample]) -> Result<f64> {
    let op = calibrate_threshold(net, val, &InferenceConfig::default(), herdcount_core::eval::TP_RADIUS)?;
    Ok(op.threshold)
}

/// First detector stage on positive patches only.
pub fn train_detector_stage1(
    cfg: &TrainConfig,
    model: &ModelConfig,
    init: DetectorInit<'_>,
    train: &[PatchSample],
    val: &[PatchSample],
    hook: EpochHook<'_>,
) -> Result<TrainOutcome> {
    check_task(cfg, Task::DetectorStage1)?;
    let expected = match init {
        DetectorInit::Scratch => InitKind::Scratch,
        DetectorInit::ExternalPretrained(_) => InitKind::ExternalPretrained,
        DetectorInit::PpnTransfer(_) => InitKind::PpnTransfer,
    };
    if cfg.init != expected {
        return Err(Error::Config(format!(
            "config init {:?} does not match the supplied {:?}",
            cfg.init, expected
        )));
    }
    require_positive(train, "training")?;
    require_positive(val, "validation")?;
    if train.is_empty() {
        return Err(Error::Data("stage 1 needs at least one training patch".into()));
    }
    let (net, lineage) = match init {
        DetectorInit::Scratch => {
            build_backbone(model.clone(), ModelKind::Detector, &Init::Scratch, cfg.seed, DType::F32)?
        }
        DetectorInit::ExternalPretrained(p) => build_backbone(
            model.clone(),
            ModelKind::Detector,
            &Init::ExternalPretrained(p),
            cfg.seed,
            DType::F32,
        )?,
        DetectorInit::PpnTransfer(ppn) => {
            let ck = transfer_weights(ppn, model, cfg.seed)?;
            (ck.to_network(DType::F32)?, ck.meta.lineage)
        }
    };
    let valset = ValSet::new(&net, cfg, val)?;
    let refs: Vec<&PatchSample> = train.iter().collect();
    let n = train.len();
    let batch_size = cfg.batch_size;
    let shuffle_seed = derive_seed(cfg.seed, "stage1-shuffle");
    let plan = move |epoch: usize| -> Result<Vec<Vec<usize>>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng(derive_seed_index(shuffle_seed, epoch as u64)));
        Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
    };
    let fit = fit(&net, cfg, &refs, &valset, &plan, hook)?;
    let threshold = calibrate(&net, val)?;
    let vrefs: Vec<&PatchSample> = val.iter().collect();
    finish(
        net,
        cfg,
        lineage,
        fit,
        &[("train", &refs), ("val", &vrefs)],
        Some(threshold),
        None,
        Vec::new(),
        Vec::new(),
    )
}

/// Second detector stage: positives balanced against hard negatives.
///
/// The validation set is the stage-1 validation positives plus hard
/// negatives mined on validation images.
pub fn train_detector_stage2(
    cfg: &TrainConfig,
    stage1: &Checkpoint,
    positives: &[PatchSample],
    hnps: &[PatchSample],
    val_positives: &[PatchSample],
    val_hnps: &[PatchSample],
    hook: EpochHook<'_>,
) -> Result<TrainOutcome> {
    check_task(cfg, Task::DetectorStage2)?;
    if stage1.meta.kind != ModelKind::Detector {
        return Err(Error::Config("stage 2 needs a detector checkpoint".into()));
    }
    if hnps.is_empty() {
        return Err(Error::Data("stage 2 needs at least one hard negative patch".into()));
    }
    if let Some(s) = hnps.iter().chain(val_hnps).find(|s| s.is_positive()) {
        return Err(Error::Data(format!("hard negative `{}` contains points", s.patch_id)));
    }
    require_positive(positives, "training")?;
    let mut warnings = Vec::new();
    if let Some(lr1) = stage1.meta.learning_rate {
        if cfg.learning_rate >= lr1 {
            let w = format!(
                "stage-2 learning rate {} is not below the stage-1 rate {lr1}",
                cfg.learning_rate
            );
            tracing::warn!("{w}");
            warnings.push(w);
        }
    }
    let net = stage1.to_network(DType::F32)?;
    let train: Vec<PatchSample> = positives.iter().chain(hnps).cloned().collect();
    let val: Vec<PatchSample> = val_positives.iter().chain(val_hnps).cloned().collect();
    let valset = ValSet::new(&net, cfg, &val)?;
    let refs: Vec<&PatchSample> = train.iter().collect();
    let non_empty: Vec<usize> = (0..positives.len()).collect();
    let empty: Vec<usize> = (positives.len()..train.len()).collect();
    let plan = bbs_plan(cfg, empty, non_empty, "stage2-bbs");
    let fit = fit(&net, cfg, &refs, &valset, &plan, hook)?;
    let threshold = calibrate(&net, &val)?;
    let notes = vec![format!(
        "validation set: {} positive patches plus {} hard negatives from validation images",
        val_positives.len(),
        val_hnps.len()
    )];
    let vrefs: Vec<&PatchSample> = val.iter().collect();
    let pos_refs: Vec<&PatchSample> = positives.iter().collect();
    let hnp_refs: Vec<&PatchSample> = hnps.iter().collect();
    finish(
        net,
        cfg,
        stage1.meta.lineage.clone(),
        fit,
        &[("positives", &pos_refs), ("hnp", &hnp_refs), ("val", &vrefs)],
        Some(threshold),
        Some(hnps.len()),
        notes,
        warnings,
    )
}
