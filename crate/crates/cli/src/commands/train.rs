use std::path::Path;

use herdcount_core::dataset::Split;
use herdcount_core::geo::{write_manifest_file, PatchRecord};
use herdcount_model::checkpoint::Init;
use herdcount_model::data::PatchSample;
use herdcount_model::infer::InferenceConfig;
use herdcount_model::mining::{mine_hard_negatives, SourceImage};
use herdcount_model::train::{
    train_detector_stage1, train_detector_stage2, train_ppn, DetectorInit, InitKind, Task, TrainOutcome,
};
use herdcount_model::ModelKind;

use super::{create_parent, load_checkpoint, model_config, patching, train_config};
use crate::args::{BackboneInit, DetectArgs, DetectorInitArg, MineArgs, PretrainArgs, TrainArgs};
use crate::data::{cut_records, ids_in, read_records, read_split, DataDir};
use crate::error::{CliError, Result};
use crate::run::RunLog;

fn require<'a>(v: &'a Option<std::path::PathBuf>, flag: &str, why: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| CliError::Usage(format!("{flag} is required {why}")))
}

fn split_ids<'a>(
    split: &'a std::collections::BTreeMap<String, Split>,
    data: &DataDir,
    which: Split,
) -> Result<Vec<&'a str>> {
    let ids = ids_in(split, which);
    if let Some(id) = ids.iter().find(|id| !data.images.contains_key(**id)) {
        return Err(CliError::Input(format!(
            "split image `{id}` is not in the data directory"
        )));
    }
    if ids.is_empty() {
        return Err(CliError::Input(format!("split `{which}` has no images")));
    }
    Ok(ids)
}

fn record_outcome(log: &mut RunLog, out: &TrainOutcome, ckpt: &Path) {
    let m = &out.manifest;
    log.output("checkpoint", ckpt);
    log.detail("lineage", &m.lineage_chain);
    log.detail("stopping_epoch", m.stopping_epoch);
    log.detail("early_stopped", m.early_stopped);
    log.detail("best_epoch", m.best_epoch);
    log.detail("best_val_loss", m.best_val_loss);
    log.detail("detection_threshold", m.detection_threshold);
    log.detail("dataset_sizes", &m.dataset_sizes);
    for w in &m.warnings {
        log.warn(w.clone());
    }
}

pub fn pretrain(a: &PretrainArgs, log: &mut RunLog) -> Result<()> {
    log.in_dir(&a.out);
    let (init, kind) = match a.init {
        BackboneInit::Scratch => (Init::Scratch, InitKind::Scratch),
        BackboneInit::External => (
            Init::ExternalPretrained(require(&a.weights, "--weights", "with --init external")?.to_path_buf()),
            InitKind::ExternalPretrained,
        ),
    };
    let model = model_config(&a.model)?;
    let cfg = train_config(Task::Ppn, kind, &a.optim)?;
    log.input("data", &a.data);
    log.input("split", &a.split);
    let data = DataDir::open(&a.data)?;
    let split = read_split(&a.split)?;
    let pc = patching(&a.tiling, &data)?;
    log.detail("tiling", pc.tiling);
    log.detail("train_config", &cfg);
    let train = data.samples(split_ids(&split, &data, Split::Train)?, &pc)?;
    let val = data.samples(split_ids(&split, &data, Split::Val)?, &pc)?;
    tracing::info!(
        "pretrain: {} training and {} validation patches",
        train.len(),
        val.len()
    );
    let mut out = train_ppn(&cfg, &model, &init, &train, &val, None)?;
    let ckpt = out.save(&a.out, "ppn")?;
    record_outcome(log, &out, &ckpt);
    Ok(())
}

fn positives(samples: Vec<PatchSample>) -> Vec<PatchSample> {
    samples.into_iter().filter(PatchSample::is_positive).collect()
}

pub fn train(a: &TrainArgs, log: &mut RunLog) -> Result<()> {
    log.in_dir(&a.out);
    log.input("data", &a.data);
    log.input("split", &a.split);
    let data = DataDir::open(&a.data)?;
    let split = read_split(&a.split)?;
    let pc = patching(&a.tiling, &data)?;
    log.detail("tiling", pc.tiling);
    log.detail("stage", a.stage);
    let load_pos =
        |which| -> Result<Vec<PatchSample>> { Ok(positives(data.samples(split_ids(&split, &data, which)?, &pc)?)) };
    if a.stage == 1 {
        let kind = match a.init {
            DetectorInitArg::Scratch => InitKind::Scratch,
            DetectorInitArg::External => InitKind::ExternalPretrained,
            DetectorInitArg::Ppn => InitKind::PpnTransfer,
        };
        let cfg = train_config(Task::DetectorStage1, kind, &a.optim)?;
        let model = model_config(&a.model)?;
        let ppn;
        let init = match a.init {
            DetectorInitArg::Scratch => DetectorInit::Scratch,
            DetectorInitArg::External => {
                let w = require(&a.weights, "--weights", "with --init external")?;
                log.input("weights", w);
                DetectorInit::ExternalPretrained(w.to_path_buf())
            }
            DetectorInitArg::Ppn => {
                let w = require(&a.weights, "--weights", "with --init ppn")?;
                log.input("ppn", w);
                ppn = load_checkpoint(w, ModelKind::Ppn)?;
                DetectorInit::PpnTransfer(&ppn)
            }
        };
        log.detail("train_config", &cfg);
        let train = load_pos(Split::Train)?;
        let val = load_pos(Split::Val)?;
        tracing::info!(
            "stage 1: {} training and {} validation positives",
            train.len(),
            val.len()
        );
        let mut out = train_detector_stage1(&cfg, &model, init, &train, &val, None)?;
        let ckpt = out.save(&a.out, "detector_stage1")?;
        record_outcome(log, &out, &ckpt);
        return Ok(());
    }
    let s1 = require(&a.stage1, "--stage1", "for stage 2")?;
    let hnp_path = require(&a.hnps, "--hnps", "for stage 2")?;
    log.input("stage1", s1);
    log.input("hnps", hnp_path);
    let stage1 = load_checkpoint(s1, ModelKind::Detector)?;
    let kind = stage1.meta.lineage.last().map_or(InitKind::Scratch, |l| match l {
        herdcount_model::checkpoint::Lineage::Scratch => InitKind::Scratch,
        herdcount_model::checkpoint::Lineage::ExternalPretrained => InitKind::ExternalPretrained,
        herdcount_model::checkpoint::Lineage::PpnTransfer => InitKind::PpnTransfer,
    });
    let cfg = train_config(Task::DetectorStage2, kind, &a.optim)?;
    log.detail("train_config", &cfg);
    let hnp_records = read_records(hnp_path)?;
    let val_records = match &a.val_hnps {
        Some(p) => {
            log.input("val_hnps", p);
            read_records(p)?
        }
        None => Vec::new(),
    };
    let hnps = cut_records(&data, &hnp_records)?;
    let val_hnps = cut_records(&data, &val_records)?;
    let train = load_pos(Split::Train)?;
    let val = load_pos(Split::Val)?;
    tracing::info!("stage 2: {} positives, {} hard negatives", train.len(), hnps.len());
    let mut out = train_detector_stage2(&cfg, &stage1, &train, &hnps, &val, &val_hnps, None)?;
    let ckpt = out.save(&a.out, "detector_stage2")?;
    record_outcome(log, &out, &ckpt);
    // both totals are kept: with and without the hard negatives
    log.detail("positive_patches", train.len());
    log.detail("hnp_patches", hnps.len());
    log.detail("total_with_hnps", train.len() + hnps.len());
    Ok(())
}

pub fn inference_config(
    d: &DetectArgs,
    tiling: herdcount_core::geo::TilingConfig,
    calibrated: Option<f64>,
) -> Result<InferenceConfig> {
    let threshold = d.threshold.or(calibrated).unwrap_or(0.5);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage(format!("threshold {threshold} is outside [0, 1]")));
    }
    if d.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be positive".into()));
    }
    Ok(InferenceConfig {
        tiling,
        threshold,
        gate_with_class_grid: !d.no_gate,
        merge_radius: d.merge_radius,
        batch_size: d.batch_size,
        ..Default::default()
    })
}

fn mine_split(
    data: &DataDir,
    ids: &[&str],
    net: &herdcount_model::Network,
    cfg: &InferenceConfig,
    radius: f64,
    out: &Path,
    log: &mut RunLog,
    role: &str,
) -> Result<Vec<PatchRecord>> {
    let sources: Vec<SourceImage> = ids
        .iter()
        .map(|id| {
            Ok(SourceImage {
                image_id: id.to_string(),
                image: data.load(id)?,
                points: data.points(id).iter().map(|p| (p.x, p.y)).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let report = mine_hard_negatives(net, &sources, cfg, radius)?;
    for w in &report.warnings {
        log.warn(w.clone());
    }
    create_parent(out)?;
    write_manifest_file(out, &report.hnps)?;
    log.output(role, out);
    log.detail(
        role,
        serde_json::json!({
            "images": ids.len(),
            "detections": report.detections,
            "false_positives": report.false_positives,
            "hnps": report.hnps.len(),
        }),
    );
    Ok(report.hnps)
}

pub fn mine_hnp(a: &MineArgs, log: &mut RunLog) -> Result<()> {
    log.beside(&a.out);
    log.input("data", &a.data);
    log.input("split", &a.split);
    log.input("checkpoint", &a.checkpoint);
    let data = DataDir::open(&a.data)?;
    let split = read_split(&a.split)?;
    let ck = load_checkpoint(&a.checkpoint, ModelKind::Detector)?;
    let net = ck.to_network(candle_core::DType::F32)?;
    let pc = patching(&a.tiling, &data)?;
    let cfg = inference_config(&a.detect, pc.tiling, ck.meta.detection_threshold)?;
    log.detail("inference", cfg);
    let train_ids = split_ids(&split, &data, Split::Train)?;
    mine_split(&data, &train_ids, &net, &cfg, a.radius, &a.out, log, "hnps")?;
    if let Some(v) = &a.val_out {
        let val_ids = split_ids(&split, &data, Split::Val)?;
        mine_split(&data, &val_ids, &net, &cfg, a.radius, v, log, "val_hnps")?;
    }
    Ok(())
}
