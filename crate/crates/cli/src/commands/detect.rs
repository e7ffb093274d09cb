use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use herdcount_core::detect::DetectionPoint;
use herdcount_core::eval::{evaluate as score, BootstrapConfig, EvalConfig, R2Mode, Unit};
use herdcount_core::geo::{group_by_image, read_annotations, read_geotransforms};
use herdcount_model::infer::{infer_full_image, ppn_prescreen};
use herdcount_model::ModelKind;
use serde::Serialize;

use super::train::inference_config;
use super::{create_dir, create_parent, load_checkpoint, patching, write_detections};
use crate::args::{EvaluateArgs, InferArgs, PrescreenArgs, R2Arg};
use crate::data::{list_images, DataDir};
use crate::error::{CliError, Result};
use crate::run::{write_json_atomic, RunLog};

#[derive(Debug, Serialize)]
struct CountSummary {
    image_id: String,
    count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    aoi_m2: Option<f64>,
}

pub fn infer(a: &InferArgs, log: &mut RunLog) -> Result<()> {
    log.in_dir(&a.out);
    log.input("checkpoint", &a.checkpoint);
    log.input("data", &a.data);
    let data = DataDir::open(&a.data)?;
    let ck = load_checkpoint(&a.checkpoint, ModelKind::Detector)?;
    let net = ck.to_network(candle_core::DType::F32)?;
    let pc = patching(&a.tiling, &data)?;
    let cfg = inference_config(&a.detect, pc.tiling, ck.meta.detection_threshold)?;
    log.detail("inference", cfg);
    let ids: Vec<&String> = if a.images.is_empty() {
        data.images.keys().collect()
    } else {
        if let Some(id) = a.images.iter().find(|id| !data.images.contains_key(*id)) {
            return Err(CliError::Input(format!("unknown image `{id}`")));
        }
        a.images.iter().collect()
    };
    let gt_path = data.root.join("geotransforms.json");
    let transforms = if gt_path.exists() {
        Some(read_geotransforms(&gt_path)?)
    } else {
        None
    };
    create_dir(&a.out)?;
    let mut all = Vec::new();
    let mut summary = Vec::new();
    for id in ids {
        let image = data.load(id)?;
        let count = infer_full_image(&net, id, &image, &cfg)?;
        tracing::info!("{id}: {} animals", count.count);
        // ground area of the valid pixels
        let aoi_m2 = match transforms.as_ref().and_then(|t| t.get(id.as_str())) {
            Some(gt) => {
                let mask = data.nodata(id, &image, pc.nodata_sentinel)?;
                let valid = (image.width() as usize * image.height() as usize - mask.count()) as f64;
                Some(valid * gt.determinant().abs())
            }
            None => None,
        };
        summary.push(CountSummary {
            image_id: id.clone(),
            count: count.count,
            aoi_m2,
        });
        all.extend(count.detections);
    }
    let det_path = a.out.join("detections.csv");
    write_detections(&det_path, &all)?;
    log.output("detections", &det_path);
    let sum_path = a.out.join("summary.json");
    write_json_atomic(&sum_path, &summary)?;
    log.output("summary", &sum_path);
    log.detail("images", summary.len());
    log.detail("total_count", all.len());
    Ok(())
}

pub fn prescreen(a: &PrescreenArgs, log: &mut RunLog) -> Result<()> {
    log.beside(&a.out);
    log.input("checkpoint", &a.checkpoint);
    log.input("data", &a.data);
    if !(0.0..=1.0).contains(&a.tau) {
        return Err(CliError::Usage(format!("--tau {} is outside [0, 1]", a.tau)));
    }
    let data = DataDir::open(&a.data)?;
    let ck = load_checkpoint(&a.checkpoint, ModelKind::Ppn)?;
    let net = ck.to_network(candle_core::DType::F32)?;
    let pc = patching(&a.tiling, &data)?;
    log.detail("tiling", pc.tiling);
    log.detail("tau", a.tau);
    let mut flagged = Vec::new();
    let mut total = 0;
    for id in data.images.keys() {
        let image = data.load(id)?;
        total += herdcount_core::geo::tile_image(image.width(), image.height(), &pc.tiling)?.len();
        flagged.extend(ppn_prescreen(&net, id, &image, &pc.tiling, a.tau, a.batch_size.max(1))?);
    }
    flagged.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| a.patch_id.cmp(&b.patch_id))
    });
    create_parent(&a.out)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(&a.out).map_err(|e| CliError::io(&a.out, e))?);
    for f in &flagged {
        serde_json::to_writer(&mut file, f)?;
        file.write_all(b"\n").map_err(|e| CliError::io(&a.out, e))?;
    }
    file.flush().map_err(|e| CliError::io(&a.out, e))?;
    log.output("flagged", &a.out);
    log.detail("patches", total);
    log.detail("flagged", flagged.len());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs, log: &mut RunLog) -> Result<()> {
    log.beside(&a.out);
    log.input("detections", &a.detections);
    log.input("annotations", &a.annotations);
    if !(a.radius > 0.0) {
        return Err(CliError::Usage("--radius must be positive".into()));
    }
    let dets = super::read_detections(&a.detections)?;
    let gt: BTreeMap<String, Vec<(f64, f64)>> = group_by_image(&read_annotations(&a.annotations, None)?)
        .into_iter()
        .map(|(id, pts)| (id, pts.iter().map(|p| (p.x, p.y)).collect()))
        .collect();
    let mut ids: BTreeSet<String> = dets.keys().chain(gt.keys()).cloned().collect();
    if let Some(dir) = &a.images {
        log.input("images", dir);
        ids.extend(list_images(dir)?.into_keys());
    }
    let none_d: Vec<DetectionPoint> = Vec::new();
    let none_g: Vec<(f64, f64)> = Vec::new();
    let units: Vec<Unit<'_, DetectionPoint, (f64, f64)>> = ids
        .iter()
        .map(|id| Unit {
            detections: dets.get(id).unwrap_or(&none_d).as_slice(),
            gt: gt.get(id).unwrap_or(&none_g).as_slice(),
        })
        .collect();
    let cfg = EvalConfig {
        radius: a.radius,
        r2_mode: match a.r2 {
            R2Arg::Identity => R2Mode::Identity,
            R2Arg::Fitted => R2Mode::Fitted,
        },
        bootstrap: (a.replicates > 0).then(|| BootstrapConfig {
            replicates: a.replicates,
            seed: a.seed,
            ..Default::default()
        }),
    };
    let report = score(&units, &cfg);
    create_parent(&a.out)?;
    write_json_atomic(&a.out, &report)?;
    log.output("metrics", &a.out);
    log.detail("units", units.len());
    log.detail("radius", a.radius);
    log.detail("f1", report.f1);
    Ok(())
}
