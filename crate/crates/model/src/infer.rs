use candle_core::{DType, Tensor};
use herdcount_core::detect::{
    best_f1_threshold, dedup_points, extract_points, DetectionPoint, Grid, OperatingPoint, PeakConfig,
};
use herdcount_core::eval::{Unit, TP_RADIUS};
use herdcount_core::geo::{patch_id, tile_image, TilingConfig};
use herdcount_core::raster::extract_patch;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::PatchSample;
use crate::error::{Error, Result};
use crate::net::{images_to_tensor, Network};
use crate::params::ModelKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub tiling: TilingConfig,
    pub threshold: f64,
    pub window: usize,
    pub gate_with_class_grid: bool,
    pub class_threshold: f64,
    /// Detections closer than this (inclusive) are merged across patches.
    pub merge_radius: f64,
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            tiling: TilingConfig::default(),
            threshold: 0.5,
            window: 3,
            gate_with_class_grid: true,
            class_threshold: 0.5,
            merge_radius: TP_RADIUS,
            batch_size: 4,
        }
    }
}

impl InferenceConfig {
    pub fn peak_config(&self, net: &Network) -> PeakConfig {
        PeakConfig {
            threshold: self.threshold,
            window: self.window,
            gate_with_class_grid: self.gate_with_class_grid,
            class_threshold: self.class_threshold,
            heatmap_stride: net.config.backbone.output_stride as usize,
        }
    }
}

/// Heatmap and class-grid probabilities for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMaps {
    pub heatmap: Grid,
    pub class_probs: Grid,
}

fn to_grids(t: &Tensor) -> Result<Vec<Grid>> {
    let (b, _, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(flat
        .chunks(h * w)
        .take(b)
        .map(|c| Grid {
            width: w,
            height: h,
            data: c.to_vec(),
        })
        .collect())
}

pub fn predict_maps(net: &Network, images: &[&RgbImage]) -> Result<Vec<PatchMaps>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let x = images_to_tensor(images, net.dtype())?;
    let out = net.detector_forward(&x)?;
    let heat = to_grids(&out.heatmap()?)?;
    let cls = to_grids(&out.class_probs()?)?;
    Ok(heat
        .into_iter()
        .zip(cls)
        .map(|(heatmap, class_probs)| PatchMaps { heatmap, class_probs })
        .collect())
}

/// Patch-local detections for each `(id, image)`, batched.
pub fn detect_patches(
    net: &Network,
    patches: &[(&str, &RgbImage)],
    cfg: &InferenceConfig,
) -> Result<Vec<Vec<DetectionPoint>>> {
    let peak = cfg.peak_config(net);
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(cfg.batch_size.max(1)) {
        let images: Vec<&RgbImage> = chunk.iter().map(|(_, im)| *im).collect();
        for ((id, _), maps) in chunk.iter().zip(predict_maps(net, &images)?) {
            out.push(extract_points(&maps.heatmap, Some(&maps.class_probs), &peak, id));
        }
    }
    Ok(out)
}

/// PPN probabilities for each patch, batched.
pub fn ppn_probabilities(net: &Network, images: &[&RgbImage], batch_size: usize) -> Result<Vec<f64>> {
    if net.kind != ModelKind::Ppn {
        return Err(Error::Config("prescreening needs a PPN model".into()));
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let p = net.ppn_forward(&images_to_tensor(chunk, net.dtype())?)?;
        out.extend(p.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCount {
    pub image_id: String,
    pub detections: Vec<DetectionPoint>,
    pub count: usize,
}

/// Tiles the image, detects per patch, maps detections to image
/// coordinates and merges duplicates from overlapping patches.
pub fn infer_full_image(net: &Network, image_id: &str, image: &RgbImage, cfg: &InferenceConfig) -> Result<ImageCount> {
    let (w, h) = image.dimensions();
    let origins = tile_image(w, h, &cfg.tiling)?;
    let size = cfg.tiling.patch_size;
    let peak = cfg.peak_config(net);
    let mut global = Vec::new();
    for chunk in origins.chunks(cfg.batch_size.max(1)) {
        let patches: Vec<RgbImage> = chunk.iter().map(|&o| extract_patch(image, o, size)).collect();
        let refs: Vec<&RgbImage> = patches.iter().collect();
        for (&origin, maps) in chunk.iter().zip(predict_maps(net, &refs)?) {
            let pid = patch_id(image_id, origin);
            for d in extract_points(&maps.heatmap, Some(&maps.class_probs), &peak, &pid) {
                let g = d.to_global(image_id, origin);
                // drop peaks in the reflected padding of small images
                if g.x < f64::from(w) && g.y < f64::from(h) {
                    global.push(g);
                }
            }
        }
    }
    let detections = dedup_points(&global, cfg.merge_radius);
    Ok(ImageCount {
        image_id: image_id.to_string(),
        count: detections.len(),
        detections,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedPatch {
    pub patch_id: String,
    pub image_id: String,
    pub origin: (u32, u32),
    pub probability: f64,
}

/// Patches whose PPN probability reaches `tau`, most likely first.
pub fn ppn_prescreen(
    net: &Network,
    image_id: &str,
    image: &RgbImage,
    tiling: &TilingConfig,
    tau: f64,
    batch_size: usize,
) -> Result<Vec<FlaggedPatch>> {
    let (w, h) = image.dimensions();
    let origins = tile_image(w, h, tiling)?;
    let mut flagged = Vec::new();
    for chunk in origins.chunks(batch_size.max(1)) {
        let patches: Vec<RgbImage> = chunk
            .iter()
            .map(|&o| extract_patch(image, o, tiling.patch_size))
            .collect();
        let refs: Vec<&RgbImage> = patches.iter().collect();
        for (&origin, p) in chunk.iter().zip(ppn_probabilities(net, &refs, batch_size)?) {
            if p >= tau {
                flagged.push(FlaggedPatch {
                    patch_id: patch_id(image_id, origin),
                    image_id: image_id.to_string(),
                    origin,
                    probability: p,
                });
            }
        }
    }
    flagged.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| a.patch_id.cmp(&b.patch_id))
    });
    Ok(flagged)
}

/// Detection threshold maximizing F1 on validation patches.
pub fn calibrate_threshold(
    net: &Network,
    val: &[PatchSample],
    cfg: &InferenceConfig,
    radius: f64,
) -> Result<OperatingPoint> {
    if val.is_empty() {
        return Err(Error::Data("calibration needs a non-empty validation set".into()));
    }
    let sweep = InferenceConfig { threshold: 0.0, ..*cfg };
    let patches: Vec<(&str, &RgbImage)> = val.iter().map(|s| (s.patch_id.as_str(), &s.image)).collect();
    let dets = detect_patches(net, &patches, &sweep)?;
    let units: Vec<Unit<'_, DetectionPoint, (f64, f64)>> = dets
        .iter()
        .zip(val)
        .map(|(d, s)| Unit {
            detections: d.as_slice(),
            gt: s.points.as_slice(),
        })
        .collect();
    Ok(best_f1_threshold(&units, radius)?)
}
