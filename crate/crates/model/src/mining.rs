use std::collections::BTreeMap;

use herdcount_core::detect::DetectionPoint;
use herdcount_core::eval::match_points;
use herdcount_core::geo::{patch_id, tile_image, PatchExtent, PatchLabel, PatchRecord, TilingConfig};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::infer::{infer_full_image, InferenceConfig};
use crate::net::Network;

/// A full training image with its ground truth.
#[derive(Debug, Clone)]
pub struct SourceImage {
    pub image_id: String,
    pub image: RgbImage,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub hnps: Vec<PatchRecord>,
    pub detections: usize,
    pub false_positives: usize,
    pub threshold: f64,
    pub warnings: Vec<String>,
}

fn contains(e: &PatchExtent, (x, y): (f64, f64)) -> bool {
    x >= f64::from(e.x0) && y >= f64::from(e.y0) && x < f64::from(e.x0 + e.width) && y < f64::from(e.y0 + e.height)
}

/// Tiles of one image that hold at least one unmatched detection and no
/// ground-truth point, labelled empty.
pub fn hard_negative_patches(
    image_id: &str,
    width: u32,
    height: u32,
    detections: &[DetectionPoint],
    gt: &[(f64, f64)],
    tiling: &TilingConfig,
    radius: f64,
) -> Result<Vec<PatchRecord>> {
    let m = match_points(detections, gt, radius);
    let fps: Vec<(f64, f64)> = m.fp.iter().map(|&i| (detections[i].x, detections[i].y)).collect();
    let mut out = BTreeMap::new();
    if fps.is_empty() {
        return Ok(Vec::new());
    }
    for origin in tile_image(width, height, tiling)? {
        let extent = PatchExtent {
            x0: origin.0,
            y0: origin.1,
            width: tiling.patch_size,
            height: tiling.patch_size,
        };
        if fps.iter().any(|&p| contains(&extent, p)) && !gt.iter().any(|&p| contains(&extent, p)) {
            let id = patch_id(image_id, origin);
            out.entry(id.clone()).or_insert(PatchRecord {
                patch_id: id,
                image_id: image_id.to_string(),
                origin,
                size: (tiling.patch_size, tiling.patch_size),
                label: PatchLabel::Empty,
                points: Vec::new(),
                nodata_fraction: 0.0,
                padding: None,
            });
        }
    }
    Ok(out.into_values().collect())
}

/// Full-image inference on training images, collecting hard negatives.
pub fn mine_hard_negatives(
    net: &Network,
    images: &[SourceImage],
    cfg: &InferenceConfig,
    radius: f64,
) -> Result<MiningReport> {
    let mut hnps: BTreeMap<String, PatchRecord> = BTreeMap::new();
    let (mut detections, mut false_positives) = (0, 0);
    for img in images {
        let count = infer_full_image(net, &img.image_id, &img.image, cfg)?;
        detections += count.count;
        false_positives += match_points(&count.detections, &img.points, radius).fp.len();
        let (w, h) = img.image.dimensions();
        for r in hard_negative_patches(&img.image_id, w, h, &count.detections, &img.points, &cfg.tiling, radius)? {
            hnps.entry(r.patch_id.clone()).or_insert(r);
        }
    }
    let mut warnings = Vec::new();
    if detections == 0 {
        let w = "no detections on the mining images; no hard negatives".to_string();
        tracing::warn!("{w}");
        warnings.push(w);
    }
    Ok(MiningReport {
        hnps: hnps.into_values().collect(),
        detections,
        false_positives,
        threshold: cfg.threshold,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use herdcount_core::detect::Frame;

    fn det(x: f64, y: f64) -> DetectionPoint {
        DetectionPoint {
            x,
            y,
            confidence: 0.9,
            frame: Frame::ImageGlobal,
            source_id: "img".into(),
        }
    }

    #[test]
    fn no_detections_no_hnps() {
        let t = TilingConfig::default();
        assert!(hard_negative_patches("img", 2000, 1500, &[], &[(10.0, 10.0)], &t, 4.0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn single_fp_selects_exactly_its_covering_tiles() {
        let t = TilingConfig::default();
        let (w, h) = (2000, 1500);
        let fp = (470.0, 300.0);
        let gt = [(1800.0, 1300.0)];
        let got: Vec<(u32, u32)> = hard_negative_patches("img", w, h, &[det(fp.0, fp.1)], &gt, &t, 4.0)
            .unwrap()
            .iter()
            .map(|r| r.origin)
            .collect();
        // oracle: scan every tile produced by the tiler
        let mut want: Vec<(u32, u32)> = tile_image(w, h, &t)
            .unwrap()
            .into_iter()
            .filter(|&(x, y)| {
                fp.0 >= f64::from(x) && fp.0 < f64::from(x + 512) && fp.1 >= f64::from(y) && fp.1 < f64::from(y + 512)
            })
            .collect();
        want.sort();
        let mut got_sorted = got.clone();
        got_sorted.sort();
        assert_eq!(got_sorted, want);
        assert_eq!(want.len(), 2, "the FP lies in a horizontal overlap zone");
    }

    #[test]
    fn tiles_with_ground_truth_are_not_negatives() {
        let t = TilingConfig::default();
        // FP far from the GT point but sharing a tile with it
        let dets = [det(100.0, 100.0), det(300.0, 300.0)];
        let gt = [(100.0, 101.0)];
        let r = hard_negative_patches("img", 600, 600, &dets, &gt, &t, 4.0).unwrap();
        for rec in &r {
            assert!(!contains(&rec.extent(), gt[0]));
            assert_eq!(rec.label, PatchLabel::Empty);
        }
    }
}
