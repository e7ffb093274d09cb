//! A loaded prescreen/infer run and the review arithmetic over it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use herdcount_core::detect::{DetectionPoint, Frame};
use herdcount_core::geo::{
    patch_id, tile_image, Padding, PatchExtent, PatchLabel, PatchRecord, PointAnnotation, TilingConfig,
};
use herdcount_model::infer::FlaggedPatch;
use serde::{Deserialize, Serialize};

use super::store::{Decision, Verdict};
use crate::data::DataDir;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchInfo {
    pub patch_id: String,
    pub image_id: String,
    pub origin: (u32, u32),
    /// Pixels of the patch that lie inside the image.
    pub extent: PatchExtent,
    /// PPN probability for flagged patches.
    pub probability: Option<f64>,
}

impl PatchInfo {
    pub fn flagged(&self) -> bool {
        self.probability.is_some()
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.extent.contains(x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalPoint {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageSummary {
    pub image_id: String,
    pub raw_count: usize,
    pub reviewed_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurveySummary {
    pub images: Vec<ImageSummary>,
    pub raw_total: usize,
    pub reviewed_total: usize,
    pub flagged_patches: usize,
    pub reviewed_flagged: usize,
    /// Reviewed share of the flagged queue; 1 when nothing is flagged.
    pub progress: f64,
    pub active_decisions: usize,
    pub manual_overrides: usize,
}

#[derive(Debug)]
pub struct Survey {
    pub data: DataDir,
    pub tiling: TilingConfig,
    pub patches: BTreeMap<String, PatchInfo>,
    /// Flagged patch ids, most likely first.
    pub queue: Vec<String>,
    /// Global-frame model detections per image.
    pub detections: BTreeMap<String, Vec<DetectionPoint>>,
}

impl Survey {
    /// Loads `images/`, `flagged.jsonl` (prescreen output) and
    /// `detections.csv` (infer output) from `root`. A missing detections file
    /// means no detections.
    pub fn load(root: &Path, tiling: TilingConfig) -> Result<Self> {
        let data = DataDir::open(root)?;
        let mut patches = BTreeMap::new();
        for (id, path) in &data.images {
            let (w, h) = image::image_dimensions(path)?;
            for origin in tile_image(w, h, &tiling)? {
                let pid = patch_id(id, origin);
                let extent = PatchExtent {
                    x0: origin.0,
                    y0: origin.1,
                    width: tiling.patch_size.min(w - origin.0),
                    height: tiling.patch_size.min(h - origin.1),
                };
                patches.insert(
                    pid.clone(),
                    PatchInfo {
                        patch_id: pid,
                        image_id: id.clone(),
                        origin,
                        extent,
                        probability: None,
                    },
                );
            }
        }
        let flagged_path = root.join("flagged.jsonl");
        let text = fs::read_to_string(&flagged_path).map_err(|e| CliError::io(&flagged_path, e))?;
        let mut flagged: Vec<FlaggedPatch> = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            flagged.push(
                serde_json::from_str(line)
                    .map_err(|e| CliError::Input(format!("{} line {}: {e}", flagged_path.display(), i + 1)))?,
            );
        }
        flagged.sort_by(|a, b| {
            b.probability
                .total_cmp(&a.probability)
                .then_with(|| a.patch_id.cmp(&b.patch_id))
        });
        let mut queue = Vec::with_capacity(flagged.len());
        for f in flagged {
            let p = patches.get_mut(&f.patch_id).ok_or_else(|| {
                CliError::Input(format!(
                    "flagged patch `{}` is not a tile of any image at patch size {} / overlap {}",
                    f.patch_id, tiling.patch_size, tiling.overlap_px
                ))
            })?;
            p.probability = Some(f.probability);
            queue.push(f.patch_id);
        }
        let det_path = root.join("detections.csv");
        let detections = if det_path.exists() {
            crate::commands::read_detections(&det_path)?
        } else {
            BTreeMap::new()
        };
        if let Some(id) = detections.keys().find(|id| !data.images.contains_key(*id)) {
            return Err(CliError::Input(format!("detections reference unknown image `{id}`")));
        }
        Ok(Survey {
            data,
            tiling,
            patches,
            queue,
            detections,
        })
    }

    pub fn patch(&self, id: &str) -> Option<&PatchInfo> {
        self.patches.get(id)
    }

    /// Model detections inside a patch, in patch-local coordinates.
    pub fn patch_detections(&self, p: &PatchInfo) -> Vec<DetectionPoint> {
        self.detections
            .get(&p.image_id)
            .map(|dets| {
                dets.iter()
                    .filter(|d| p.contains(d.x, d.y))
                    .map(|d| DetectionPoint {
                        x: d.x - f64::from(p.origin.0),
                        y: d.y - f64::from(p.origin.1),
                        confidence: d.confidence,
                        frame: Frame::PatchLocal,
                        source_id: p.patch_id.clone(),
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Checks corrected points against the patch's in-image extent.
    pub fn validate_points(&self, p: &PatchInfo, points: &[LocalPoint]) -> std::result::Result<(), String> {
        for (i, q) in points.iter().enumerate() {
            let inside = q.x.is_finite()
                && q.y.is_finite()
                && q.x >= 0.0
                && q.y >= 0.0
                && q.x < f64::from(p.extent.width)
                && q.y < f64::from(p.extent.height);
            if !inside {
                return Err(format!(
                    "corrected point {i} ({}, {}) is outside the {}x{} patch",
                    q.x, q.y, p.extent.width, p.extent.height
                ));
            }
        }
        Ok(())
    }

    /// Global points per image after applying the active decisions in
    /// the order they were made: a reject removes the patch's current
    /// points, a correction replaces them, an accept keeps them.
    pub fn reviewed_points(&self, active: &[Decision]) -> BTreeMap<String, Vec<(f64, f64)>> {
        let mut out: BTreeMap<String, Vec<(f64, f64)>> = self
            .data
            .images
            .keys()
            .map(|id| {
                let pts = self
                    .detections
                    .get(id)
                    .map(|d| d.iter().map(|d| (d.x, d.y)).collect())
                    .unwrap_or_default();
                (id.clone(), pts)
            })
            .collect();
        let mut ordered: Vec<&Decision> = active.iter().collect();
        ordered.sort_by_key(|d| d.seq);
        for d in ordered {
            let Some(p) = self.patches.get(&d.patch_id) else {
                continue;
            };
            let pts = out.entry(p.image_id.clone()).or_default();
            match d.verdict {
                Verdict::Accept => {}
                Verdict::Reject => pts.retain(|&(x, y)| !p.contains(x, y)),
                Verdict::Corrected => {
                    pts.retain(|&(x, y)| !p.contains(x, y));
                    for q in d.corrected_points.iter().flatten() {
                        pts.push((q.x + f64::from(p.origin.0), q.y + f64::from(p.origin.1)));
                    }
                }
            }
        }
        out
    }

    pub fn summary(&self, active: &[Decision]) -> SurveySummary {
        let reviewed = self.reviewed_points(active);
        let images: Vec<ImageSummary> = self
            .data
            .images
            .keys()
            .map(|id| ImageSummary {
                image_id: id.clone(),
                raw_count: self.detections.get(id).map_or(0, Vec::len),
                reviewed_count: reviewed.get(id).map_or(0, Vec::len),
            })
            .collect();
        let reviewed_flagged = active
            .iter()
            .filter(|d| self.patches.get(&d.patch_id).is_some_and(PatchInfo::flagged))
            .count();
        let flagged = self.queue.len();
        SurveySummary {
            raw_total: images.iter().map(|i| i.raw_count).sum(),
            reviewed_total: images.iter().map(|i| i.reviewed_count).sum(),
            images,
            flagged_patches: flagged,
            reviewed_flagged,
            progress: if flagged == 0 {
                1.0
            } else {
                reviewed_flagged as f64 / flagged as f64
            },
            active_decisions: active.len(),
            manual_overrides: active.iter().filter(|d| d.manual_override).count(),
        }
    }

    /// Reviewed points as annotations, ordered by image then position.
    pub fn export_annotations(&self, active: &[Decision]) -> Vec<PointAnnotation> {
        self.reviewed_points(active)
            .into_iter()
            .flat_map(|(id, pts)| {
                pts.into_iter()
                    .map(move |(x, y)| PointAnnotation::new(id.clone(), x, y))
            })
            .collect()
    }

    /// Rejected patches as empty patch records for the mining pool.
    pub fn hnp_candidates(&self, active: &[Decision]) -> Result<Vec<PatchRecord>> {
        let ps = self.tiling.patch_size;
        let mut out = Vec::new();
        for d in active.iter().filter(|d| d.verdict == Verdict::Reject) {
            let Some(p) = self.patches.get(&d.patch_id) else {
                continue;
            };
            let image = self.data.load(&p.image_id)?;
            let nodata = self.data.nodata(&p.image_id, &image, 0)?;
            let padding = (p.extent.width < ps || p.extent.height < ps).then_some(Padding {
                right: ps - p.extent.width,
                bottom: ps - p.extent.height,
            });
            out.push(PatchRecord {
                patch_id: p.patch_id.clone(),
                image_id: p.image_id.clone(),
                origin: p.origin,
                size: (ps, ps),
                label: PatchLabel::Empty,
                points: Vec::new(),
                nodata_fraction: nodata.fraction_in(&p.extent),
                padding,
            });
        }
        out.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
        Ok(out)
    }
}
