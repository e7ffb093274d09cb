//! Peak extraction from detector heatmaps, point non-maximum suppression and
//! operating-point selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{compute_prf, confidence_order, Counts, Located, Scored, Unit};

/// Dense single-channel map, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Grid {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    PatchLocal,
    ImageGlobal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionPoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub frame: Frame,
    /// Patch id for local detections, image id for global ones.
    pub source_id: String,
}

impl Located for DetectionPoint {
    fn xy(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

impl Scored for DetectionPoint {
    fn confidence(&self) -> f64 {
        self.confidence
    }
}

impl DetectionPoint {
    pub fn to_global(&self, image_id: &str, origin: (u32, u32)) -> DetectionPoint {
        DetectionPoint {
            x: self.x + f64::from(origin.0),
            y: self.y + f64::from(origin.1),
            confidence: self.confidence,
            frame: Frame::ImageGlobal,
            source_id: image_id.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakConfig {
    pub threshold: f64,
    /// Odd neighbourhood size for the strict-maximum test.
    pub window: usize,
    /// Discard peaks whose class-grid cell scores background.
    pub gate_with_class_grid: bool,
    /// Foreground score at or above which a class-grid cell counts as animal.
    pub class_threshold: f64,
    /// Input pixels per heatmap cell.
    pub heatmap_stride: usize,
}

impl Default for PeakConfig {
    fn default() -> Self {
        PeakConfig {
            threshold: 0.5,
            window: 3,
            gate_with_class_grid: true,
            class_threshold: 0.5,
            heatmap_stride: 1,
        }
    }
}

/// Local maxima of `heatmap`, in patch pixel coordinates.
///
/// A cell is a detection iff it is strictly greater than every other cell of
/// its clipped `window × window` neighbourhood, reaches the threshold, and
/// (when gating) its covering class-grid cell scores foreground. With a
/// heatmap stride `s`, cell `(i, j)` maps to the centre of its `s × s` pixel
/// block.
pub fn extract_points(
    heatmap: &Grid,
    class_grid: Option<&Grid>,
    cfg: &PeakConfig,
    source_id: &str,
) -> Vec<DetectionPoint> {
    let r = (cfg.window.max(1) / 2) as isize;
    let (w, h) = (heatmap.width as isize, heatmap.height as isize);
    let stride = cfg.heatmap_stride.max(1) as f64;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = heatmap.get(x as usize, y as usize);
            if f64::from(v) < cfg.threshold {
                continue;
            }
            let mut is_peak = true;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    if heatmap.get(nx as usize, ny as usize) >= v {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if !is_peak {
                continue;
            }
            if cfg.gate_with_class_grid {
                if let Some(cg) = class_grid {
                    let cx = (x as usize * cg.width) / heatmap.width;
                    let cy = (y as usize * cg.height) / heatmap.height;
                    if f64::from(cg.get(cx, cy)) < cfg.class_threshold {
                        continue;
                    }
                }
            }
            out.push(DetectionPoint {
                x: x as f64 * stride + (stride - 1.0) / 2.0,
                y: y as f64 * stride + (stride - 1.0) / 2.0,
                confidence: f64::from(v).clamp(0.0, 1.0),
                frame: Frame::PatchLocal,
                source_id: source_id.to_string(),
            });
        }
    }
    out
}

/// Non-maximum suppression on points: keep detections in confidence order,
/// dropping any within `radius` (inclusive) of one already kept.
pub fn dedup_points(dets: &[DetectionPoint], radius: f64) -> Vec<DetectionPoint> {
    let mut kept: Vec<DetectionPoint> = Vec::new();
    for i in confidence_order(dets) {
        let d = &dets[i];
        if kept.iter().all(|k| (k.x - d.x).hypot(k.y - d.y) > radius) {
            kept.push(d.clone());
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// `f64::INFINITY` when there are no detections at all.
    pub threshold: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Sweeps the unique detection confidences and returns the threshold with the
/// best F1, breaking ties toward higher precision.
pub fn best_f1_threshold<D: Scored, G: Located>(units: &[Unit<'_, D, G>], radius: f64) -> Result<OperatingPoint> {
    if units.is_empty() {
        return Err(Error::EmptyInput("threshold calibration needs validation units"));
    }
    let (curve, positives) = crate::eval::pr_curve(units, radius);
    let mut best = OperatingPoint {
        threshold: f64::INFINITY,
        f1: 0.0,
        precision: 0.0,
        recall: 0.0,
    };
    let mut best_at = None;
    for (i, p) in curve.iter().enumerate() {
        let f1 = compute_prf(Counts {
            tp: p.tp,
            fp: p.predicted - p.tp,
            fn_: positives - p.tp,
        })
        .f1;
        let better =
            f1 > best.f1 + 1e-12 || ((f1 - best.f1).abs() <= 1e-12 && f1 > 0.0 && p.precision > best.precision);
        if better {
            best = OperatingPoint {
                threshold: p.threshold,
                f1,
                precision: p.precision,
                recall: p.recall,
            };
            best_at = Some(i);
        }
    }
    // sit halfway to the next lower score instead of on the last accepted one
    if let Some(next) = best_at.and_then(|i| curve.get(i + 1)) {
        best.threshold = 0.5 * (best.threshold + next.threshold);
    }
    Ok(best)
}
