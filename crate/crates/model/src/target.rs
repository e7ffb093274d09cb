use candle_core::{DType, Device, Tensor};
use herdcount_core::detect::Grid;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Constants of the focal inverse distance transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidtParams {
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    /// Values below this are set to zero.
    pub floor: f64,
}

impl Default for FidtParams {
    fn default() -> Self {
        FidtParams {
            alpha: 0.02,
            beta: 0.75,
            c: 1.0,
            floor: 0.0,
        }
    }
}

impl FidtParams {
    /// Target value at distance `d` from the nearest point.
    pub fn value(&self, d: f64) -> f64 {
        let v = 1.0 / (d.powf(self.alpha * d + self.beta) + self.c);
        if v < self.floor {
            0.0
        } else {
            v
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidtTarget {
    pub heatmap: Grid,
    /// 1 where the cell holds at least one point.
    pub class_grid: Grid,
    pub params: FidtParams,
}

fn cell_of(v: f64, stride: u32, cells: u32) -> u32 {
    ((v.max(0.0) / f64::from(stride)).floor() as u32).min(cells.saturating_sub(1))
}

/// Builds heatmap and class-grid targets for a `width × height` patch.
///
/// The heatmap lives on the grid of the localization head (`heatmap_stride`
/// pixels per cell). Distances are measured between grid cells, so the cell
/// holding an annotation gets exactly `1 / C`.
pub fn make_fidt_target(
    points: &[(f64, f64)],
    width: u32,
    height: u32,
    params: &FidtParams,
    heatmap_stride: u32,
    class_cell: u32,
) -> FidtTarget {
    let (gw, gh) = (width / heatmap_stride, height / heatmap_stride);
    let (cw, ch) = (width / class_cell, height / class_cell);
    let cells: Vec<(f64, f64)> = points
        .iter()
        .map(|&(x, y)| {
            (
                f64::from(cell_of(x, heatmap_stride, gw)),
                f64::from(cell_of(y, heatmap_stride, gh)),
            )
        })
        .collect();
    let heatmap = if cells.is_empty() {
        Grid::zeros(gw as usize, gh as usize)
    } else {
        Grid::from_fn(gw as usize, gh as usize, |x, y| {
            let d2 = cells
                .iter()
                .map(|&(px, py)| (x as f64 - px).powi(2) + (y as f64 - py).powi(2))
                .fold(f64::INFINITY, f64::min);
            params.value(d2.sqrt()) as f32
        })
    };
    let mut class_grid = Grid::zeros(cw as usize, ch as usize);
    for &(x, y) in points {
        class_grid.set(
            cell_of(x, class_cell, cw) as usize,
            cell_of(y, class_cell, ch) as usize,
            1.0,
        );
    }
    FidtTarget {
        heatmap,
        class_grid,
        params: *params,
    }
}

/// Stacks grids into a `(B, 1, H, W)` tensor.
pub fn grids_to_tensor(grids: &[&Grid], dtype: DType) -> Result<Tensor> {
    let (w, h) = (grids[0].width, grids[0].height);
    let mut data = Vec::with_capacity(grids.len() * w * h);
    for g in grids {
        assert_eq!((g.width, g.height), (w, h), "grids in a batch must share a size");
        data.extend_from_slice(&g.data);
    }
    Ok(Tensor::from_vec(data, (grids.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}
