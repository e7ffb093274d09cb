//! Deterministic synthetic aerial scenes.
//!
//! Animals are two-tone ellipses (body plus a darker head end) on a smooth
//! procedural ground texture, optionally mixed with clutter that shares some
//! of their appearance: dark rocks, logs, snow patches, water ripples and
//! shadows. Realism is not a goal; separability and clutter level are the
//! controlled variables.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{write_annotations_file, write_geotransforms, GeoTransform, PointAnnotation, TilingConfig};
use crate::raster::{save_png, Mask};
use crate::seed::{derive_seed_index, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClutterKind {
    Rocks,
    Logs,
    Snow,
    WaterTexture,
    Shadow,
}

impl ClutterKind {
    pub const ALL: [ClutterKind; 5] = [
        ClutterKind::Rocks,
        ClutterKind::Logs,
        ClutterKind::Snow,
        ClutterKind::WaterTexture,
        ClutterKind::Shadow,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnimalCount {
    Fixed(usize),
    /// Independent Poisson count per square cell of the given size.
    PoissonPerCell {
        mean: f64,
        cell: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub animals: AnimalCount,
    /// Body length range in pixels.
    pub length_range: (f64, f64),
    /// Body width range in pixels.
    pub width_range: (f64, f64),
    pub clutter: Vec<ClutterKind>,
    pub clutter_intensity: f64,
    pub contrast: f64,
    /// Largest tolerated fractional overlap between two bodies.
    pub occlusion_budget: f64,
    /// Minimum centre-to-centre distance between animals.
    pub min_separation: f64,
    /// When set, animal centres lie within this many pixels of the image border.
    pub edge_band: Option<f64>,
    /// Width of nodata bands on the left and right image edges.
    pub nodata_margin: u32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 512,
            height: 512,
            animals: AnimalCount::Fixed(0),
            length_range: (5.0, 14.0),
            width_range: (4.0, 7.0),
            clutter: Vec::new(),
            clutter_intensity: 0.0,
            contrast: 1.0,
            occlusion_budget: 0.0,
            min_separation: 0.0,
            edge_band: None,
            nodata_margin: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnimalShape {
    pub x: f64,
    pub y: f64,
    pub length: f64,
    pub width: f64,
    pub angle: f64,
}

impl AnimalShape {
    fn mean_radius(&self) -> f64 {
        (self.length + self.width) / 4.0
    }

    fn overlap_with(&self, o: &AnimalShape) -> f64 {
        let d = (self.x - o.x).hypot(self.y - o.y);
        (1.0 - d / (self.mean_radius() + o.mean_radius())).max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image_id: String,
    pub image: RgbImage,
    pub annotations: Vec<PointAnnotation>,
    pub animals: Vec<AnimalShape>,
    /// `true` marks nodata pixels.
    pub nodata: Mask,
    /// Realized count per cell for Poisson placement, row-major.
    pub cell_counts: Vec<usize>,
}

const PLACEMENT_ATTEMPTS: usize = 2000;

fn validate(cfg: &SceneConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(m.to_string()));
    if cfg.width == 0 || cfg.height == 0 {
        return bad("scene size must be positive");
    }
    if cfg.length_range.0 <= 0.0 || cfg.length_range.0 > cfg.length_range.1 {
        return bad("invalid animal length range");
    }
    if cfg.width_range.0 <= 0.0 || cfg.width_range.0 > cfg.width_range.1 {
        return bad("invalid animal width range");
    }
    for (name, v) in [
        ("clutter_intensity", cfg.clutter_intensity),
        ("contrast", cfg.contrast),
        ("occlusion_budget", cfg.occlusion_budget),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} must lie in [0, 1]")));
        }
    }
    if 2 * cfg.nodata_margin >= cfg.width {
        return bad("nodata margins cover the whole scene");
    }
    if let AnimalCount::PoissonPerCell { mean, cell } = cfg.animals {
        if mean < 0.0 || cell == 0 {
            return bad("poisson placement needs mean >= 0 and a positive cell");
        }
    }
    Ok(())
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Smooth value noise: bilinear interpolation of a random lattice.
struct ValueNoise {
    cell: f64,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, w: u32, h: u32, cell: f64) -> Self {
        let cols = (f64::from(w) / cell).ceil() as usize + 2;
        let rows = (f64::from(h) / cell).ceil() as usize + 2;
        let lattice = (0..cols * rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ValueNoise { cell, cols, lattice }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let (tx, ty) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
        let v = |i: usize, j: usize| self.lattice[j * self.cols + i];
        lerp(
            lerp(v(ix, iy), v(ix + 1, iy), tx),
            lerp(v(ix, iy + 1), v(ix + 1, iy + 1), tx),
            ty,
        )
    }
}

/// Float RGB canvas used while rendering.
struct Canvas {
    w: u32,
    h: u32,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.px[(y * self.w + x) as usize]
    }

    fn set(&mut self, x: u32, y: u32, c: [f64; 3]) {
        self.px[(y * self.w + x) as usize] = c;
    }

    /// Calls `f(x, y, u, v)` for pixels inside the rotated ellipse, with
    /// `(u, v)` the normalized body-frame coordinates.
    fn for_ellipse(
        &mut self,
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        angle: f64,
        mut f: impl FnMut(&mut Self, u32, u32, f64, f64),
    ) {
        let r = a.max(b).ceil() + 1.0;
        let x0 = (cx - r).floor().max(0.0) as u32;
        let y0 = (cy - r).floor().max(0.0) as u32;
        let x1 = ((cx + r).ceil() as i64).min(i64::from(self.w) - 1);
        let y1 = ((cy + r).ceil() as i64).min(i64::from(self.h) - 1);
        if x1 < 0 || y1 < 0 {
            return;
        }
        let (s, c) = angle.sin_cos();
        for y in y0..=y1 as u32 {
            for x in x0..=x1 as u32 {
                let (dx, dy) = (f64::from(x) - cx, f64::from(y) - cy);
                let u = (dx * c + dy * s) / a;
                let v = (-dx * s + dy * c) / b;
                if u * u + v * v <= 1.0 {
                    f(self, x, y, u, v);
                }
            }
        }
    }
}

fn background(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Canvas {
    let base = [
        rng.gen_range(150.0..180.0),
        rng.gen_range(150.0..175.0),
        rng.gen_range(115.0..145.0),
    ];
    let coarse = ValueNoise::new(rng, w, h, 48.0);
    let fine = ValueNoise::new(rng, w, h, 9.0);
    let mut px = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (f64::from(x), f64::from(y));
            let n = 10.0 * coarse.at(fx, fy) + 4.0 * fine.at(fx, fy) + rng.gen_range(-2.5..2.5);
            px.push([base[0] + n, base[1] + n, base[2] + 0.8 * n]);
        }
    }
    Canvas { w, h, px }
}

fn draw_clutter(canvas: &mut Canvas, rng: &mut ChaCha8Rng, kind: ClutterKind, intensity: f64) {
    if intensity <= 0.0 {
        return;
    }
    let area = f64::from(canvas.w) * f64::from(canvas.h);
    let per_64 = area / 4096.0;
    let (w, h) = (f64::from(canvas.w), f64::from(canvas.h));
    match kind {
        ClutterKind::Rocks => {
            let n = (3.0 * intensity * per_64).round() as usize;
            for _ in 0..n {
                let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
                let a = rng.gen_range(2.0..6.0);
                let b = a * rng.gen_range(0.6..1.0);
                let grey = rng.gen_range(70.0..150.0);
                let t = 0.5 + 0.5 * intensity;
                canvas.for_ellipse(
                    cx,
                    cy,
                    a,
                    b,
                    rng.gen_range(0.0..std::f64::consts::PI),
                    |cv, x, y, _, _| {
                        let p = cv.get(x, y);
                        cv.set(
                            x,
                            y,
                            [lerp(p[0], grey, t), lerp(p[1], grey, t), lerp(p[2], grey + 5.0, t)],
                        );
                    },
                );
            }
        }
        ClutterKind::Logs => {
            let n = (1.0 * intensity * per_64).round() as usize;
            for _ in 0..n {
                let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
                let a = rng.gen_range(10.0..22.0);
                let b = rng.gen_range(1.0..1.8);
                let col = [85.0, 70.0, 55.0];
                let t = 0.5 + 0.5 * intensity;
                canvas.for_ellipse(
                    cx,
                    cy,
                    a,
                    b,
                    rng.gen_range(0.0..std::f64::consts::PI),
                    |cv, x, y, _, _| {
                        let p = cv.get(x, y);
                        cv.set(
                            x,
                            y,
                            [lerp(p[0], col[0], t), lerp(p[1], col[1], t), lerp(p[2], col[2], t)],
                        );
                    },
                );
            }
        }
        ClutterKind::Snow => {
            let n = (0.5 * intensity * per_64).ceil() as usize;
            for _ in 0..n {
                let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
                for _ in 0..rng.gen_range(2..5) {
                    let ox = cx + rng.gen_range(-10.0..10.0);
                    let oy = cy + rng.gen_range(-10.0..10.0);
                    let r = rng.gen_range(5.0..14.0);
                    canvas.for_ellipse(ox, oy, r, r * rng.gen_range(0.6..1.0), 0.0, |cv, x, y, _, _| {
                        cv.set(x, y, [238.0, 240.0, 244.0]);
                    });
                }
            }
        }
        ClutterKind::WaterTexture => {
            let band_h = (h * 0.3 * intensity).max(4.0);
            let y0 = rng.gen_range(0.0..(h - band_h).max(1.0));
            let freq = rng.gen_range(0.25..0.5);
            let phase = rng.gen_range(0.0..6.28);
            for y in y0 as u32..((y0 + band_h) as u32).min(canvas.h) {
                for x in 0..canvas.w {
                    let ripple = (freq * f64::from(y) + 0.1 * f64::from(x) + phase).sin();
                    let p = cv_blend([95.0, 115.0, 135.0], 18.0 * ripple);
                    canvas.set(x, y, p);
                }
            }
        }
        ClutterKind::Shadow => {
            let n = (0.3 * intensity * per_64).ceil() as usize;
            for _ in 0..n {
                let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
                let a = rng.gen_range(10.0..30.0);
                let f = 1.0 - 0.35 * intensity;
                canvas.for_ellipse(
                    cx,
                    cy,
                    a,
                    a * rng.gen_range(0.4..0.9),
                    rng.gen_range(0.0..3.14),
                    |cv, x, y, _, _| {
                        let p = cv.get(x, y);
                        cv.set(x, y, [p[0] * f, p[1] * f, p[2] * f]);
                    },
                );
            }
        }
    }
}

fn cv_blend(c: [f64; 3], d: f64) -> [f64; 3] {
    [c[0] + d, c[1] + d, c[2] + d]
}

fn draw_animal(canvas: &mut Canvas, a: &AnimalShape, contrast: f64) {
    let body = [70.0, 48.0, 30.0];
    let head = [40.0, 28.0, 18.0];
    canvas.for_ellipse(a.x, a.y, a.length / 2.0, a.width / 2.0, a.angle, |cv, x, y, u, _| {
        let p = cv.get(x, y);
        let c = if u > 0.55 { head } else { body };
        cv.set(
            x,
            y,
            [
                lerp(p[0], c[0], contrast),
                lerp(p[1], c[1], contrast),
                lerp(p[2], c[2], contrast),
            ],
        );
    });
}

fn sample_shape(rng: &mut ChaCha8Rng, cfg: &SceneConfig, region: (f64, f64, f64, f64)) -> AnimalShape {
    let (x0, y0, x1, y1) = region;
    let (x, y) = match cfg.edge_band {
        Some(band) => loop {
            let x = rng.gen_range(x0..x1);
            let y = rng.gen_range(y0..y1);
            let d = x
                .min(y)
                .min(f64::from(cfg.width) - 1.0 - x)
                .min(f64::from(cfg.height) - 1.0 - y);
            if d <= band {
                break (x, y);
            }
        },
        None => (rng.gen_range(x0..x1), rng.gen_range(y0..y1)),
    };
    AnimalShape {
        x,
        y,
        length: rng.gen_range(cfg.length_range.0..=cfg.length_range.1),
        width: rng.gen_range(cfg.width_range.0..=cfg.width_range.1),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    }
}

fn place(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    placed: &mut Vec<AnimalShape>,
    region: (f64, f64, f64, f64),
    n: usize,
) -> Result<()> {
    let requested = placed.len() + n;
    for _ in 0..n {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let s = sample_shape(rng, cfg, region);
            let fits = placed.iter().all(|o| {
                s.overlap_with(o) <= cfg.occlusion_budget && (s.x - o.x).hypot(s.y - o.y) >= cfg.min_separation
            });
            if fits {
                placed.push(s);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Placement {
                attempts: PLACEMENT_ATTEMPTS,
                placed: placed.len(),
                requested,
            });
        }
    }
    Ok(())
}

/// Renders one scene. Identical configs give bitwise-identical output.
pub fn generate_scene(cfg: &SceneConfig, image_id: &str) -> Result<Scene> {
    validate(cfg)?;
    let mut rng = rng(cfg.seed);
    let (w, h) = (cfg.width, cfg.height);
    let mut canvas = background(&mut rng, w, h);

    let mut kinds = cfg.clutter.clone();
    kinds.sort();
    kinds.dedup();
    // ground-level clutter first so rocks and logs sit on top
    for kind in [
        ClutterKind::WaterTexture,
        ClutterKind::Snow,
        ClutterKind::Shadow,
        ClutterKind::Rocks,
        ClutterKind::Logs,
    ] {
        if kinds.contains(&kind) {
            draw_clutter(&mut canvas, &mut rng, kind, cfg.clutter_intensity);
        }
    }

    let m = f64::from(cfg.nodata_margin);
    let max_x = f64::from(w) - 1.0;
    let max_y = f64::from(h) - 1.0;
    let mut animals = Vec::new();
    let mut cell_counts = Vec::new();
    match cfg.animals {
        AnimalCount::Fixed(n) => {
            let pad = (cfg.length_range.1 / 2.0).min(max_x / 2.0).min(max_y / 2.0);
            let region = (
                m + pad.min(1.0),
                pad.min(1.0),
                (max_x - m - pad.min(1.0)).max(m + 1.0),
                max_y - pad.min(1.0),
            );
            place(&mut rng, cfg, &mut animals, region, n)?;
        }
        AnimalCount::PoissonPerCell { mean, cell } => {
            let dist = Poisson::new(mean.max(1e-12)).map_err(|e| Error::Config(e.to_string()))?;
            let (cols, rows) = (w.div_ceil(cell), h.div_ceil(cell));
            for j in 0..rows {
                for i in 0..cols {
                    let n = if mean > 0.0 { dist.sample(&mut rng) as usize } else { 0 };
                    let x0 = f64::from(i * cell).max(m);
                    let x1 = (f64::from((i + 1) * cell) - 1.0).min(max_x - m);
                    let y0 = f64::from(j * cell);
                    let y1 = (f64::from((j + 1) * cell) - 1.0).min(max_y);
                    if n > 0 && x1 > x0 && y1 > y0 {
                        place(&mut rng, cfg, &mut animals, (x0, y0, x1, y1), n)?;
                        cell_counts.push(n);
                    } else {
                        cell_counts.push(0);
                    }
                }
            }
        }
    }
    for a in &animals {
        draw_animal(&mut canvas, a, cfg.contrast);
    }

    let mut nodata = Mask::new(w, h);
    let mut image = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let band = x < cfg.nodata_margin || x >= w - cfg.nodata_margin;
            if band {
                nodata.set(x, y, true);
                image.put_pixel(x, y, Rgb([0, 0, 0]));
            } else {
                let p = canvas.get(x, y);
                let q = |v: f64| v.round().clamp(1.0, 255.0) as u8;
                image.put_pixel(x, y, Rgb([q(p[0]), q(p[1]), q(p[2])]));
            }
        }
    }
    let annotations = animals
        .iter()
        .map(|a| PointAnnotation::new(image_id, a.x, a.y))
        .collect();
    Ok(Scene {
        image_id: image_id.to_string(),
        image,
        annotations,
        animals,
        nodata,
        cell_counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Separable,
    Cluttered,
    Dense,
    SparseEdge,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable" => Ok(Suite::Separable),
            "cluttered" => Ok(Suite::Cluttered),
            "dense" => Ok(Suite::Dense),
            "sparse_edge" => Ok(Suite::SparseEdge),
            other => Err(Error::UnknownSuite(other.to_string())),
        }
    }
}

impl Suite {
    pub fn name(&self) -> &'static str {
        match self {
            Suite::Separable => "separable",
            Suite::Cluttered => "cluttered",
            Suite::Dense => "dense",
            Suite::SparseEdge => "sparse_edge",
        }
    }

    pub fn scene_count(&self) -> usize {
        match self {
            Suite::Separable => 200,
            Suite::Cluttered => 120,
            Suite::Dense => 4,
            Suite::SparseEdge => 60,
        }
    }

    /// Tiling used by the suite's desk-scale experiments.
    pub fn tiling(&self) -> TilingConfig {
        match self {
            Suite::Dense => TilingConfig::new(512, 78),
            _ => TilingConfig::new(64, 10),
        }
    }

    /// Scene configuration for scene `index`.
    pub fn scene_config(&self, seed: u64, index: usize) -> SceneConfig {
        let scene_seed = derive_seed_index(seed, index as u64);
        let mut r = rng(scene_seed ^ 0xa5a5);
        match self {
            Suite::Separable => {
                let n = if r.gen_bool(0.5) { 0 } else { r.gen_range(1..=4) };
                SceneConfig {
                    width: 64,
                    height: 64,
                    animals: AnimalCount::Fixed(n),
                    contrast: 1.0,
                    min_separation: 10.0,
                    seed: scene_seed,
                    ..Default::default()
                }
            }
            Suite::Cluttered => {
                let n = if r.gen_bool(0.35) { 0 } else { r.gen_range(1..=6) };
                SceneConfig {
                    width: 118,
                    height: 118,
                    animals: AnimalCount::Fixed(n),
                    clutter: ClutterKind::ALL.to_vec(),
                    clutter_intensity: 0.7,
                    contrast: 0.8,
                    occlusion_budget: 0.1,
                    min_separation: 9.0,
                    seed: scene_seed,
                    ..Default::default()
                }
            }
            Suite::Dense => {
                let counts = [60, 140, 210, 250];
                SceneConfig {
                    width: 512,
                    height: 512,
                    animals: AnimalCount::Fixed(counts[index % counts.len()]),
                    clutter: vec![ClutterKind::Rocks, ClutterKind::Snow],
                    clutter_intensity: 0.3,
                    contrast: 0.9,
                    occlusion_budget: 0.2,
                    seed: scene_seed,
                    ..Default::default()
                }
            }
            Suite::SparseEdge => {
                let n = if r.gen_bool(0.2) { 0 } else { r.gen_range(1..=2) };
                SceneConfig {
                    width: 64,
                    height: 64,
                    animals: AnimalCount::Fixed(n),
                    clutter: vec![ClutterKind::Rocks, ClutterKind::Shadow],
                    clutter_intensity: 0.4,
                    contrast: 0.7,
                    min_separation: 8.0,
                    edge_band: Some(10.0),
                    seed: scene_seed,
                    ..Default::default()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub image_id: String,
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub suite: Suite,
    pub seed: u64,
    pub patch_size: u32,
    pub overlap_px: u32,
    pub scenes: Vec<SceneEntry>,
}

pub struct Benchmark {
    pub suite: Suite,
    pub seed: u64,
    pub scenes: Vec<Scene>,
}

/// Generates every scene of a suite in memory.
pub fn generate_benchmark(suite: Suite, seed: u64) -> Result<Benchmark> {
    use rayon::prelude::*;
    let scenes = (0..suite.scene_count())
        .into_par_iter()
        .map(|i| generate_scene(&suite.scene_config(seed, i), &format!("{}_{i:04}", suite.name())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark { suite, seed, scenes })
}

impl Benchmark {
    pub fn manifest(&self) -> SuiteManifest {
        let tiling = self.suite.tiling();
        SuiteManifest {
            suite: self.suite,
            seed: self.seed,
            patch_size: tiling.patch_size,
            overlap_px: tiling.overlap_px,
            scenes: self
                .scenes
                .iter()
                .map(|s| SceneEntry {
                    image_id: s.image_id.clone(),
                    file: format!("images/{}.png", s.image_id),
                    width: s.image.width(),
                    height: s.image.height(),
                    count: s.annotations.len(),
                })
                .collect(),
        }
    }

    /// Writes `images/*.png`, `annotations.csv`, `geotransforms.json` and
    /// `manifest.json` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<SuiteManifest> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut all = Vec::new();
        let mut transforms = std::collections::BTreeMap::new();
        for s in &self.scenes {
            save_png(&s.image, &images.join(format!("{}.png", s.image_id)))?;
            if s.nodata.count() > 0 {
                let masks = dir.join("validity");
                fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
                s.nodata
                    .to_validity_image()
                    .save_with_format(masks.join(format!("{}.png", s.image_id)), image::ImageFormat::Png)?;
            }
            all.extend(s.annotations.iter().cloned());
            // 3 cm ground sampling distance on a local grid
            transforms.insert(s.image_id.clone(), GeoTransform::north_up(0.0, 0.0, 0.03, -0.03)?);
        }
        write_annotations_file(&dir.join("annotations.csv"), &all)?;
        write_geotransforms(&dir.join("geotransforms.json"), &transforms)?;
        let manifest = self.manifest();
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Connected components of pixels clearly darker than the local ground,
    /// returned as centroids.
    fn dark_blobs(img: &RgbImage) -> Vec<(f64, f64, usize)> {
        let (w, h) = img.dimensions();
        let dark = |x: u32, y: u32| {
            let p = img.get_pixel(x, y).0;
            (u32::from(p[0]) + u32::from(p[1]) + u32::from(p[2])) < 300
        };
        let mut seen = vec![false; (w * h) as usize];
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if seen[(y * w + x) as usize] || !dark(x, y) {
                    continue;
                }
                let mut stack = vec![(x, y)];
                seen[(y * w + x) as usize] = true;
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
                while let Some((cx, cy)) = stack.pop() {
                    sx += f64::from(cx);
                    sy += f64::from(cy);
                    n += 1;
                    let nbrs = [
                        (cx.wrapping_sub(1), cy),
                        (cx + 1, cy),
                        (cx, cy.wrapping_sub(1)),
                        (cx, cy + 1),
                    ];
                    for (nx, ny) in nbrs {
                        if nx < w && ny < h && !seen[(ny * w + nx) as usize] && dark(nx, ny) {
                            seen[(ny * w + nx) as usize] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
                out.push((sx / n as f64, sy / n as f64, n));
            }
        }
        out
    }

    #[test]
    fn no_animals_means_no_annotations() {
        let cfg = SceneConfig {
            width: 128,
            height: 96,
            clutter: ClutterKind::ALL.to_vec(),
            clutter_intensity: 0.8,
            seed: 3,
            ..Default::default()
        };
        let s = generate_scene(&cfg, "c").unwrap();
        assert!(s.annotations.is_empty());
        assert_eq!(s.image.dimensions(), (128, 96));
    }

    #[test]
    fn blob_oracle_recovers_isolated_animals() {
        let cfg = SceneConfig {
            width: 256,
            height: 256,
            animals: AnimalCount::Fixed(10),
            contrast: 1.0,
            min_separation: 20.0,
            seed: 21,
            ..Default::default()
        };
        let s = generate_scene(&cfg, "s").unwrap();
        assert_eq!(s.annotations.len(), 10);
        let blobs = dark_blobs(&s.image);
        assert_eq!(blobs.len(), 10, "{blobs:?}");
        for a in &s.annotations {
            let near = blobs
                .iter()
                .map(|b| (b.0 - a.x).hypot(b.1 - a.y))
                .fold(f64::INFINITY, f64::min);
            assert!(near <= 0.5, "annotation ({}, {}) is {near} px from its blob", a.x, a.y);
        }
    }

    #[test]
    fn same_seed_same_pixels() {
        let cfg = SceneConfig {
            width: 100,
            height: 80,
            animals: AnimalCount::Fixed(5),
            clutter: vec![ClutterKind::Rocks, ClutterKind::Logs],
            clutter_intensity: 0.5,
            seed: 9,
            ..Default::default()
        };
        let a = generate_scene(&cfg, "x").unwrap();
        let b = generate_scene(&cfg, "x").unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.annotations, b.annotations);
        let c = generate_scene(&SceneConfig { seed: 10, ..cfg }, "x").unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn overcrowding_is_a_placement_error() {
        let cfg = SceneConfig {
            width: 32,
            height: 32,
            animals: AnimalCount::Fixed(200),
            seed: 1,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&cfg, "x"), Err(Error::Placement { .. })));
    }

    #[test]
    fn nodata_bands_are_sentinel_only() {
        let cfg = SceneConfig {
            width: 120,
            height: 40,
            animals: AnimalCount::Fixed(3),
            nodata_margin: 20,
            seed: 2,
            ..Default::default()
        };
        let s = generate_scene(&cfg, "m").unwrap();
        assert_eq!(s.nodata.count(), 2 * 20 * 40);
        assert_eq!(Mask::nodata_from_image(&s.image, 0), s.nodata);
        assert!(s.annotations.iter().all(|a| a.x >= 20.0 && a.x < 100.0));
    }

    #[test]
    fn poisson_density_matches_requested_distribution() {
        use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, Poisson as P};
        let mean = 2.0;
        let cfg = SceneConfig {
            width: 64 * 40,
            height: 64 * 25,
            animals: AnimalCount::PoissonPerCell { mean, cell: 64 },
            occlusion_budget: 0.3,
            seed: 77,
            ..Default::default()
        };
        let s = generate_scene(&cfg, "d").unwrap();
        assert_eq!(s.cell_counts.len(), 1000);
        assert_eq!(s.cell_counts.iter().sum::<usize>(), s.annotations.len());
        let pois = P::new(mean).unwrap();
        let bins = 7; // 0..=5 and a pooled tail
        let mut observed = vec![0.0; bins];
        for &c in &s.cell_counts {
            observed[c.min(bins - 1)] += 1.0;
        }
        let mut chi2 = 0.0;
        let mut tail = 1.0;
        for k in 0..bins {
            let p = if k == bins - 1 { tail } else { pois.pmf(k as u64) };
            tail -= p;
            let e = 1000.0 * p;
            chi2 += (observed[k] - e).powi(2) / e;
        }
        let p_value = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p_value > 0.01, "chi2 {chi2}, p {p_value}, observed {observed:?}");
    }

    #[test]
    fn suites_meet_construction_guarantees() {
        assert!(matches!("bogus".parse::<Suite>(), Err(Error::UnknownSuite(_))));
        let dense = generate_benchmark(Suite::Dense, 5).unwrap();
        assert!(dense.scenes.iter().any(|s| s.annotations.len() >= 200));

        let edge = generate_benchmark(Suite::SparseEdge, 5).unwrap();
        for s in &edge.scenes {
            assert!(s.annotations.len() <= 2);
            for a in &s.annotations {
                let d = a.x.min(a.y).min(63.0 - a.x).min(63.0 - a.y);
                assert!(d <= 10.0, "{a:?}");
            }
        }
        let sep = generate_benchmark(Suite::Separable, 5).unwrap();
        assert_eq!(sep.scenes.len(), 200);
        let positives = sep.scenes.iter().filter(|s| !s.annotations.is_empty()).count();
        assert!((60..140).contains(&positives));
    }

    #[test]
    fn suite_written_to_disk_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let bench = generate_benchmark(Suite::SparseEdge, 7).unwrap();
        let m = bench.write_to(a.path()).unwrap();
        generate_benchmark(Suite::SparseEdge, 7)
            .unwrap()
            .write_to(b.path())
            .unwrap();
        for name in ["annotations.csv", "manifest.json", "geotransforms.json"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
        let first = &m.scenes[0];
        assert_eq!(
            fs::read(a.path().join(&first.file)).unwrap(),
            fs::read(b.path().join(&first.file)).unwrap()
        );
        let pts = crate::geo::read_annotations(&a.path().join("annotations.csv"), None).unwrap();
        assert_eq!(pts.len(), m.scenes.iter().map(|s| s.count).sum::<usize>());
    }
}
