//! Georeferencing, tiling and patch labelling.
//!
//! Large survey images are decomposed into overlapping square patches. Patch
//! extents are half-open (`[x0, x0 + w)`), so a point sitting exactly on the
//! right or bottom edge of a patch belongs to the next patch only.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default patch edge length in pixels.
pub const DEFAULT_PATCH_SIZE: u32 = 512;
/// Default overlap between neighbouring patches (about 15% of 512).
pub const DEFAULT_OVERLAP_PX: u32 = 78;
/// Largest animal half-length in pixels (bodies are 5 to 14 px long).
pub const MAX_ANIMAL_HALF_LENGTH: f64 = 7.0;

/// Affine pixel-to-ground transform in the usual six-coefficient layout:
///
/// ```text
/// gx = origin_x + col * pixel_width + row * row_rotation
/// gy = origin_y + col * col_rotation + row * pixel_height
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_width: f64,
    pub pixel_height: f64,
    pub row_rotation: f64,
    pub col_rotation: f64,
}

impl GeoTransform {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_width: f64,
        pixel_height: f64,
        row_rotation: f64,
        col_rotation: f64,
    ) -> Result<Self> {
        let gt = GeoTransform {
            origin_x,
            origin_y,
            pixel_width,
            pixel_height,
            row_rotation,
            col_rotation,
        };
        gt.validate()?;
        Ok(gt)
    }

    /// North-up transform without shear.
    pub fn north_up(origin_x: f64, origin_y: f64, pixel_width: f64, pixel_height: f64) -> Result<Self> {
        Self::new(origin_x, origin_y, pixel_width, pixel_height, 0.0, 0.0)
    }

    /// Builds a transform from the six coefficients in GDAL order
    /// `[origin_x, pixel_width, row_rotation, origin_y, col_rotation, pixel_height]`.
    pub fn from_gdal(c: [f64; 6]) -> Result<Self> {
        Self::new(c[0], c[3], c[1], c[5], c[2], c[4])
    }

    pub fn to_gdal(&self) -> [f64; 6] {
        [
            self.origin_x,
            self.pixel_width,
            self.row_rotation,
            self.origin_y,
            self.col_rotation,
            self.pixel_height,
        ]
    }

    pub fn determinant(&self) -> f64 {
        self.pixel_width * self.pixel_height - self.row_rotation * self.col_rotation
    }

    pub fn validate(&self) -> Result<()> {
        let coeffs = self.to_gdal();
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidTransform("non-finite coefficient".into()));
        }
        if self.pixel_width == 0.0 || self.pixel_height == 0.0 {
            return Err(Error::InvalidTransform("zero pixel size".into()));
        }
        if self.determinant() == 0.0 {
            return Err(Error::InvalidTransform("singular linear part".into()));
        }
        Ok(())
    }

    /// Ground sampling distance in centimetres, assuming metre ground units.
    pub fn gsd_cm(&self) -> f64 {
        self.pixel_width.abs() * 100.0
    }

    pub fn pixel_to_geo(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.origin_x + x * self.pixel_width + y * self.row_rotation,
            self.origin_y + x * self.col_rotation + y * self.pixel_height,
        )
    }

    pub fn geo_to_pixel(&self, gx: f64, gy: f64) -> Result<(f64, f64)> {
        self.validate()?;
        let det = self.determinant();
        let dx = gx - self.origin_x;
        let dy = gy - self.origin_y;
        let x = (self.pixel_height * dx - self.row_rotation * dy) / det;
        let y = (-self.col_rotation * dx + self.pixel_width * dy) / det;
        Ok((x, y))
    }
}

/// Reads the per-image geotransform sidecar: a JSON object mapping image id to
/// six GDAL-ordered coefficients.
pub fn read_geotransforms(path: &Path) -> Result<BTreeMap<String, GeoTransform>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, [f64; 6]> = serde_json::from_reader(BufReader::new(file))?;
    raw.into_iter()
        .map(|(id, c)| Ok((id, GeoTransform::from_gdal(c)?)))
        .collect()
}

pub fn write_geotransforms(path: &Path, transforms: &BTreeMap<String, GeoTransform>) -> Result<()> {
    let raw: BTreeMap<&String, [f64; 6]> = transforms.iter().map(|(k, v)| (k, v.to_gdal())).collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &raw)?;
    Ok(())
}

/// One animal location in pixel coordinates (column `x`, row `y`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_geo: Option<(f64, f64)>,
}

impl PointAnnotation {
    pub fn new(image_id: impl Into<String>, x: f64, y: f64) -> Self {
        PointAnnotation {
            image_id: image_id.into(),
            x,
            y,
            source_geo: None,
        }
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < f64::from(width) && self.y < f64::from(height)
    }
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    image_id: String,
    #[serde(default)]
    x: Option<f64>,
    #[serde(default)]
    y: Option<f64>,
    #[serde(default)]
    lon: Option<f64>,
    #[serde(default)]
    lat: Option<f64>,
}

/// Reads the `image_id,x,y[,lon,lat]` annotation CSV.
///
/// Rows that only carry `lon,lat` are converted with the image's transform
/// from `transforms`; a missing transform is a malformed-record error.
pub fn read_annotations(
    path: &Path,
    transforms: Option<&BTreeMap<String, GeoTransform>>,
) -> Result<Vec<PointAnnotation>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations_from(file, transforms)
}

pub fn read_annotations_from<R: std::io::Read>(
    reader: R,
    transforms: Option<&BTreeMap<String, GeoTransform>>,
) -> Result<Vec<PointAnnotation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<AnnotationRow>().enumerate() {
        let row = row?;
        let line = i + 2;
        let geo = match (row.lon, row.lat) {
            (Some(lon), Some(lat)) => Some((lon, lat)),
            _ => None,
        };
        let (x, y) = match (row.x, row.y, geo) {
            (Some(x), Some(y), _) => (x, y),
            (_, _, Some((lon, lat))) => {
                let gt = transforms
                    .and_then(|t| t.get(&row.image_id))
                    .ok_or_else(|| Error::Malformed {
                        line,
                        message: format!("no pixel coordinates and no geotransform for `{}`", row.image_id),
                    })?;
                gt.geo_to_pixel(lon, lat)?
            }
            _ => {
                return Err(Error::Malformed {
                    line,
                    message: "row has neither x,y nor lon,lat".into(),
                })
            }
        };
        out.push(PointAnnotation {
            image_id: row.image_id,
            x,
            y,
            source_geo: geo,
        });
    }
    Ok(out)
}

pub fn write_annotations<W: Write>(writer: W, points: &[PointAnnotation]) -> Result<()> {
    let with_geo = points.iter().any(|p| p.source_geo.is_some());
    let mut wtr = csv::Writer::from_writer(writer);
    if with_geo {
        wtr.write_record(["image_id", "x", "y", "lon", "lat"])?;
    } else {
        wtr.write_record(["image_id", "x", "y"])?;
    }
    for p in points {
        let mut rec = vec![p.image_id.clone(), p.x.to_string(), p.y.to_string()];
        if with_geo {
            match p.source_geo {
                Some((lon, lat)) => {
                    rec.push(lon.to_string());
                    rec.push(lat.to_string());
                }
                None => {
                    rec.push(String::new());
                    rec.push(String::new());
                }
            }
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<annotations>", e))?;
    Ok(())
}

pub fn write_annotations_file(path: &Path, points: &[PointAnnotation]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_annotations(BufWriter::new(file), points)
}

/// Groups annotations by image id.
pub fn group_by_image(points: &[PointAnnotation]) -> BTreeMap<String, Vec<PointAnnotation>> {
    let mut map: BTreeMap<String, Vec<PointAnnotation>> = BTreeMap::new();
    for p in points {
        map.entry(p.image_id.clone()).or_default().push(p.clone());
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchLabel {
    Empty,
    NonEmpty,
}

/// Reflect padding applied when the parent image is smaller than the patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Padding {
    pub right: u32,
    pub bottom: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub image_id: String,
    pub origin: (u32, u32),
    pub size: (u32, u32),
    pub label: PatchLabel,
    pub points: Vec<PointAnnotation>,
    pub nodata_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
}

impl PatchRecord {
    pub fn extent(&self) -> PatchExtent {
        PatchExtent {
            x0: self.origin.0,
            y0: self.origin.1,
            width: self.size.0,
            height: self.size.1,
        }
    }

    /// Parent-image coordinates of every local point.
    pub fn global_points(&self) -> Vec<PointAnnotation> {
        self.points
            .iter()
            .map(|p| PointAnnotation {
                image_id: self.image_id.clone(),
                x: p.x + f64::from(self.origin.0),
                y: p.y + f64::from(self.origin.1),
                source_geo: p.source_geo,
            })
            .collect()
    }
}

pub fn patch_id(image_id: &str, origin: (u32, u32)) -> String {
    format!("{image_id}_{}_{}", origin.0, origin.1)
}

/// Half-open pixel rectangle `[x0, x0 + width) × [y0, y0 + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchExtent {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

impl PatchExtent {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.contains_dilated(x, y, 0.0)
    }

    pub fn contains_dilated(&self, x: f64, y: f64, d: f64) -> bool {
        let x0 = f64::from(self.x0) - d;
        let y0 = f64::from(self.y0) - d;
        let x1 = f64::from(self.x0) + f64::from(self.width) + d;
        let y1 = f64::from(self.y0) + f64::from(self.height) + d;
        x >= x0 && x < x1 && y >= y0 && y < y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TilingConfig {
    pub patch_size: u32,
    pub overlap_px: u32,
    /// Reflect-pad images smaller than the patch instead of failing.
    pub pad_small: bool,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            overlap_px: DEFAULT_OVERLAP_PX,
            pad_small: true,
        }
    }
}

impl TilingConfig {
    pub fn new(patch_size: u32, overlap_px: u32) -> Self {
        TilingConfig {
            patch_size,
            overlap_px,
            pad_small: true,
        }
    }

    /// Overlap given as a fraction of the patch size, rounded to the nearest pixel.
    pub fn from_fraction(patch_size: u32, fraction: f64) -> Self {
        Self::new(patch_size, (f64::from(patch_size) * fraction).round() as u32)
    }

    pub fn stride(&self) -> u32 {
        self.patch_size - self.overlap_px
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        if self.overlap_px >= self.patch_size {
            return Err(Error::Config(format!(
                "overlap {} must be smaller than patch size {}",
                self.overlap_px, self.patch_size
            )));
        }
        Ok(())
    }
}

/// Origins along one axis: advance by `stride`, clamp the last origin so the
/// final patch ends on the image edge.
pub fn axis_origins(extent: u32, patch: u32, stride: u32) -> Vec<u32> {
    if extent <= patch {
        return vec![0];
    }
    let last = extent - patch;
    let mut out = vec![0];
    let mut o = 0;
    while o < last {
        o = (o + stride).min(last);
        out.push(o);
    }
    out
}

/// Patch origins `(x0, y0)` in row-major order.
pub fn tile_image(width: u32, height: u32, cfg: &TilingConfig) -> Result<Vec<(u32, u32)>> {
    cfg.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::ImageTooSmall {
            width,
            height,
            patch_size: cfg.patch_size,
        });
    }
    if (width < cfg.patch_size || height < cfg.patch_size) && !cfg.pad_small {
        return Err(Error::ImageTooSmall {
            width,
            height,
            patch_size: cfg.patch_size,
        });
    }
    let xs = axis_origins(width, cfg.patch_size, cfg.stride());
    let ys = axis_origins(height, cfg.patch_size, cfg.stride());
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect())
}

/// Binary label plus the points strictly inside the (undilated) extent, in
/// patch-local coordinates.
///
/// A point within `dilation_px` outside the extent marks the patch non-empty
/// without contributing a local point: part of the animal's body is visible.
pub fn label_patch(
    extent: &PatchExtent,
    points: &[PointAnnotation],
    dilation_px: f64,
) -> (PatchLabel, Vec<PointAnnotation>) {
    let mut hit = false;
    let mut local = Vec::new();
    for p in points {
        if extent.contains_dilated(p.x, p.y, dilation_px) {
            hit = true;
        }
        if extent.contains(p.x, p.y) {
            local.push(PointAnnotation {
                image_id: p.image_id.clone(),
                x: p.x - f64::from(extent.x0),
                y: p.y - f64::from(extent.y0),
                source_geo: p.source_geo,
            });
        }
    }
    let label = if hit { PatchLabel::NonEmpty } else { PatchLabel::Empty };
    (label, local)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginDecision {
    Keep,
    Drop,
}

pub const DEFAULT_NODATA_THRESHOLD: f64 = 0.5;

/// Margin patches with more nodata than `nodata_threshold` are dropped unless
/// they hold annotations.
pub fn filter_margin_patch(patch: &PatchRecord, nodata_threshold: f64) -> MarginDecision {
    if patch.nodata_fraction > nodata_threshold && patch.points.is_empty() {
        MarginDecision::Drop
    } else {
        MarginDecision::Keep
    }
}

/// Settings for turning one image plus its annotations into patch records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchingConfig {
    pub tiling: TilingConfig,
    pub dilation_px: f64,
    pub nodata_threshold: f64,
    pub nodata_sentinel: u8,
}

impl Default for PatchingConfig {
    fn default() -> Self {
        PatchingConfig {
            tiling: TilingConfig::default(),
            dilation_px: 0.0,
            nodata_threshold: DEFAULT_NODATA_THRESHOLD,
            nodata_sentinel: 0,
        }
    }
}

/// Tiles, labels and margin-filters one image.
///
/// `nodata` is the per-pixel nodata mask (row-major, `true` = nodata). When
/// absent, every patch reports a nodata fraction of zero.
pub fn build_patch_records(
    image_id: &str,
    width: u32,
    height: u32,
    points: &[PointAnnotation],
    nodata: Option<&crate::raster::Mask>,
    cfg: &PatchingConfig,
) -> Result<Vec<PatchRecord>> {
    let origins = tile_image(width, height, &cfg.tiling)?;
    let ps = cfg.tiling.patch_size;
    let mut out = Vec::with_capacity(origins.len());
    for origin in origins {
        let padding = if width < ps || height < ps {
            Some(Padding {
                right: ps.saturating_sub(width),
                bottom: ps.saturating_sub(height),
            })
        } else {
            None
        };
        let extent = PatchExtent {
            x0: origin.0,
            y0: origin.1,
            width: ps.min(width),
            height: ps.min(height),
        };
        let (label, local) = label_patch(&extent, points, cfg.dilation_px);
        let nodata_fraction = nodata.map(|m| m.fraction_in(&extent)).unwrap_or(0.0);
        let record = PatchRecord {
            patch_id: patch_id(image_id, origin),
            image_id: image_id.to_string(),
            origin,
            size: (ps, ps),
            label,
            points: local,
            nodata_fraction,
            padding,
        };
        if filter_margin_patch(&record, cfg.nodata_threshold) == MarginDecision::Keep {
            out.push(record);
        }
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(mut writer: W, records: &[PatchRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<manifest>", e))?;
    }
    writer.flush().map_err(|e| Error::io("<manifest>", e))?;
    Ok(())
}

pub fn write_manifest_file(path: &Path, records: &[PatchRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest(BufWriter::new(file), records)
}

pub fn read_manifest<R: std::io::Read>(reader: R) -> Result<Vec<PatchRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<manifest>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn read_manifest_file(path: &Path) -> Result<Vec<PatchRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(file)
}
