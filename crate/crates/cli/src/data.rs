//! Survey data directories: `images/*.png`, `annotations.csv`, optional
//! `geotransforms.json`, `validity/*.png` masks and a suite `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use herdcount_core::dataset::Split;
use herdcount_core::geo::{
    build_patch_records, group_by_image, read_annotations, read_geotransforms, PatchRecord, PatchingConfig,
    PointAnnotation, TilingConfig,
};
use herdcount_core::raster::{load_rgb, Mask};
use herdcount_core::synth::SuiteManifest;
use herdcount_model::data::PatchSample;
use image::RgbImage;

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
    /// image_id → PNG path, sorted by id.
    pub images: BTreeMap<String, PathBuf>,
    pub points: BTreeMap<String, Vec<PointAnnotation>>,
    /// Tiling recorded by a synthetic suite, if any.
    pub suite_tiling: Option<TilingConfig>,
    pub warnings: Vec<String>,
}

/// PNG files of `dir` keyed by file stem.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

impl DataDir {
    /// Opens a data directory. Annotations are optional (inference-only
    /// surveys have none); points outside their image are dropped with a
    /// warning.
    pub fn open(root: &Path) -> Result<Self> {
        let image_dir = root.join("images");
        if !image_dir.is_dir() {
            return Err(CliError::Input(format!("{} has no images/ directory", root.display())));
        }
        let images = list_images(&image_dir)?;
        if images.is_empty() {
            return Err(CliError::Input(format!("no PNG images under {}", image_dir.display())));
        }
        let gt_path = root.join("geotransforms.json");
        let transforms = if gt_path.exists() {
            Some(read_geotransforms(&gt_path)?)
        } else {
            None
        };
        let ann_path = root.join("annotations.csv");
        let all = if ann_path.exists() {
            read_annotations(&ann_path, transforms.as_ref())?
        } else {
            Vec::new()
        };
        let mut warnings = Vec::new();
        let mut points = BTreeMap::new();
        for (id, pts) in group_by_image(&all) {
            let Some(path) = images.get(&id) else {
                warnings.push(format!("{} annotations reference missing image `{id}`", pts.len()));
                continue;
            };
            let (w, h) = image::image_dimensions(path)?;
            let (inside, outside): (Vec<_>, Vec<_>) = pts.into_iter().partition(|p| p.within(w, h));
            if !outside.is_empty() {
                warnings.push(format!("{} annotations outside image `{id}` dropped", outside.len()));
            }
            points.insert(id, inside);
        }
        let manifest = root.join("manifest.json");
        let suite_tiling = if manifest.exists() {
            let bytes = fs::read(&manifest).map_err(|e| CliError::io(&manifest, e))?;
            serde_json::from_slice::<SuiteManifest>(&bytes)
                .ok()
                .map(|m| TilingConfig::new(m.patch_size, m.overlap_px))
        } else {
            None
        };
        Ok(DataDir {
            root: root.to_path_buf(),
            images,
            points,
            suite_tiling,
            warnings,
        })
    }

    pub fn points(&self, image_id: &str) -> &[PointAnnotation] {
        self.points.get(image_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn load(&self, image_id: &str) -> Result<RgbImage> {
        let path = self
            .images
            .get(image_id)
            .ok_or_else(|| CliError::Input(format!("unknown image `{image_id}`")))?;
        Ok(load_rgb(path)?)
    }

    /// The validity mask from `validity/<id>.png`, else pixels equal to the
    /// sentinel in every channel.
    pub fn nodata(&self, image_id: &str, image: &RgbImage, sentinel: u8) -> Result<Mask> {
        let path = self.root.join("validity").join(format!("{image_id}.png"));
        if path.exists() {
            let grey = image::open(&path)?.to_luma8();
            if grey.dimensions() != image.dimensions() {
                return Err(CliError::Input(format!(
                    "{} does not match its image size",
                    path.display()
                )));
            }
            return Ok(Mask::from_validity_image(&grey));
        }
        Ok(Mask::nodata_from_image(image, sentinel))
    }

    /// Patch records of one image.
    pub fn records(&self, image_id: &str, image: &RgbImage, cfg: &PatchingConfig) -> Result<Vec<PatchRecord>> {
        let mask = self.nodata(image_id, image, cfg.nodata_sentinel)?;
        let (w, h) = image.dimensions();
        Ok(build_patch_records(
            image_id,
            w,
            h,
            self.points(image_id),
            Some(&mask),
            cfg,
        )?)
    }

    /// In-memory patches of the given images.
    pub fn samples<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a str>,
        cfg: &PatchingConfig,
    ) -> Result<Vec<PatchSample>> {
        let mut out = Vec::new();
        for id in ids {
            let image = self.load(id)?;
            for r in self.records(id, &image, cfg)? {
                out.push(PatchSample::from_record(&r, &image));
            }
        }
        Ok(out)
    }
}

/// Reads a split file (JSON object image_id → split name).
pub fn read_split(path: &Path) -> Result<BTreeMap<String, Split>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let raw: BTreeMap<String, String> = serde_json::from_slice(&bytes)?;
    raw.into_iter().map(|(id, s)| Ok((id, s.parse::<Split>()?))).collect()
}

pub fn ids_in(split: &BTreeMap<String, Split>, which: Split) -> Vec<&str> {
    split
        .iter()
        .filter(|(_, s)| **s == which)
        .map(|(id, _)| id.as_str())
        .collect()
}

/// Reads patch records from a JSON-lines file.
pub fn read_records(path: &Path) -> Result<Vec<PatchRecord>> {
    Ok(herdcount_core::geo::read_manifest_file(path)?)
}

/// Cuts each record's patch out of its source image, loading every image once.
pub fn cut_records(data: &DataDir, records: &[PatchRecord]) -> Result<Vec<PatchSample>> {
    let mut by_image: BTreeMap<&str, Vec<&PatchRecord>> = BTreeMap::new();
    for r in records {
        by_image.entry(r.image_id.as_str()).or_default().push(r);
    }
    let mut cut = BTreeMap::new();
    for (id, recs) in by_image {
        let image = data.load(id)?;
        for r in recs {
            cut.insert(r.patch_id.clone(), PatchSample::from_record(r, &image));
        }
    }
    Ok(records.iter().map(|r| cut[&r.patch_id].clone()).collect())
}
