use std::collections::BTreeMap;
use std::path::Path;

use herdcount_core::dataset::{
    split_images, DensityStats, ImageInfo, Split, SplitOptions, SplitRatios, StratificationReport,
};
use herdcount_core::eval::{count_scatter_r2, write_scatter_csv, write_table_csv, MetricsReport, R2Mode, TableRow};
use herdcount_core::geo::{group_by_image, read_annotations, tile_image, write_manifest_file, PatchLabel, PatchRecord};
use herdcount_core::raster::{extract_patch, save_png};
use herdcount_core::synth::{generate_benchmark, Suite};
use image::{Rgb, RgbImage};

use super::{create_dir, create_parent, patching, read_config, read_detections};
use crate::args::{ReportArgs, SplitArgs, SynthArgs, TileArgs};
use crate::data::{read_records, read_split, DataDir};
use crate::error::{CliError, Result};
use crate::run::{write_json_atomic, RunLog};

pub fn tile(a: &TileArgs, log: &mut RunLog) -> Result<()> {
    log.beside(&a.out);
    log.input("data", &a.data);
    let data = DataDir::open(&a.data)?;
    for w in &data.warnings {
        log.warn(w.clone());
    }
    let cfg = patching(&a.tiling, &data)?;
    log.detail("tiling", cfg.tiling);
    log.detail("dilation_px", cfg.dilation_px);
    log.detail("nodata_threshold", cfg.nodata_threshold);
    if let Some(dir) = &a.patches_dir {
        create_dir(dir)?;
    }
    let mut records = Vec::new();
    let mut dropped = 0;
    for id in data.images.keys() {
        let image = data.load(id)?;
        let (w, h) = image.dimensions();
        let recs = data.records(id, &image, &cfg)?;
        dropped += tile_image(w, h, &cfg.tiling)?.len() - recs.len();
        if let Some(dir) = &a.patches_dir {
            for r in &recs {
                save_png(
                    &extract_patch(&image, r.origin, cfg.tiling.patch_size),
                    &dir.join(format!("{}.png", r.patch_id)),
                )?;
            }
        }
        records.extend(recs);
    }
    create_parent(&a.out)?;
    write_manifest_file(&a.out, &records)?;
    log.output("manifest", &a.out);
    let non_empty = records.iter().filter(|r| r.label == PatchLabel::NonEmpty).count();
    log.detail("images", data.images.len());
    log.detail("patches", records.len());
    log.detail("non_empty", non_empty);
    log.detail("empty", records.len() - non_empty);
    log.detail("dropped_nodata", dropped);
    log.detail("points", data.points.values().map(Vec::len).sum::<usize>());
    Ok(())
}

fn parse_pin(s: &str) -> Result<(String, Split)> {
    let (id, split) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--pin `{s}` is not ID=SPLIT")))?;
    let split = split.parse::<Split>().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((id.to_string(), split))
}

pub fn split(a: &SplitArgs, log: &mut RunLog) -> Result<()> {
    log.beside(&a.out);
    log.input("data", &a.data);
    let test_split: Split = a
        .test_split
        .parse()
        .map_err(|e: herdcount_core::Error| CliError::Usage(e.to_string()))?;
    let pins: BTreeMap<String, Split> = a.pins.iter().map(|p| parse_pin(p)).collect::<Result<_>>()?;
    let data = DataDir::open(&a.data)?;
    for w in &data.warnings {
        log.warn(w.clone());
    }
    let herds: BTreeMap<String, String> = match &a.herds {
        Some(p) => {
            log.input("herds", p);
            read_config(p)?
        }
        None => BTreeMap::new(),
    };
    if let Some(id) = pins.keys().find(|id| !data.images.contains_key(*id)) {
        return Err(CliError::Input(format!(
            "pinned image `{id}` is not in the data directory"
        )));
    }
    let images: Vec<ImageInfo> = data
        .images
        .keys()
        .map(|id| ImageInfo {
            image_id: id.clone(),
            point_count: data.points(id).len() as u64,
            herd: herds.get(id).cloned().unwrap_or_else(|| "all".into()),
            fixed_split: pins.get(id).copied(),
        })
        .collect();
    let opts = SplitOptions {
        ratios: SplitRatios {
            train: a.ratios[0],
            val: a.ratios[1],
            test: a.ratios[2],
        },
        test_split,
        seed: a.seed,
    };
    let assignment = split_images(&images, &opts)?;
    for w in &assignment.warnings {
        log.warn(w.clone());
    }
    create_parent(&a.out)?;
    write_json_atomic(&a.out, &assignment.to_json())?;
    log.output("split", &a.out);
    log.detail("point_counts", &assignment.point_counts);
    log.detail("herd_proportions", &assignment.herd_proportions);
    log.detail("shares", assignment.shares(test_split));
    log.detail("max_share_deviation", assignment.max_share_deviation(&opts));
    if let Some(m) = &a.manifest {
        log.input("manifest", m);
        let records = read_records(m)?;
        log.detail("stratification", stratification(&records, &assignment.assignments));
    }
    Ok(())
}

fn stratification(records: &[PatchRecord], split: &BTreeMap<String, Split>) -> StratificationReport {
    let mut by_split: BTreeMap<Split, Vec<PatchRecord>> = BTreeMap::new();
    for r in records {
        if let Some(s) = split.get(&r.image_id) {
            by_split.entry(*s).or_default().push(r.clone());
        }
    }
    herdcount_core::dataset::stratify_ratio_report(by_split.iter().map(|(s, v)| (*s, v.as_slice())))
}

pub fn synth(a: &SynthArgs, log: &mut RunLog) -> Result<()> {
    // beside, not inside: the tree itself must be reproducible byte for byte
    log.beside(&a.out);
    let suite: Suite = a
        .suite
        .parse()
        .map_err(|e: herdcount_core::Error| CliError::Usage(e.to_string()))?;
    let bench = generate_benchmark(suite, a.seed)?;
    create_dir(&a.out)?;
    let manifest = bench.write_to(&a.out)?;
    log.output("suite", &a.out);
    log.detail("suite", suite.name());
    log.detail("seed", a.seed);
    log.detail("scenes", manifest.scenes.len());
    log.detail("animals", manifest.scenes.iter().map(|s| s.count).sum::<usize>());
    Ok(())
}

/// Bar chart of patches per animal count (zero bin excluded).
fn histogram_png(stats: &DensityStats) -> RgbImage {
    let (bar, gap, height) = (6u32, 2u32, 200u32);
    let n = stats.bins.len().max(1) as u32;
    let width = n * (bar + gap) + gap;
    let peak = stats.bins.iter().map(|b| b.patches).max().unwrap_or(0).max(1) as f64;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (i, b) in stats.bins.iter().enumerate() {
        let h = ((b.patches as f64 / peak) * f64::from(height - 1)).round() as u32;
        let x0 = gap + i as u32 * (bar + gap);
        for x in x0..x0 + bar {
            for y in height - h..height {
                img.put_pixel(x, y, Rgb([60, 90, 150]));
            }
        }
    }
    img
}

fn parse_metrics_arg(s: &str) -> Result<(String, String, &Path)> {
    let bad = || CliError::Usage(format!("--metrics `{s}` is not MODEL:TEST_SET=PATH"));
    let (label, path) = s.split_once('=').ok_or_else(bad)?;
    let (model, test_set) = label.split_once(':').ok_or_else(bad)?;
    Ok((model.to_string(), test_set.to_string(), Path::new(path)))
}

pub fn report(a: &ReportArgs, log: &mut RunLog) -> Result<()> {
    log.in_dir(&a.out);
    if a.manifest.is_none() && a.metrics.is_empty() && a.detections.is_none() {
        return Err(CliError::Usage(
            "report needs --manifest, --metrics or --detections".into(),
        ));
    }
    if a.split.is_some() && a.manifest.is_none() {
        return Err(CliError::Usage("--split needs --manifest".into()));
    }
    if a.detections.is_some() != a.annotations.is_some() {
        return Err(CliError::Usage("--detections and --annotations go together".into()));
    }
    let parsed: Vec<_> = a.metrics.iter().map(|m| parse_metrics_arg(m)).collect::<Result<_>>()?;
    create_dir(&a.out)?;
    if let Some(m) = &a.manifest {
        log.input("manifest", m);
        let records = read_records(m)?;
        let stats = DensityStats::from_patches(&records);
        let path = a.out.join("density.json");
        write_json_atomic(&path, &stats)?;
        log.output("density", &path);
        let png = a.out.join("density.png");
        save_png(&histogram_png(&stats), &png)?;
        log.output("density_histogram", &png);
        if let Some(s) = &a.split {
            log.input("split", s);
            let split = read_split(s)?;
            let path = a.out.join("stratification.json");
            write_json_atomic(&path, &stratification(&records, &split))?;
            log.output("stratification", &path);
        }
    }
    if !parsed.is_empty() {
        let mut rows = Vec::new();
        for (model, test_set, path) in parsed {
            log.input(&format!("metrics:{model}:{test_set}"), path);
            let report: MetricsReport = read_config(path)?;
            rows.push(TableRow::from_report(&model, &test_set, &report));
        }
        let path = a.out.join("table.csv");
        let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        write_table_csv(file, &rows)?;
        log.output("table", &path);
    }
    if let (Some(d), Some(g)) = (&a.detections, &a.annotations) {
        log.input("detections", d);
        log.input("annotations", g);
        let dets = read_detections(d)?;
        let gt = group_by_image(&read_annotations(g, None)?);
        let ids: std::collections::BTreeSet<&String> = dets.keys().chain(gt.keys()).collect();
        let rows: Vec<(String, f64, f64)> = ids
            .into_iter()
            .map(|id| {
                let n_gt = gt.get(id).map_or(0, Vec::len) as f64;
                let n_pred = dets.get(id).map_or(0, Vec::len) as f64;
                (id.clone(), n_gt, n_pred)
            })
            .collect();
        let path = a.out.join("scatter.csv");
        let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        write_scatter_csv(file, &rows)?;
        log.output("scatter", &path);
        let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.1, r.2)).collect();
        log.detail("r2_identity", count_scatter_r2(&pairs, R2Mode::Identity));
        log.detail("r2_fitted", count_scatter_r2(&pairs, R2Mode::Fitted));
    }
    Ok(())
}
