use std::collections::{BTreeMap, BTreeSet};

use herdcount_core::dataset::{binary_batch_sampler, split_images, ImageInfo, SamplerConfig, Split, SplitOptions};
use herdcount_core::geo::{
    build_patch_records, read_annotations, read_manifest, write_manifest, PatchLabel, PatchRecord, PatchingConfig,
};
use herdcount_core::synth::{generate_benchmark, Suite};

fn records_for(suite: Suite, seed: u64) -> Vec<PatchRecord> {
    let bench = generate_benchmark(suite, seed).unwrap();
    let cfg = PatchingConfig {
        tiling: suite.tiling(),
        ..Default::default()
    };
    bench
        .scenes
        .iter()
        .flat_map(|s| {
            let (w, h) = s.image.dimensions();
            build_patch_records(&s.image_id, w, h, &s.annotations, Some(&s.nodata), &cfg).unwrap()
        })
        .collect()
}

#[test]
fn written_suite_tiles_back_to_its_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let bench = generate_benchmark(Suite::Dense, 5).unwrap();
    let manifest = bench.write_to(dir.path()).unwrap();
    let points = read_annotations(&dir.path().join("annotations.csv"), None).unwrap();
    let total: usize = manifest.scenes.iter().map(|s| s.count).sum();
    assert_eq!(points.len(), total);

    let records = records_for(Suite::Dense, 5);
    let mut buf = Vec::new();
    write_manifest(&mut buf, &records).unwrap();
    let back = read_manifest(buf.as_slice()).unwrap();
    assert_eq!(back, records);

    // every annotation lands in at least one patch, at origin + local
    let mut seen = BTreeSet::new();
    for r in &back {
        for p in &r.points {
            let g = (p.x + f64::from(r.origin.0), p.y + f64::from(r.origin.1));
            assert!(points
                .iter()
                .any(|q| q.image_id == r.image_id && q.x == g.0 && q.y == g.1));
            seen.insert((r.image_id.clone(), g.0.to_bits(), g.1.to_bits()));
        }
    }
    assert_eq!(seen.len(), total);
}

#[test]
fn split_then_sample_keeps_images_apart_and_batches_balanced() {
    let records = records_for(Suite::Cluttered, 2);
    let mut per_image: BTreeMap<&str, u64> = BTreeMap::new();
    for r in &records {
        *per_image.entry(&r.image_id).or_default() += r.points.len() as u64;
    }
    let images: Vec<ImageInfo> = per_image
        .iter()
        .enumerate()
        .map(|(i, (id, n))| ImageInfo {
            image_id: id.to_string(),
            point_count: *n,
            herd: format!("herd{}", i % 3),
            fixed_split: None,
        })
        .collect();
    let split = split_images(&images, &SplitOptions::default()).unwrap();
    let sets: Vec<BTreeSet<&str>> = [Split::Train, Split::Val, Split::Test2017]
        .iter()
        .map(|s| split.images_in(*s))
        .collect();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            assert!(sets[i].is_disjoint(&sets[j]));
        }
    }
    assert_eq!(sets.iter().map(BTreeSet::len).sum::<usize>(), images.len());

    let train: Vec<&PatchRecord> = records
        .iter()
        .filter(|r| sets[0].contains(r.image_id.as_str()))
        .collect();
    let empty: Vec<&str> = train
        .iter()
        .filter(|r| r.label == PatchLabel::Empty)
        .map(|r| r.patch_id.as_str())
        .collect();
    let non_empty: Vec<&str> = train
        .iter()
        .filter(|r| r.label == PatchLabel::NonEmpty)
        .map(|r| r.patch_id.as_str())
        .collect();
    assert!(!empty.is_empty() && !non_empty.is_empty());
    let plan = binary_batch_sampler(&empty, &non_empty, &SamplerConfig::new(8), 3, 1).unwrap();
    let mut drawn = Vec::new();
    for b in &plan.batches {
        assert_eq!(b.count(PatchLabel::Empty), b.count(PatchLabel::NonEmpty));
        drawn.extend(
            b.items
                .iter()
                .filter(|(_, l)| *l == PatchLabel::NonEmpty)
                .map(|(id, _)| *id),
        );
    }
    drawn.sort_unstable();
    let mut want = non_empty.clone();
    want.sort_unstable();
    assert_eq!(drawn, want);
}
