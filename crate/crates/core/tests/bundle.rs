use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use proptest::prelude::*;
use regionscope_core::aggregation::{aggregate_ordered, rank_regions, IoRSummary};
use regionscope_core::interchange::{
    read_manifest, write_attribution, write_manifest, write_mask, AttributionMap, Manifest,
    RegionLabelMap, RegionTable, SampleRecord,
};
use regionscope_core::patches::{
    extract_patch_pixels, topk_patches, topk_regions, Bbox, PatchRecord, TopKOptions, TopKSet,
};
use regionscope_core::pipeline::{build_bundle, validate_manifest, FindingKind, RunConfig};
use regionscope_core::rendering::{
    color_of, normalize_for_display, render_heatmap, render_report, ColorScale, DisplayValue,
    Normalization, PrototypeTemplate, ReportInputs, Rgb as Color,
};
use regionscope_core::synthetic::{write_bundle, SyntheticSpec};
use regionscope_core::Error;

/// Writes a manifest from in-memory grids; images get a per-pixel gradient.
fn write_fixture(dir: &Path, h: usize, w: usize, samples: &[(Vec<f32>, Vec<u8>)]) -> Manifest {
    let table = RegionTable::default();
    let mut manifest = Manifest::new(h, w, table.clone()).unwrap().with_base_dir(dir);
    for (i, (g, labels)) in samples.iter().enumerate() {
        let record = SampleRecord::with_default_paths(format!("s{i}"));
        write_attribution(
            dir.join(&record.attribution_path),
            &AttributionMap::new(h, w, g.clone()).unwrap(),
        )
        .unwrap();
        write_mask(
            dir.join(&record.mask_path),
            &RegionLabelMap::new(h, w, labels.clone(), &table).unwrap(),
        )
        .unwrap();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb([x as u8, y as u8, i as u8]));
        img.save(dir.join(&record.image_path)).unwrap();
        manifest.samples.push(record);
    }
    write_manifest(&manifest, dir.join("manifest.json")).unwrap();
    read_manifest(dir.join("manifest.json")).unwrap()
}

/// Full-sort reference for the top-k contract.
fn brute_force_topk(
    samples: &[(Vec<f32>, Vec<u8>)],
    h: usize,
    w: usize,
    z: usize,
    region: u8,
    k: usize,
) -> Vec<(usize, usize, f64)> {
    let cols = w / z;
    let mut all = Vec::new();
    for (pos, (g, labels)) in samples.iter().enumerate() {
        for q in 0..(h / z) * cols {
            let (r0, c0) = ((q / cols) * z, (q % cols) * z);
            let mut score = 0.0f64;
            for r in r0..r0 + z {
                for c in c0..c0 + z {
                    if labels[r * w + c] == region {
                        score += g[r * w + c] as f64;
                    }
                }
            }
            all.push((pos, q, score));
        }
    }
    all.retain(|x| x.2 > 0.0);
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

fn as_triples(set: &TopKSet) -> Vec<(usize, usize, f64)> {
    set.records
        .iter()
        .map(|r| (r.sample_position, r.patch_index, r.score))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn topk_matches_full_sort(
        n in 1usize..=8,
        k in 1usize..=20,
        region in 1u8..4,
        workers in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let (h, w, z) = (8, 8, 2);
        let mut state = seed | 1;
        let mut next = || { state ^= state << 13; state ^= state >> 7; state ^= state << 17; state };
        // coarse values so ties are common
        let samples: Vec<(Vec<f32>, Vec<u8>)> = (0..n)
            .map(|_| {
                let g = (0..h * w).map(|_| (next() % 5) as f32 / 4.0).collect();
                let l = (0..h * w).map(|_| (next() % 4) as u8).collect();
                (g, l)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_fixture(dir.path(), h, w, &samples);
        let options = TopKOptions { workers, ..TopKOptions::new(z, k) };
        let set = topk_patches(&manifest, region, &options).unwrap();
        prop_assert_eq!(as_triples(&set), brute_force_topk(&samples, h, w, z, region, k));

        // prefix property in k
        let bigger = topk_patches(&manifest, region, &TopKOptions::new(z, k + 1)).unwrap();
        prop_assert_eq!(&bigger.records[..set.records.len()], &set.records[..]);
    }
}

#[test]
fn single_patch_and_tie_break() {
    let dir = tempfile::tempdir().unwrap();
    let mut labels = vec![1u8; 16];
    for i in [0, 1, 4, 5] {
        labels[i] = 17;
    }
    let samples = vec![(vec![1.0; 16], labels.clone()), (vec![1.0; 16], labels)];
    let manifest = write_fixture(dir.path(), 4, 4, &samples);
    let set = topk_patches(&manifest, 17, &TopKOptions::new(2, 1)).unwrap();
    assert_eq!(set.records.len(), 1);
    assert_eq!(set.records[0].sample_id, "s0");
    assert_eq!(set.records[0].score, 4.0);
    assert_eq!(set.records[0].bbox, Bbox::from([0, 0, 2, 2]));

    let two = topk_patches(&manifest, 17, &TopKOptions::new(2, 5)).unwrap();
    let ids: Vec<_> = two.records.iter().map(|r| r.sample_id.as_str()).collect();
    assert_eq!(ids, ["s0", "s1"]);

    let hats = topk_patches(&manifest, 18, &TopKOptions::new(2, 20)).unwrap();
    assert!(hats.is_empty());

    assert!(matches!(
        topk_patches(&manifest, 17, &TopKOptions::new(3, 1)),
        Err(Error::InvalidPatchSize { .. })
    ));
    assert!(matches!(
        topk_patches(&manifest, 17, &TopKOptions::new(2, 0)),
        Err(Error::InvalidK)
    ));
}

#[test]
fn patch_crops_and_image_errors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_fixture(dir.path(), 4, 4, &[(vec![0.5; 16], vec![1; 16])]);
    let record = PatchRecord {
        sample_id: "s0".into(),
        sample_position: 0,
        patch_index: 0,
        region: 1,
        score: 2.0,
        bbox: Bbox::from([0, 0, 2, 2]),
    };
    let crop = extract_patch_pixels(&record, &manifest).unwrap();
    assert_eq!(crop.dimensions(), (2, 2));
    assert_eq!(crop.get_pixel(1, 0), &Rgb([1, 0, 0]));
    assert_eq!(crop.get_pixel(0, 1), &Rgb([0, 1, 0]));

    let lower_right = PatchRecord {
        bbox: Bbox::from([2, 2, 2, 2]),
        ..record.clone()
    };
    let crop = extract_patch_pixels(&lower_right, &manifest).unwrap();
    assert_eq!(crop.get_pixel(0, 0), &Rgb([2, 2, 0]));

    RgbImage::new(8, 8).save(dir.path().join("s0.png")).unwrap();
    assert!(matches!(
        extract_patch_pixels(&record, &manifest),
        Err(Error::ImageDimensionMismatch { expected: (4, 4), actual: (8, 8), .. })
    ));

    fs::remove_file(dir.path().join("s0.png")).unwrap();
    let err = extract_patch_pixels(&record, &manifest).unwrap_err();
    assert!(matches!(&err, Error::MissingImage { sample_id, .. } if sample_id == "s0"));
}

#[test]
fn manifest_document_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(dir.path(), &SyntheticSpec::new("hair", 5, 3)).unwrap();
    let original = fs::read_to_string(&path).unwrap();
    let manifest = read_manifest(&path).unwrap();
    let copy = dir.path().join("copy.json");
    write_manifest(&manifest, &copy).unwrap();
    assert_eq!(fs::read_to_string(&copy).unwrap(), original);
    let strip = |s: &str| s.split_whitespace().collect::<String>();
    let compact = serde_json::to_string(&serde_json::from_str::<serde_json::Value>(&original).unwrap()).unwrap();
    assert_eq!(strip(&manifest.to_json()), strip(&compact));
}

#[test]
fn aggregation_bit_identical_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(dir.path(), &SyntheticSpec::new("nose", 40, 11)).unwrap();
    let manifest = read_manifest(&path).unwrap();
    let one = aggregate_ordered(&manifest, "c", 1).unwrap();
    for workers in [2, 4, 7] {
        let many = aggregate_ordered(&manifest, "c", workers).unwrap();
        for (label, stat) in &one.per_region {
            let other = many.per_region[label];
            assert_eq!(stat.count, other.count);
            assert_eq!(
                stat.ior_mean.map(f64::to_bits),
                other.ior_mean.map(f64::to_bits)
            );
        }
    }
    let ranking = rank_regions(&one, false).unwrap();
    assert_eq!(ranking.entries[0].label, 10);
}

#[test]
fn validation_reports_each_defect() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(dir.path(), &SyntheticSpec::new("hair", 4, 5)).unwrap();
    let manifest = read_manifest(&path).unwrap();
    assert!(validate_manifest(&manifest, 2).unwrap().is_empty());

    let samples = dir.path().join("samples");
    let f32_path = samples.join("s0001.f32");
    let mut bytes = fs::read(&f32_path).unwrap();
    bytes.pop();
    fs::write(&f32_path, bytes).unwrap();
    let lbl_path = samples.join("s0002.lbl");
    let mut labels = fs::read(&lbl_path).unwrap();
    labels[10] = 200;
    fs::write(&lbl_path, labels).unwrap();
    fs::remove_file(samples.join("s0003.png")).unwrap();

    let findings = validate_manifest(&manifest, 3).unwrap();
    let summary: Vec<_> = findings
        .iter()
        .map(|f| (f.sample_id.as_str(), f.kind))
        .collect();
    assert_eq!(
        summary,
        [
            ("s0001", FindingKind::SizeMismatch),
            ("s0002", FindingKind::LabelOutOfRange),
            ("s0003", FindingKind::MissingImage),
        ]
    );
}

fn fills(svg: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for line in svg.lines().filter(|l| l.contains("data-region=")) {
        let attr = |name: &str| {
            let start = line.find(&format!("{name}=\"")).unwrap() + name.len() + 2;
            line[start..start + line[start..].find('"').unwrap()].to_string()
        };
        out.insert(attr("data-region"), attr("fill"));
    }
    out
}

#[test]
fn heatmap_fills_follow_color_scale() {
    let table = RegionTable::default();
    let summary = IoRSummary::from_means(
        "Male",
        table.clone(),
        3,
        [(17, 0.8, 3), (1, 0.2, 3), (10, 0.5, 3), (0, 0.99, 3)],
    );
    let template = PrototypeTemplate::default();
    let scale = ColorScale::default();
    let svg = render_heatmap(&summary, &template, &scale).unwrap();
    let f = fills(&svg);
    assert_eq!(f.len(), 18);
    assert!(!f.contains_key("background"));
    assert_eq!(f["hair"], "#ff0000");
    assert_eq!(f["skin"], "#0000ff");
    assert_eq!(f["nose"], "#00ff00");
    assert_eq!(f["hat"], "#cccccc");
    assert!(svg.contains(r#"data-region="hair" data-ior="0.8""#));

    let rendered: Vec<u8> = (1..19).collect();
    let display = normalize_for_display(&summary, &rendered, Normalization::Relative).unwrap();
    for (label, value) in display {
        let name = table.name(label).unwrap();
        if let DisplayValue::Value(v) = value {
            assert_eq!(f[name], color_of(v, &scale).unwrap().hex());
        }
    }

    let again = render_heatmap(&summary, &template, &scale).unwrap();
    assert_eq!(svg, again);

    let uniform = IoRSummary::from_means("c", table.clone(), 1, (1..19).map(|l| (l, 0.4, 1)));
    let f = fills(&render_heatmap(&uniform, &template, &scale).unwrap());
    assert!(f.values().all(|c| Color::from_hex(c) == Some(Color::new(0, 255, 0))));

    let single = IoRSummary::from_means("c", table, 1, [(4, 0.1, 1)]);
    let f = fills(&render_heatmap(&single, &template, &scale).unwrap());
    assert_eq!(f.values().filter(|c| *c != "#cccccc").count(), 1);
}

#[test]
fn report_rejects_foreign_patches() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = read_manifest(write_bundle(dir_a.path(), &SyntheticSpec::new("hair", 6, 1)).unwrap()).unwrap();
    let b = read_manifest(write_bundle(dir_b.path(), &SyntheticSpec::new("hair", 6, 2)).unwrap()).unwrap();
    let summary = aggregate_ordered(&a, "c", 1).unwrap();
    let ranking = rank_regions(&summary, false).unwrap();
    let foreign = topk_regions(&b, &[17], &TopKOptions::new(8, 5)).unwrap();
    let mosaics = BTreeMap::new();
    let err = render_report(&ReportInputs {
        summary: &summary,
        ranking: &ranking,
        topk: &foreign,
        mosaics: &mosaics,
        heatmap_svg: "<svg/>",
        config: &[],
    })
    .unwrap_err();
    assert!(matches!(err, Error::ManifestHashMismatch { .. }));

    let own = topk_regions(&a, &[17, 18], &TopKOptions::new(8, 5)).unwrap();
    let html = render_report(&ReportInputs {
        summary: &summary,
        ranking: &ranking,
        topk: &own,
        mosaics: &mosaics,
        heatmap_svg: "<svg/>",
        config: &[("top_k".into(), "5".into())],
    })
    .unwrap();
    assert_eq!(html.matches("class=\"ranked\"").count(), ranking.entries.len());
    assert!(html.contains("no activated patches"));
}

#[test]
fn in_memory_bundle_is_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(dir.path(), &SyntheticSpec::new("u_lip", 20, 9)).unwrap();
    let manifest = read_manifest(&path).unwrap();
    let config = RunConfig {
        manifest: Some(path),
        ..RunConfig::default()
    };
    let one = build_bundle(&manifest, &config).unwrap();
    let four = build_bundle(&manifest, &RunConfig { workers: 4, ..config }).unwrap();
    assert_eq!(one.files, four.files);
    assert_eq!(one.ranking.entries[0].label, 12);
    assert!(one.files.contains_key(Path::new("mosaics/u_lip.png")));
}
