//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run alone with `cargo test -p regionscope-cli --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regionscope_core::aggregation::{aggregate, aggregate_ordered, sample_ior};
use regionscope_core::evaluation::{mean_ranking, ranked};
use regionscope_core::interchange::{
    load_attribution, load_mask, read_manifest, write_attribution, write_manifest, write_mask,
    AttributionMap, Manifest, RegionLabelMap, RegionTable, SampleRecord,
};
use regionscope_core::patches::{score_patches, topk_patches, PatchGrid, TopKOptions};
use regionscope_core::pipeline::{run_pipeline, RunConfig};
use regionscope_core::rendering::{color_of, normalize_for_display, ColorScale, DisplayValue, Normalization};
use regionscope_core::synthetic::{write_bundle, SyntheticSpec};
use regionscope_core::Error;

const REGIONS: u8 = 19;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(condition: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if condition {
        Ok(())
    } else {
        Err(message())
    }
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f32>, Vec<u8>) {
    let g = (0..h * w).map(|_| rng.random::<f32>()).collect();
    let l = (0..h * w).map(|_| rng.random_range(0..REGIONS)).collect();
    (g, l)
}

fn maps(h: usize, w: usize, g: Vec<f32>, l: Vec<u8>) -> (AttributionMap, RegionLabelMap) {
    (
        AttributionMap::new(h, w, g).unwrap(),
        RegionLabelMap::new(h, w, l, &RegionTable::default()).unwrap(),
    )
}

fn ior_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let started = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (g, l) = random_grid(&mut rng, h, w);
        let (a, m) = maps(h, w, g.clone(), l.clone());
        let engine = sample_ior("x", &a, &m).map_err(|e| e.to_string())?;
        for region in 0..REGIONS {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..h {
                for j in 0..w {
                    let mask = (l[i * w + j] == region) as u8 as f64;
                    num += g[i * w + j] as f64 * mask;
                    den += mask;
                }
            }
            match (engine.get(region), den > 0.0) {
                (Some(v), true) => worst = worst.max((v - num / den).abs()),
                (None, false) => {}
                _ => return Err(format!("presence of region {region} disagrees")),
            }
        }
    }
    let elapsed = started.elapsed();
    ensure(worst <= 1e-6, || format!("max abs diff {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 grids, max abs diff {worst:e}, {elapsed:.2?}"))
}

fn divide_by_presence() -> Check {
    let table = RegionTable::default();
    let hat = table.label("hat").unwrap();
    let skin = table.label("skin").unwrap();
    // 4x4 grid: 10 hat pixels, nine of them at 1.0 -> IoR exactly 0.9
    let mut with_hat = vec![skin; 16];
    let mut g = vec![0.5f32; 16];
    for (i, label) in with_hat.iter_mut().enumerate().take(10) {
        *label = hat;
        g[i] = if i < 9 { 1.0 } else { 0.0 };
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let samples = [
        (g, with_hat),
        (vec![0.2; 16], vec![skin; 16]),
        (vec![0.4; 16], vec![skin; 16]),
    ];
    let manifest = write_fixture(dir.path(), 4, 4, &samples);
    let in_memory = aggregate(
        &samples
            .iter()
            .map(|(g, l)| {
                let (a, m) = maps(4, 4, g.clone(), l.clone());
                sample_ior("x", &a, &m).unwrap()
            })
            .collect::<Vec<_>>(),
        "c",
        &table,
    )
    .map_err(|e| e.to_string())?;
    let on_disk = aggregate_ordered(&manifest, "c", 2).map_err(|e| e.to_string())?;
    for summary in [in_memory, on_disk] {
        let stat = summary.stat(hat).unwrap();
        ensure(stat.count == 1, || format!("N_hat = {}", stat.count))?;
        ensure(stat.ior_mean == Some(0.9), || format!("ior_mean(hat) = {:?}", stat.ior_mean))?;
    }
    Ok("ior_mean(hat) == 0.9 exactly with N_hat = 1 of 3".into())
}

fn patch_partition() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let table = RegionTable::default();
    let mut worst = 0.0f64;
    for case in 0..200 {
        let z = [2usize, 4, 8][case % 3];
        let (h, w) = (z * rng.random_range(1..=4), z * rng.random_range(1..=4));
        let (g, l) = random_grid(&mut rng, h, w);
        let (a, m) = maps(h, w, g.clone(), l.clone());
        let grid = PatchGrid::new(h, w, z).map_err(|e| e.to_string())?;
        for region in 0..REGIONS {
            let scores = score_patches(&a, &m, &grid, region, &table).map_err(|e| e.to_string())?;
            let mass: f64 = g
                .iter()
                .zip(&l)
                .filter(|(_, &lab)| lab == region)
                .map(|(&v, _)| v as f64)
                .sum();
            worst = worst.max((scores.iter().sum::<f64>() - mass).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max abs diff {worst:e}"))?;
    Ok(format!("200 fixtures, Z in {{2,4,8}}, max abs diff {worst:e}"))
}

fn write_fixture(dir: &Path, h: usize, w: usize, samples: &[(Vec<f32>, Vec<u8>)]) -> Manifest {
    let table = RegionTable::default();
    let mut manifest = Manifest::new(h, w, table.clone()).unwrap().with_base_dir(dir);
    for (i, (g, l)) in samples.iter().enumerate() {
        let record = SampleRecord::with_default_paths(format!("s{i}"));
        write_attribution(dir.join(&record.attribution_path), &AttributionMap::new(h, w, g.clone()).unwrap()).unwrap();
        write_mask(dir.join(&record.mask_path), &RegionLabelMap::new(h, w, l.clone(), &table).unwrap()).unwrap();
        manifest.samples.push(record);
    }
    write_manifest(&manifest, dir.join("manifest.json")).unwrap();
    read_manifest(dir.join("manifest.json")).unwrap()
}

fn topk_brute_force() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, z) = (8usize, 8usize, 2usize);
    let cols = w / z;
    let mut compared = 0usize;
    let mut ties = 0usize;
    for trial in 0..60 {
        let n = rng.random_range(1..=8);
        // quantised values so equal scores are common
        let samples: Vec<(Vec<f32>, Vec<u8>)> = (0..n)
            .map(|_| {
                let g = (0..h * w).map(|_| rng.random_range(0..5) as f32 / 4.0).collect();
                let l = (0..h * w).map(|_| rng.random_range(0..4u8)).collect();
                (g, l)
            })
            .collect();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let manifest = write_fixture(dir.path(), h, w, &samples);
        let region = rng.random_range(1..4u8);
        let k = rng.random_range(1..=30);

        let mut all = Vec::new();
        for (pos, (g, l)) in samples.iter().enumerate() {
            for q in 0..(h / z) * cols {
                let (r0, c0) = ((q / cols) * z, (q % cols) * z);
                let mut score = 0.0f64;
                for r in r0..r0 + z {
                    for c in c0..c0 + z {
                        if l[r * w + c] == region {
                            score += g[r * w + c] as f64;
                        }
                    }
                }
                if score > 0.0 {
                    all.push((pos, q, score));
                }
            }
        }
        all.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        all.truncate(k);
        ties += all.windows(2).filter(|p| p[0].2 == p[1].2).count();

        let options = TopKOptions {
            workers: 1 + trial % 4,
            ..TopKOptions::new(z, k)
        };
        let set = topk_patches(&manifest, region, &options).map_err(|e| e.to_string())?;
        let got: Vec<_> = set
            .records
            .iter()
            .map(|r| (r.sample_position, r.patch_index, r.score))
            .collect();
        ensure(got == all, || format!("trial {trial}: engine {got:?} vs oracle {all:?}"))?;
        compared += 1;
    }
    Ok(format!("{compared} fixtures match the full sort exactly ({ties} tied neighbours)"))
}

fn metric_arithmetic() -> Check {
    let check = |list: &[usize], expected: &str| -> Result<(), String> {
        let mean = mean_ranking(&ranked(list)).map_err(|e| e.to_string())?;
        let shown = format!("{mean:.2}");
        ensure(shown == expected, || format!("mean of {list:?} is {shown}, expected {expected}"))
    };
    check(&[3, 6, 1, 5, 1, 2, 2, 3, 1, 1, 1, 1], "2.25")?;
    check(&[1, 1, 1, 4, 1, 1, 1, 1, 1, 1, 1, 1], "1.25")?;
    check(&[11, 11, 2, 7, 2, 12, 10, 6, 4, 2, 11, 2], "6.67")?;
    Ok("2.25, 1.25 and 6.67 reproduced".into())
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_regionscope")
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let output = Command::new(binary())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!(
            "{args:?} exited with {:?}: {}",
            output.status.code(),
            String::from_utf8_lossy(&output.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("temp paths are UTF-8")
}

fn synthetic_end_to_end() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let targets = ["hair", "l_eye", "nose", "u_lip", "neck"];
    let mut elapsed = Duration::ZERO;
    for (i, target) in targets.iter().enumerate() {
        let data = root.path().join(format!("data-{target}"));
        let manifest = write_bundle(&data, &SyntheticSpec::new(*target, 50, 100 + i as u64))
            .map_err(|e| e.to_string())?;
        let out = root.path().join(format!("out-{target}"));
        let started = Instant::now();
        let stdout = run_cli(&["pipeline", "--manifest", path_str(&manifest), "--out", path_str(&out)])?;
        elapsed += started.elapsed();
        let first = stdout
            .lines()
            .nth(1)
            .and_then(|line| line.split_whitespace().nth(1))
            .unwrap_or("");
        ensure(first == *target, || format!("{target}: stdout ranks {first:?} first"))?;
        let ranking: serde_json::Value =
            serde_json::from_slice(&fs::read(out.join("ranking.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let top = &ranking["ranking"][0];
        ensure(top["name"] == *target && top["position"] == 1, || {
            format!("{target}: ranking.json top entry is {top}")
        })?;
    }
    ensure(elapsed < Duration::from_secs(10), || format!("pipelines took {elapsed:?}"))?;
    Ok(format!("{} regions ranked first over 50 samples, {elapsed:.2?}", targets.len()))
}

fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn determinism() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = write_bundle(&root.path().join("data"), &SyntheticSpec::new("mouth", 40, 7))
        .map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for workers in ["1", "4"] {
        let out = root.path().join(format!("out-{workers}"));
        run_cli(&[
            "pipeline",
            "--manifest",
            path_str(&manifest),
            "--out",
            path_str(&out),
            "--workers",
            workers,
        ])?;
        trees.push(read_tree(&out));
    }
    ensure(trees[0].len() > 5, || "bundle is missing artifacts".into())?;
    ensure(trees[0].keys().eq(trees[1].keys()), || "file sets differ".into())?;
    for (path, bytes) in &trees[0] {
        ensure(&trees[1][path] == bytes, || format!("{} differs", path.display()))?;
    }
    Ok(format!("{} files byte-identical for workers 1 and 4", trees[0].len()))
}

fn color_endpoints() -> Check {
    let scale = ColorScale::default();
    for (v, expected) in [(0.0, (0, 0, 255)), (1.0, (255, 0, 0)), (0.5, (0, 255, 0))] {
        let c = color_of(v, &scale).map_err(|e| e.to_string())?;
        ensure((c.r, c.g, c.b) == expected, || format!("color_of({v}) = {c:?}"))?;
    }

    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = write_bundle(&root.path().join("data"), &SyntheticSpec::new("skin", 20, 9))
        .map_err(|e| e.to_string())?;
    let out = root.path().join("out");
    let mut checked = 0;
    for norm in [Normalization::Relative, Normalization::Absolute] {
        let config = RunConfig {
            manifest: Some(manifest.clone()),
            out: Some(out.clone()),
            norm,
            ..RunConfig::default()
        };
        let bundle = run_pipeline(&config).map_err(|e| e.to_string())?;
        let svg = fs::read_to_string(out.join("heatmap.svg")).map_err(|e| e.to_string())?;
        let table = &bundle.summary.region_table;
        let rendered: Vec<u8> = table.foreground().map(|(l, _)| l).collect();
        let display = normalize_for_display(&bundle.summary, &rendered, norm).map_err(|e| e.to_string())?;
        let scale = ColorScale::with_normalization(norm);
        for (label, value) in display {
            let name = table.name(label).unwrap();
            let expected = match value {
                DisplayValue::Value(v) => color_of(v, &scale).map_err(|e| e.to_string())?.hex(),
                DisplayValue::NoData => "#cccccc".to_string(),
            };
            let needle = format!("data-region=\"{name}\" ");
            let line = svg
                .lines()
                .find(|l| l.contains(&needle))
                .ok_or_else(|| format!("no path for {name}"))?;
            ensure(line.contains(&format!("fill=\"{expected}\"")), || {
                format!("{name}: expected fill {expected} in {line}")
            })?;
            checked += 1;
        }
    }
    Ok(format!("endpoints exact; {checked} heatmap fills match color_of"))
}

fn interchange_round_trip() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = write_bundle(&root.path().join("data"), &SyntheticSpec::new("hair", 6, 4))
        .map_err(|e| e.to_string())?;
    let manifest = read_manifest(&path).map_err(|e| e.to_string())?;
    let copy = root.path().join("data/copy.json");
    write_manifest(&manifest, &copy).map_err(|e| e.to_string())?;
    let reread = read_manifest(&copy).map_err(|e| e.to_string())?;
    ensure(reread.samples == manifest.samples && reread.region_table == manifest.region_table, || {
        "manifest changed on round trip".into()
    })?;
    ensure(fs::read(&copy).ok() == fs::read(&path).ok(), || "manifest bytes differ".into())?;

    for record in &manifest.samples {
        let a = load_attribution(record, &manifest).map_err(|e| e.to_string())?;
        let m = load_mask(record, &manifest).map_err(|e| e.to_string())?;
        let a_path = root.path().join("rt.f32");
        let m_path = root.path().join("rt.lbl");
        write_attribution(&a_path, &a).map_err(|e| e.to_string())?;
        write_mask(&m_path, &m).map_err(|e| e.to_string())?;
        ensure(
            fs::read(&a_path).ok() == fs::read(manifest.resolve(&record.attribution_path)).ok()
                && fs::read(&m_path).ok() == fs::read(manifest.resolve(&record.mask_path)).ok(),
            || format!("{}: grid bytes differ", record.id),
        )?;
    }

    // one defect per sample of a clean 4x4 fixture
    let dir = root.path().join("broken");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let clean = (vec![0.5f32; 16], vec![1u8; 16]);
    let broken = write_fixture(&dir, 4, 4, &[clean.clone(), clean.clone(), clean]);
    let s = &broken.samples;
    fs::write(dir.join(&s[0].attribution_path), vec![0u8; 4 * 15]).unwrap();
    let mut labels = vec![1u8; 16];
    labels[5] = 200;
    fs::write(dir.join(&s[1].mask_path), &labels).unwrap();
    let mut floats = [0.5f32; 16];
    floats[3] = f32::NAN;
    fs::write(dir.join(&s[2].attribution_path), floats.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>()).unwrap();
    let truncated = load_attribution(&s[0], &broken);
    let out_of_range = load_mask(&s[1], &broken);
    let nan = load_attribution(&s[2], &broken);

    ensure(
        matches!(truncated, Err(Error::SizeMismatch { expected: 64, actual: 60, .. })),
        || format!("truncated .f32 gave {truncated:?}"),
    )?;
    ensure(
        matches!(out_of_range, Err(Error::LabelOutOfRange { label: 200, index: 5, .. })),
        || format!("label 200 gave {out_of_range:?}"),
    )?;
    ensure(matches!(nan, Err(Error::NonFiniteValue { index: 3, .. })), || {
        format!("NaN gave {nan:?}")
    })?;
    Ok(format!(
        "{} samples bit-exact; truncated/label/NaN give distinct errors",
        manifest.samples.len()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("IoR oracle equivalence", ior_oracle),
        ("divide-by-N_r contract", divide_by_presence),
        ("patch partition completeness", patch_partition),
        ("top-k brute-force equivalence", topk_brute_force),
        ("ranking metric arithmetic", metric_arithmetic),
        ("synthetic end-to-end bias detection", synthetic_end_to_end),
        ("pipeline determinism across workers", determinism),
        ("color endpoints and heatmap fills", color_endpoints),
        ("interchange round-trip and malformed inputs", interchange_round_trip),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
