//! Deterministic synthetic face bundles.
//!
//! Generates label maps from a simple geometric face layout, attribution
//! maps with the mass concentrated in one chosen region, and matching RGB
//! images. Used by tests, benchmarks and demos; no model is involved.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::interchange::{
    write_attribution, write_manifest, write_mask, AttributionMap, Manifest, RegionLabelMap,
    RegionTable, SampleRecord,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Image side length in pixels (square images).
    pub size: usize,
    pub samples: usize,
    /// Region that receives high attribution.
    pub hot_region: String,
    pub seed: u64,
    /// Attribution range inside the hot region.
    pub hot_range: (f32, f32),
    /// Attribution range elsewhere.
    pub cold_range: (f32, f32),
}

impl SyntheticSpec {
    pub fn new(hot_region: impl Into<String>, samples: usize, seed: u64) -> Self {
        Self {
            size: 64,
            samples,
            hot_region: hot_region.into(),
            seed,
            hot_range: (0.7, 1.0),
            cold_range: (0.0, 0.3),
        }
    }
}

/// Optional regions drawn on a face.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Accessories {
    pub hat: bool,
    pub eyeglasses: bool,
    pub earrings: bool,
    pub necklace: bool,
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

/// Label map of a face centred at `(0.5 + dx, 0.5 + dy)` in unit coordinates.
pub fn face_labels(
    size: usize,
    shift: (f64, f64),
    accessories: Accessories,
    table: &RegionTable,
) -> Result<Vec<u8>> {
    let l = |name: &str| table.require_label(name);
    let (skin, hair, neck, cloth) = (l("skin")?, l("hair")?, l("neck")?, l("cloth")?);
    let (l_brow, r_brow, l_eye, r_eye) = (l("l_brow")?, l("r_brow")?, l("l_eye")?, l("r_eye")?);
    let (l_ear, r_ear, nose, mouth) = (l("l_ear")?, l("r_ear")?, l("nose")?, l("mouth")?);
    let (u_lip, l_lip) = (l("u_lip")?, l("l_lip")?);
    let (hat, eye_g, ear_r, neck_l) = (l("hat")?, l("eye_g")?, l("ear_r")?, l("neck_l")?);

    let mut labels = vec![0u8; size * size];
    for row in 0..size {
        for col in 0..size {
            let x = (col as f64 + 0.5) / size as f64 - shift.0;
            let y = (row as f64 + 0.5) / size as f64 - shift.1;
            let mut label = 0u8;
            if y > 0.86 {
                label = cloth;
            }
            if (0.40..0.60).contains(&x) && (0.70..0.86).contains(&y) {
                label = neck;
                if accessories.necklace && (0.80..0.84).contains(&y) {
                    label = neck_l;
                }
            }
            if in_ellipse(x, y, 0.5, 0.40, 0.42, 0.36) && y < 0.62 {
                label = hair;
            }
            if in_ellipse(x, y, 0.15, 0.50, 0.06, 0.09) {
                label = r_ear;
            }
            if in_ellipse(x, y, 0.85, 0.50, 0.06, 0.09) {
                label = l_ear;
            }
            if accessories.earrings
                && (in_ellipse(x, y, 0.15, 0.62, 0.035, 0.035)
                    || in_ellipse(x, y, 0.85, 0.62, 0.035, 0.035))
            {
                label = ear_r;
            }
            if in_ellipse(x, y, 0.5, 0.48, 0.32, 0.31) {
                label = skin;
            }
            if (0.33..0.37).contains(&y) {
                if (0.28..0.44).contains(&x) {
                    label = r_brow;
                } else if (0.56..0.72).contains(&x) {
                    label = l_brow;
                }
            }
            if in_ellipse(x, y, 0.36, 0.43, 0.07, 0.04) {
                label = r_eye;
            }
            if in_ellipse(x, y, 0.64, 0.43, 0.07, 0.04) {
                label = l_eye;
            }
            if accessories.eyeglasses {
                let ring = |cx: f64| {
                    let d = ((x - cx).powi(2) + (y - 0.43).powi(2)).sqrt();
                    (0.09..0.12).contains(&d)
                };
                let bridge = (0.46..0.54).contains(&x) && (0.41..0.44).contains(&y);
                if ring(0.36) || ring(0.64) || bridge {
                    label = eye_g;
                }
            }
            if (0.45..0.55).contains(&x) && (0.46..0.60).contains(&y) {
                label = nose;
            }
            if (0.38..0.62).contains(&x) {
                if (0.63..0.66).contains(&y) {
                    label = u_lip;
                } else if (0.66..0.69).contains(&y) {
                    label = mouth;
                } else if (0.69..0.73).contains(&y) {
                    label = l_lip;
                }
            }
            if accessories.hat && y < 0.20 && (0.10..0.90).contains(&x) && y > 0.02 {
                label = hat;
            }
            labels[row * size + col] = label;
        }
    }
    Ok(labels)
}

fn base_color(label: u8) -> [u8; 3] {
    // fixed palette, one entry per default label
    const PALETTE: [[u8; 3]; 19] = [
        [30, 30, 40],
        [224, 172, 140],
        [90, 60, 40],
        [90, 60, 40],
        [250, 250, 250],
        [250, 250, 250],
        [20, 20, 20],
        [214, 160, 130],
        [214, 160, 130],
        [230, 200, 60],
        [210, 150, 120],
        [120, 20, 30],
        [190, 60, 70],
        [200, 70, 80],
        [205, 150, 120],
        [220, 220, 230],
        [40, 70, 140],
        [230, 200, 110],
        [60, 40, 90],
    ];
    PALETTE[label as usize % PALETTE.len()]
}

/// Writes a bundle under `dir` and returns the manifest path.
///
/// Files go to `dir/samples/<id>.{png,f32,lbl}`; the manifest is
/// `dir/manifest.json` with relative paths.
pub fn write_bundle(dir: &Path, spec: &SyntheticSpec) -> Result<PathBuf> {
    let table = RegionTable::default();
    let hot = table.require_label(&spec.hot_region)?;
    if spec.size < 16 {
        return Err(Error::Config("synthetic faces need at least 16 pixels".into()));
    }
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut manifest = Manifest::new(spec.size, spec.size, table.clone())?.with_base_dir(dir);
    let n = spec.size;
    let force = |name: &str| spec.hot_region == name;

    for i in 0..spec.samples {
        let id = format!("s{i:04}");
        let accessories = Accessories {
            hat: force("hat") || rng.random_bool(0.3),
            eyeglasses: force("eye_g") || rng.random_bool(0.3),
            earrings: force("ear_r") || rng.random_bool(0.3),
            necklace: force("neck_l") || rng.random_bool(0.3),
        };
        let shift = (
            rng.random_range(-2i32..=2) as f64 / n as f64,
            rng.random_range(-2i32..=2) as f64 / n as f64,
        );
        let labels = face_labels(n, shift, accessories, &table)?;
        let values: Vec<f32> = labels
            .iter()
            .map(|&l| {
                let (lo, hi) = if l == hot { spec.hot_range } else { spec.cold_range };
                lo + (hi - lo) * rng.random::<f32>()
            })
            .collect();
        let mut image = RgbImage::new(n as u32, n as u32);
        for (idx, &l) in labels.iter().enumerate() {
            let base = base_color(l);
            let jitter: i16 = rng.random_range(-8..=8);
            let px = base.map(|c| (c as i16 + jitter).clamp(0, 255) as u8);
            image.put_pixel((idx % n) as u32, (idx / n) as u32, Rgb(px));
        }

        let record = SampleRecord {
            id: id.clone(),
            image_path: PathBuf::from(format!("samples/{id}.png")),
            attribution_path: PathBuf::from(format!("samples/{id}.f32")),
            mask_path: PathBuf::from(format!("samples/{id}.lbl")),
            attributes: [
                ("Male", rng.random_bool(0.5)),
                ("Smiling", rng.random_bool(0.5)),
                ("Wearing_Hat", accessories.hat),
                ("Eyeglasses", accessories.eyeglasses),
                ("Wearing_Earrings", accessories.earrings),
                ("Wearing_Necklace", accessories.necklace),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v as u8))
            .collect(),
            label: None,
            prediction: None,
        };
        let attribution = AttributionMap::new(n, n, values)?;
        let mask = RegionLabelMap::new(n, n, labels, &table)?;
        write_attribution(manifest.resolve(&record.attribution_path), &attribution)?;
        write_mask(manifest.resolve(&record.mask_path), &mask)?;
        let image_path = manifest.resolve(&record.image_path);
        image
            .save(&image_path)
            .map_err(|e| Error::Image(format!("{}: {e}", image_path.display())))?;
        manifest.samples.push(record);
    }

    let path = dir.join("manifest.json");
    write_manifest(&manifest, &path)?;
    Ok(path)
}
