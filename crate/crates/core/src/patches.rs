//! High-impact patch mining.
//!
//! Each image is tiled into `Z x Z` patches. A patch's score for region `r`
//! is the attribution mass inside the patch restricted to pixels labelled
//! `r`. The global top-k over every `(sample, patch)` pair is kept in a
//! bounded structure whose merge is associative and commutative, so any
//! parallel split yields the same selection.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::{
    load_attribution, load_mask, AttributionMap, Manifest, RegionLabelMap, RegionTable,
};
use crate::numfmt::round_sig9;
use crate::parallel::with_workers;

pub const DEFAULT_TOP_K: usize = 20;
pub const MOSAIC_PER_ROW: usize = 10;
pub const MOSAIC_SEPARATOR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    patch_size: usize,
    rows: usize,
    cols: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0
            || height == 0
            || width == 0
            || !height.is_multiple_of(patch_size)
            || !width.is_multiple_of(patch_size)
        {
            return Err(Error::InvalidPatchSize {
                patch_size,
                height,
                width,
            });
        }
        Ok(Self {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
        })
    }

    /// Patch size giving an 8 x 8 grid, when the image allows it.
    pub fn default_patch_size(height: usize, width: usize) -> usize {
        (height / 8).max(1).min(width.max(1))
    }

    pub fn for_manifest(manifest: &Manifest, patch_size: usize) -> Result<Self> {
        Self::new(manifest.height, manifest.width, patch_size)
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_at(&self, row: usize, col: usize) -> usize {
        (row / self.patch_size) * self.cols + col / self.patch_size
    }

    pub fn bbox(&self, patch_index: usize) -> Bbox {
        Bbox {
            row: (patch_index / self.cols) * self.patch_size,
            col: (patch_index % self.cols) * self.patch_size,
            height: self.patch_size,
            width: self.patch_size,
        }
    }
}

/// Pixel rectangle `(row_off, col_off, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Bbox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl From<[usize; 4]> for Bbox {
    fn from([row, col, height, width]: [usize; 4]) -> Self {
        Self {
            row,
            col,
            height,
            width,
        }
    }
}

impl From<Bbox> for [usize; 4] {
    fn from(b: Bbox) -> Self {
        [b.row, b.col, b.height, b.width]
    }
}

fn check_dims(attribution: &AttributionMap, mask: &RegionLabelMap, grid: &PatchGrid) -> Result<()> {
    if attribution.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            attribution: attribution.dims(),
            mask: mask.dims(),
        });
    }
    let (h, w) = attribution.dims();
    if grid.rows * grid.patch_size != h || grid.cols * grid.patch_size != w {
        return Err(Error::InvalidPatchSize {
            patch_size: grid.patch_size,
            height: h,
            width: w,
        });
    }
    Ok(())
}

/// Scores of every patch for one region, indexed by patch index. Patches
/// without pixels of the region score 0.
pub fn score_patches(
    attribution: &AttributionMap,
    mask: &RegionLabelMap,
    grid: &PatchGrid,
    region: u8,
    table: &RegionTable,
) -> Result<Vec<f64>> {
    if !table.contains(region) {
        return Err(Error::UnknownRegion(format!("label {region}")));
    }
    check_dims(attribution, mask, grid)?;
    let width = attribution.width();
    let mut scores = vec![0.0f64; grid.patch_count()];
    for (i, (&g, &label)) in attribution.values().iter().zip(mask.labels()).enumerate() {
        if label == region {
            scores[grid.patch_at(i / width, i % width)] += g as f64;
        }
    }
    Ok(scores)
}

/// Scores of every patch for every label in one pass; `result[label][patch]`.
pub fn score_all_regions(
    attribution: &AttributionMap,
    mask: &RegionLabelMap,
    grid: &PatchGrid,
    table: &RegionTable,
) -> Result<Vec<Vec<f64>>> {
    check_dims(attribution, mask, grid)?;
    let width = attribution.width();
    let mut scores = vec![vec![0.0f64; grid.patch_count()]; table.len()];
    for (i, (&g, &label)) in attribution.values().iter().zip(mask.labels()).enumerate() {
        scores[label as usize][grid.patch_at(i / width, i % width)] += g as f64;
    }
    Ok(scores)
}

/// A scored `(sample, patch)` pair. Ordered so that "greater" means
/// "ranks earlier": higher score, then earlier manifest position, then
/// lower patch index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub score: f64,
    pub sample_position: usize,
    pub patch_index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.sample_position.cmp(&self.sample_position))
            .then_with(|| other.patch_index.cmp(&self.patch_index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded best-k structure. Zero scores are never admitted.
#[derive(Debug, Clone)]
pub struct BestK {
    k: usize,
    heap: BinaryHeap<Reverse<Candidate>>,
}

impl BestK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn offer(&mut self, candidate: Candidate) {
        // zero (and NaN) scores never enter
        if self.k == 0 || candidate.score.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(Reverse(candidate));
        } else if let Some(Reverse(worst)) = self.heap.peek() {
            if candidate > *worst {
                self.heap.pop();
                self.heap.push(Reverse(candidate));
            }
        }
    }

    pub fn merge(mut self, other: BestK) -> BestK {
        for Reverse(c) in other.heap {
            self.offer(c);
        }
        self
    }

    /// Candidates in rank order.
    pub fn into_sorted(self) -> Vec<Candidate> {
        // ascending on Reverse is descending on Candidate
        self.heap.into_sorted_vec().into_iter().map(|r| r.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub sample_id: String,
    pub sample_position: usize,
    pub patch_index: usize,
    pub region: u8,
    pub score: f64,
    pub bbox: Bbox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKSet {
    pub region: u8,
    pub k: usize,
    pub patch_size: usize,
    pub records: Vec<PatchRecord>,
    pub manifest_hash: Option<String>,
}

impl TopKSet {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopKOptions {
    pub patch_size: usize,
    pub k: usize,
    /// Keep at most this many patches per sample.
    pub per_sample_cap: Option<usize>,
    pub workers: usize,
}

impl TopKOptions {
    pub fn new(patch_size: usize, k: usize) -> Self {
        Self {
            patch_size,
            k,
            per_sample_cap: None,
            workers: 1,
        }
    }
}

fn offer_sample(best: &mut BestK, scores: &[f64], position: usize, cap: Option<usize>) {
    let candidates = scores.iter().enumerate().map(|(patch_index, &score)| Candidate {
        score,
        sample_position: position,
        patch_index,
    });
    match cap {
        Some(cap) => {
            let mut local = BestK::new(cap.min(best.k));
            candidates.for_each(|c| local.offer(c));
            for c in local.into_sorted() {
                best.offer(c);
            }
        }
        None => candidates.for_each(|c| best.offer(c)),
    }
}

/// Global top-k patches for several regions, loading each sample once.
pub fn topk_regions(
    manifest: &Manifest,
    regions: &[u8],
    options: &TopKOptions,
) -> Result<Vec<TopKSet>> {
    if options.k == 0 {
        return Err(Error::InvalidK);
    }
    let table = &manifest.region_table;
    if let Some(&bad) = regions.iter().find(|&&r| !table.contains(r)) {
        return Err(Error::UnknownRegion(format!("label {bad}")));
    }
    let grid = PatchGrid::for_manifest(manifest, options.patch_size)?;
    let empty = || vec![BestK::new(options.k); regions.len()];

    let merged = with_workers(options.workers, || {
        manifest
            .samples
            .par_iter()
            .enumerate()
            .try_fold(empty, |mut acc, (position, record)| {
                let attribution = load_attribution(record, manifest)?;
                let mask = load_mask(record, manifest)?;
                let scores = score_all_regions(&attribution, &mask, &grid, table)?;
                for (best, &region) in acc.iter_mut().zip(regions) {
                    offer_sample(best, &scores[region as usize], position, options.per_sample_cap);
                }
                Ok::<_, Error>(acc)
            })
            .try_reduce(empty, |a, b| {
                Ok(a.into_iter().zip(b).map(|(x, y)| x.merge(y)).collect())
            })
    })??;

    let hash = manifest.content_hash();
    Ok(merged
        .into_iter()
        .zip(regions)
        .map(|(best, &region)| TopKSet {
            region,
            k: options.k,
            patch_size: options.patch_size,
            records: best
                .into_sorted()
                .into_iter()
                .map(|c| PatchRecord {
                    sample_id: manifest.samples[c.sample_position].id.clone(),
                    sample_position: c.sample_position,
                    patch_index: c.patch_index,
                    region,
                    score: c.score,
                    bbox: grid.bbox(c.patch_index),
                })
                .collect(),
            manifest_hash: Some(hash.clone()),
        })
        .collect())
}

/// Global top-k patches of one region. An empty result means no patch of
/// any sample carries attribution inside the region.
pub fn topk_patches(manifest: &Manifest, region: u8, options: &TopKOptions) -> Result<TopKSet> {
    Ok(topk_regions(manifest, &[region], options)?
        .pop()
        .expect("one set per region"))
}

fn load_source_image(sample_id: &str, manifest: &Manifest) -> Result<RgbImage> {
    let record = manifest
        .samples
        .iter()
        .find(|s| s.id == sample_id)
        .ok_or_else(|| Error::Config(format!("sample {sample_id:?} is not in the manifest")))?;
    let path = manifest.resolve(&record.image_path);
    if !path.is_file() {
        return Err(Error::MissingImage {
            sample_id: sample_id.to_string(),
            path,
        });
    }
    let image = image::open(&path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let actual = (image.height() as usize, image.width() as usize);
    if actual != (manifest.height, manifest.width) {
        return Err(Error::ImageDimensionMismatch {
            sample_id: sample_id.to_string(),
            expected: (manifest.height, manifest.width),
            actual,
        });
    }
    Ok(image)
}

/// Crops a patch from its source image without resampling.
pub fn extract_patch_pixels(record: &PatchRecord, manifest: &Manifest) -> Result<RgbImage> {
    let image = load_source_image(&record.sample_id, manifest)?;
    let b = record.bbox;
    if b.row + b.height > manifest.height || b.col + b.width > manifest.width {
        return Err(Error::Config(format!(
            "patch bbox {:?} lies outside the image",
            <[usize; 4]>::from(b)
        )));
    }
    Ok(image::imageops::crop_imm(
        &image,
        b.col as u32,
        b.row as u32,
        b.width as u32,
        b.height as u32,
    )
    .to_image())
}

/// Lays equally sized patches out in rank order, ten per row, separated by
/// 2-pixel black lines. Returns `None` for an empty list.
pub fn build_mosaic(patches: &[RgbImage]) -> Option<RgbImage> {
    let first = patches.first()?;
    let (pw, ph) = (first.width() as usize, first.height() as usize);
    let cols = patches.len().min(MOSAIC_PER_ROW);
    let rows = patches.len().div_ceil(MOSAIC_PER_ROW);
    let width = cols * pw + (cols - 1) * MOSAIC_SEPARATOR;
    let height = rows * ph + (rows - 1) * MOSAIC_SEPARATOR;
    let mut mosaic = RgbImage::from_pixel(width as u32, height as u32, Rgb([0, 0, 0]));
    for (i, patch) in patches.iter().enumerate() {
        let x = (i % MOSAIC_PER_ROW) * (pw + MOSAIC_SEPARATOR);
        let y = (i / MOSAIC_PER_ROW) * (ph + MOSAIC_SEPARATOR);
        image::imageops::replace(&mut mosaic, patch, x as i64, y as i64);
    }
    Some(mosaic)
}

/// Extracts every patch of a set and tiles them into a mosaic.
pub fn mosaic_for(set: &TopKSet, manifest: &Manifest) -> Result<Option<RgbImage>> {
    let patches = set
        .records
        .iter()
        .map(|r| extract_patch_pixels(r, manifest))
        .collect::<Result<Vec<_>>>()?;
    Ok(build_mosaic(&patches))
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Cursor::new(Vec::new());
    image
        .write_to(&mut bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(bytes.into_inner())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub sample_id: String,
    pub patch_index: usize,
    pub score: f64,
    pub bbox: Bbox,
}

/// Serialized form of a [`TopKSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchReport {
    pub region: String,
    pub k: usize,
    #[serde(rename = "Z")]
    pub patch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
    pub patches: Vec<PatchEntry>,
}

impl PatchReport {
    pub fn from_set(set: &TopKSet, table: &RegionTable) -> Self {
        Self {
            region: table.name(set.region).unwrap_or("?").to_string(),
            k: set.k,
            patch_size: set.patch_size,
            manifest_hash: set.manifest_hash.clone(),
            patches: set
                .records
                .iter()
                .map(|r| PatchEntry {
                    sample_id: r.sample_id.clone(),
                    patch_index: r.patch_index,
                    score: round_sig9(r.score),
                    bbox: r.bbox,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("patch report serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "patch report".into(),
            message: e.to_string(),
        })
    }
}
