//! On-disk data model shared with the model-side extractor.
//!
//! A bundle consists of a JSON manifest plus two raw grids per sample:
//!
//! * `.f32` attribution grids: little-endian IEEE-754 binary32, row-major,
//!   exactly `H * W * 4` bytes, every value in `[0, 1]`.
//! * `.lbl` region label grids: one unsigned byte per pixel, row-major,
//!   exactly `H * W` bytes, every label a valid index into the region table.
//!
//! Grids carry no header; dimensions come from the manifest. Relative paths
//! inside the manifest are resolved against the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// CelebAMask-HQ region names, indexed by label id.
pub const DEFAULT_REGION_NAMES: [&str; 19] = [
    "background",
    "skin",
    "l_brow",
    "r_brow",
    "l_eye",
    "r_eye",
    "eye_g",
    "l_ear",
    "r_ear",
    "ear_r",
    "nose",
    "mouth",
    "u_lip",
    "l_lip",
    "neck",
    "neck_l",
    "cloth",
    "hair",
    "hat",
];

pub const BACKGROUND: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RegionEntry {
    id: u32,
    name: String,
}

/// Ordered mapping from label id to region name.
///
/// Ids are contiguous from 0 and label 0 is always `background`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RegionEntry>", into = "Vec<RegionEntry>")]
pub struct RegionTable {
    names: Vec<String>,
}

impl RegionTable {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidRegionTable("table is empty".into()));
        }
        if names.len() > 256 {
            return Err(Error::InvalidRegionTable(format!(
                "{} entries do not fit 8-bit labels",
                names.len()
            )));
        }
        if names[0] != "background" {
            return Err(Error::InvalidRegionTable(format!(
                "label 0 must be \"background\", found {:?}",
                names[0]
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::InvalidRegionTable("empty region name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidRegionTable(format!(
                    "duplicate region name {name:?}"
                )));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, label: u8) -> Option<&str> {
        self.names.get(label as usize).map(String::as_str)
    }

    pub fn label(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    pub fn require_label(&self, name: &str) -> Result<u8> {
        self.label(name)
            .ok_or_else(|| Error::UnknownRegion(name.to_string()))
    }

    pub fn contains(&self, label: u8) -> bool {
        (label as usize) < self.names.len()
    }

    /// `(label, name)` pairs in id order.
    pub fn iter(&self) -> impl Iterator<Item = (u8, &str)> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (i as u8, n.as_str()))
    }

    /// Every label except background.
    pub fn foreground(&self) -> impl Iterator<Item = (u8, &str)> {
        self.iter().skip(1)
    }
}

impl Default for RegionTable {
    fn default() -> Self {
        Self {
            names: DEFAULT_REGION_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TryFrom<Vec<RegionEntry>> for RegionTable {
    type Error = Error;

    fn try_from(entries: Vec<RegionEntry>) -> Result<Self> {
        for (position, entry) in entries.iter().enumerate() {
            if entry.id as usize != position {
                return Err(Error::InvalidRegionTable(format!(
                    "ids must be contiguous from 0; entry {position} has id {}",
                    entry.id
                )));
            }
        }
        RegionTable::new(entries.into_iter().map(|e| e.name))
    }
}

impl From<RegionTable> for Vec<RegionEntry> {
    fn from(table: RegionTable) -> Self {
        table
            .names
            .into_iter()
            .enumerate()
            .map(|(id, name)| RegionEntry {
                id: id as u32,
                name,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub attribution_path: PathBuf,
    pub mask_path: PathBuf,
    #[serde(default)]
    pub attributes: IndexMap<String, u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<i64>,
}

impl SampleRecord {
    /// Record whose three files are named `<id>.png`, `<id>.f32` and `<id>.lbl`.
    pub fn with_default_paths(id: impl Into<String>) -> Self {
        let id = id.into();
        Self {
            image_path: PathBuf::from(format!("{id}.png")),
            attribution_path: PathBuf::from(format!("{id}.f32")),
            mask_path: PathBuf::from(format!("{id}.lbl")),
            id,
            attributes: IndexMap::new(),
            label: None,
            prediction: None,
        }
    }

    pub fn attribute(&self, name: &str) -> Option<u8> {
        self.attributes.get(name).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub region_table: RegionTable,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(height: usize, width: usize, region_table: RegionTable) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions { height, width });
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            height,
            width,
            region_table,
            samples: Vec::new(),
            base_dir: PathBuf::new(),
        })
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Resolves a manifest-relative path.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn position_of(&self, sample_id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == sample_id)
    }

    /// Checks every structural invariant of the document.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(self.format_version));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidDimensions {
                height: self.height,
                width: self.width,
            });
        }
        let mut ids = HashSet::with_capacity(self.samples.len());
        for (position, sample) in self.samples.iter().enumerate() {
            if sample.id.is_empty() {
                return Err(Error::EmptySampleId(position));
            }
            if !ids.insert(sample.id.as_str()) {
                return Err(Error::DuplicateSampleId(sample.id.clone()));
            }
            if let Some((name, value)) = sample.attributes.iter().find(|(_, v)| **v > 1) {
                return Err(Error::Parse {
                    what: "manifest".into(),
                    message: format!(
                        "sample {:?}: attribute {name:?} has non-binary value {value}",
                        sample.id
                    ),
                });
            }
        }
        Ok(())
    }

    /// Canonical JSON text of the document.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }

    /// Hex SHA-256 over the compact document; identifies the sample set in reports.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "manifest".into(),
            message: e.to_string(),
        })?;
        if let Some(version) = value.get("format_version").and_then(|v| v.as_u64()) {
            if version != FORMAT_VERSION as u64 {
                return Err(Error::UnsupportedVersion(version.min(u32::MAX as u64) as u32));
            }
        }
        let manifest: Manifest = serde_json::from_value(value).map_err(|e| Error::Parse {
            what: "manifest".into(),
            message: e.to_string(),
        })?;
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest::from_json(&text)?.with_base_dir(base))
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate()?;
    fs::write(path, manifest.to_json()).map_err(|e| Error::io(path, e))
}

/// Dense `H x W` attribution grid, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl AttributionMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::SizeMismatch {
                path: PathBuf::from("<memory>"),
                expected: (height * width) as u64,
                actual: values.len() as u64,
            });
        }
        validate_attribution(&values, Path::new("<memory>"))?;
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

fn validate_attribution(values: &[f32], path: &Path) -> Result<()> {
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFiniteValue {
                path: path.to_path_buf(),
                index,
            });
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::ValueOutOfRange {
                path: path.to_path_buf(),
                index,
                value,
            });
        }
    }
    Ok(())
}

/// Decodes a raw `.f32` grid. `path` is only used in error messages.
pub fn decode_attribution(
    bytes: &[u8],
    height: usize,
    width: usize,
    path: &Path,
) -> Result<AttributionMap> {
    let expected = (height * width * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    validate_attribution(&values, path)?;
    Ok(AttributionMap {
        height,
        width,
        values,
    })
}

pub fn load_attribution(record: &SampleRecord, manifest: &Manifest) -> Result<AttributionMap> {
    let path = manifest.resolve(&record.attribution_path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_attribution(&bytes, manifest.height, manifest.width, &path)
}

pub fn write_attribution(path: impl AsRef<Path>, map: &AttributionMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, map.to_le_bytes()).map_err(|e| Error::io(path, e))
}

/// Dense `H x W` region label grid. Each pixel belongs to exactly one region,
/// so the binary region masks are disjoint and cover the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl RegionLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, table: &RegionTable) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::SizeMismatch {
                path: PathBuf::from("<memory>"),
                expected: (height * width) as u64,
                actual: labels.len() as u64,
            });
        }
        validate_labels(&labels, table, Path::new("<memory>"))?;
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Binary mask of one region, row-major.
    pub fn mask(&self, region: u8) -> impl Iterator<Item = bool> + '_ {
        self.labels.iter().map(move |&l| l == region)
    }

    /// Pixel count per label, indexed by label id.
    pub fn region_pixel_counts(&self, table_size: usize) -> Vec<usize> {
        let mut counts = vec![0usize; table_size.max(1)];
        for &label in &self.labels {
            if let Some(c) = counts.get_mut(label as usize) {
                *c += 1;
            }
        }
        counts
    }
}

fn validate_labels(labels: &[u8], table: &RegionTable, path: &Path) -> Result<()> {
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| !table.contains(l)) {
        return Err(Error::LabelOutOfRange {
            path: path.to_path_buf(),
            index,
            label,
            table_size: table.len(),
        });
    }
    Ok(())
}

/// Decodes a raw `.lbl` grid. `path` is only used in error messages.
pub fn decode_mask(
    bytes: &[u8],
    height: usize,
    width: usize,
    table: &RegionTable,
    path: &Path,
) -> Result<RegionLabelMap> {
    let expected = (height * width) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    validate_labels(bytes, table, path)?;
    Ok(RegionLabelMap {
        height,
        width,
        labels: bytes.to_vec(),
    })
}

pub fn load_mask(record: &SampleRecord, manifest: &Manifest) -> Result<RegionLabelMap> {
    let path = manifest.resolve(&record.mask_path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_mask(
        &bytes,
        manifest.height,
        manifest.width,
        &manifest.region_table,
        &path,
    )
}

pub fn write_mask(path: impl AsRef<Path>, map: &RegionLabelMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, &map.labels).map_err(|e| Error::io(path, e))
}

/// Counter-based draw key for a sample: depends only on `(seed, id)`.
fn draw_key(seed: u64, id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(id.as_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Keeps `n` samples from each `(target, attribute)` cell, `n` being the size
/// of the smallest cell. Selection order inside a cell follows a keyed hash of
/// `(seed, sample id)`, so the result does not depend on iteration order.
/// Surviving samples keep their original relative order.
pub fn balance_subset(
    manifest: &Manifest,
    target: &str,
    attribute: &str,
    seed: u64,
) -> Result<Manifest> {
    let mut cells: HashMap<(u8, u8), Vec<usize>> = HashMap::new();
    for (position, sample) in manifest.samples.iter().enumerate() {
        let value_of = |name: &str| {
            sample
                .attribute(name)
                .ok_or_else(|| Error::MissingAttribute {
                    sample_id: sample.id.clone(),
                    attribute: name.to_string(),
                })
        };
        let key = (value_of(target)?, value_of(attribute)?);
        cells.entry(key).or_default().push(position);
    }

    for t in 0..=1u8 {
        for a in 0..=1u8 {
            if cells.get(&(t, a)).is_none_or(Vec::is_empty) {
                return Err(Error::EmptyCell {
                    target: target.to_string(),
                    target_value: t,
                    attribute: attribute.to_string(),
                    attribute_value: a,
                });
            }
        }
    }

    let n = cells.values().map(Vec::len).min().unwrap_or(0);
    let mut keep = vec![false; manifest.samples.len()];
    for positions in cells.values() {
        let mut keyed: Vec<(u64, &str, usize)> = positions
            .iter()
            .map(|&p| {
                let id = manifest.samples[p].id.as_str();
                (draw_key(seed, id), id, p)
            })
            .collect();
        keyed.sort_unstable();
        for &(_, _, p) in keyed.iter().take(n) {
            keep[p] = true;
        }
    }

    let mut out = manifest.clone();
    out.samples = manifest
        .samples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(out)
}
