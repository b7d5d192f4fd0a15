//! End-to-end orchestration: validate, subset, aggregate, rank, mine
//! patches, render and write an audit bundle.
//!
//! Bundles are assembled in a temporary sibling directory and moved into
//! place only once every artifact has been written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_ordered, rank_regions, IoRSummary, RegionRanking, SummaryDocument};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_experiment, AttributeRegionMapping, EvaluationReport, ExperimentSpec};
use crate::interchange::{
    balance_subset, decode_attribution, decode_mask, read_manifest, Manifest, BACKGROUND,
};
use crate::numfmt::{round_sig9, sig9};
use crate::parallel::with_workers;
use crate::patches::{
    encode_png, mosaic_for, topk_regions, PatchGrid, PatchRecord, PatchReport, TopKOptions,
    TopKSet, DEFAULT_TOP_K,
};
use crate::rendering::{
    render_heatmap, render_report, ColorScale, Normalization, PrototypeTemplate, ReportInputs,
};

/// Options shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub class: String,
    /// Defaults to `height / 8`.
    pub patch_size: Option<usize>,
    pub top_k: usize,
    pub include_background: bool,
    pub norm: Normalization,
    pub mapping: Option<PathBuf>,
    pub seed: u64,
    pub workers: usize,
    pub per_sample_cap: Option<usize>,
    pub template: Option<PathBuf>,
    /// Balance on `(target, attribute)` before aggregating.
    pub balance_target: Option<String>,
    pub balance_attribute: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out: None,
            class: "positive".to_string(),
            patch_size: None,
            top_k: DEFAULT_TOP_K,
            include_background: false,
            norm: Normalization::Relative,
            mapping: None,
            seed: 0,
            workers: 1,
            per_sample_cap: None,
            template: None,
            balance_target: None,
            balance_attribute: None,
        }
    }
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        if self.patch_size == Some(0) {
            return Err(Error::Config("patch-size must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top-k must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.balance_target.is_some() != self.balance_attribute.is_some() {
            return Err(Error::Config(
                "balance-target and balance-attribute go together".into(),
            ));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Config("--manifest is required".into()))
    }

    pub fn out_path(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }

    pub fn patch_size_for(&self, manifest: &Manifest) -> usize {
        self.patch_size
            .unwrap_or_else(|| PatchGrid::default_patch_size(manifest.height, manifest.width))
    }

    pub fn template(&self) -> Result<PrototypeTemplate> {
        match &self.template {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                PrototypeTemplate::from_json(&text)
            }
            None => Ok(PrototypeTemplate::default()),
        }
    }

    pub fn mapping_for(&self, manifest_table: &crate::RegionTable) -> Result<AttributeRegionMapping> {
        match &self.mapping {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                AttributeRegionMapping::from_json(&text, manifest_table)
            }
            None => AttributeRegionMapping::default_for(manifest_table),
        }
    }

    /// Settings recorded in the bundle. The worker count and output path are
    /// left out because they never change the artifacts.
    pub fn recorded(&self, manifest: &Manifest) -> Vec<(String, String)> {
        let opt = |v: &Option<String>| v.clone().unwrap_or_else(|| "-".to_string());
        vec![
            (
                "manifest".into(),
                self.manifest
                    .as_ref()
                    .map_or("-".into(), |p| p.display().to_string()),
            ),
            ("class".into(), self.class.clone()),
            ("patch_size".into(), self.patch_size_for(manifest).to_string()),
            ("top_k".into(), self.top_k.to_string()),
            ("include_background".into(), self.include_background.to_string()),
            ("norm".into(), self.norm.to_string()),
            (
                "mapping".into(),
                self.mapping
                    .as_ref()
                    .map_or("default".into(), |p| p.display().to_string()),
            ),
            ("seed".into(), self.seed.to_string()),
            (
                "per_sample_cap".into(),
                self.per_sample_cap.map_or("-".into(), |c| c.to_string()),
            ),
            ("balance_target".into(), opt(&self.balance_target)),
            ("balance_attribute".into(), opt(&self.balance_attribute)),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    MissingFile,
    SizeMismatch,
    NonFinite,
    ValueOutOfRange,
    LabelOutOfRange,
    MissingImage,
    ImageDimensionMismatch,
    Unreadable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub sample_id: String,
    pub kind: FindingKind,
    pub message: String,
}

fn finding_for(sample_id: &str, error: &Error) -> Finding {
    let kind = match error {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            FindingKind::MissingFile
        }
        Error::SizeMismatch { .. } => FindingKind::SizeMismatch,
        Error::NonFiniteValue { .. } => FindingKind::NonFinite,
        Error::ValueOutOfRange { .. } => FindingKind::ValueOutOfRange,
        Error::LabelOutOfRange { .. } => FindingKind::LabelOutOfRange,
        Error::MissingImage { .. } => FindingKind::MissingImage,
        Error::ImageDimensionMismatch { .. } => FindingKind::ImageDimensionMismatch,
        _ => FindingKind::Unreadable,
    };
    Finding {
        sample_id: sample_id.to_string(),
        kind,
        message: error.to_string(),
    }
}

fn check_sample(manifest: &Manifest, index: usize) -> Vec<Finding> {
    let record = &manifest.samples[index];
    let mut findings = Vec::new();
    let mut note = |result: Result<()>| {
        if let Err(e) = result {
            findings.push(finding_for(&record.id, &e));
        }
    };

    note((|| {
        let path = manifest.resolve(&record.attribution_path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        decode_attribution(&bytes, manifest.height, manifest.width, &path).map(drop)
    })());
    note((|| {
        let path = manifest.resolve(&record.mask_path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        decode_mask(
            &bytes,
            manifest.height,
            manifest.width,
            &manifest.region_table,
            &path,
        )
        .map(drop)
    })());
    note((|| {
        let path = manifest.resolve(&record.image_path);
        if !path.is_file() {
            return Err(Error::MissingImage {
                sample_id: record.id.clone(),
                path,
            });
        }
        let (w, h) = image::image_dimensions(&path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        if (h as usize, w as usize) != (manifest.height, manifest.width) {
            return Err(Error::ImageDimensionMismatch {
                sample_id: record.id.clone(),
                expected: (manifest.height, manifest.width),
                actual: (h as usize, w as usize),
            });
        }
        Ok(())
    })());
    findings
}

/// Checks every sample's files. Findings come back in manifest order.
pub fn validate_manifest(manifest: &Manifest, workers: usize) -> Result<Vec<Finding>> {
    let per_sample: Vec<Vec<Finding>> = with_workers(workers, || {
        (0..manifest.samples.len())
            .into_par_iter()
            .map(|i| check_sample(manifest, i))
            .collect()
    })?;
    Ok(per_sample.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub position: usize,
    pub id: u8,
    pub name: String,
    pub ior: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingDocument {
    pub class_of_interest: String,
    pub include_background: bool,
    pub ranking: Vec<RankedEntry>,
    pub absent: Vec<String>,
}

impl RankingDocument {
    pub fn new(summary: &IoRSummary, ranking: &RegionRanking, include_background: bool) -> Self {
        let name = |l: u8| summary.region_table.name(l).unwrap_or("?").to_string();
        Self {
            class_of_interest: summary.class_of_interest.clone(),
            include_background,
            ranking: ranking
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| RankedEntry {
                    position: i + 1,
                    id: e.label,
                    name: name(e.label),
                    ior: round_sig9(e.ior),
                    count: e.count,
                })
                .collect(),
            absent: ranking.absent.iter().map(|&l| name(l)).collect(),
        }
    }
}

/// Plain-text ranking table for terminals.
pub fn ranking_table(summary: &IoRSummary, ranking: &RegionRanking) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>4}  {:<10} {:>12} {:>8}", "rank", "region", "IoR", "N");
    for (i, e) in ranking.entries.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:>4}  {:<10} {:>12} {:>8}",
            i + 1,
            summary.region_table.name(e.label).unwrap_or("?"),
            sig9(e.ior),
            e.count
        );
    }
    if !ranking.absent.is_empty() {
        let names: Vec<&str> = ranking
            .absent
            .iter()
            .map(|&l| summary.region_table.name(l).unwrap_or("?"))
            .collect();
        let _ = writeln!(out, "absent: {}", names.join(", "));
    }
    out
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("document serializes");
    text.push('\n');
    text
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads the manifest named by `config`, applying the optional balancing step.
pub fn prepare_manifest(config: &RunConfig) -> Result<Manifest> {
    let manifest = read_manifest(config.manifest_path()?)?;
    match (&config.balance_target, &config.balance_attribute) {
        (Some(target), Some(attribute)) => balance_subset(&manifest, target, attribute, config.seed),
        _ => Ok(manifest),
    }
}

/// Every artifact of one pipeline run, keyed by bundle-relative path.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub files: BTreeMap<PathBuf, Vec<u8>>,
    pub summary: IoRSummary,
    pub ranking: RegionRanking,
    pub topk: Vec<TopKSet>,
}

impl Bundle {
    pub fn ranking_table(&self) -> String {
        ranking_table(&self.summary, &self.ranking)
    }

    pub fn empty_regions(&self) -> Vec<&str> {
        self.topk
            .iter()
            .filter(|s| s.is_empty())
            .map(|s| self.summary.region_table.name(s.region).unwrap_or("?"))
            .collect()
    }
}

/// Runs every stage in memory. Nothing is written to disk.
pub fn build_bundle(manifest: &Manifest, config: &RunConfig) -> Result<Bundle> {
    config.check()?;
    if manifest.samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let findings = validate_manifest(manifest, config.workers)?;
    if !findings.is_empty() {
        return Err(Error::ValidationFailed(findings.len()));
    }
    let table = &manifest.region_table;
    let template = config.template()?;
    template.validate(table)?;

    let summary = aggregate_ordered(manifest, &config.class, config.workers)?;
    let ranking = rank_regions(&summary, config.include_background)?;

    let regions: Vec<u8> = table
        .iter()
        .map(|(l, _)| l)
        .filter(|&l| l != BACKGROUND || config.include_background)
        .collect();
    let options = TopKOptions {
        patch_size: config.patch_size_for(manifest),
        k: config.top_k,
        per_sample_cap: config.per_sample_cap,
        workers: config.workers,
    };
    let topk = topk_regions(manifest, &regions, &options)?;

    let mut files: BTreeMap<PathBuf, Vec<u8>> = BTreeMap::new();
    let mut mosaics = BTreeMap::new();
    for set in &topk {
        let name = table.name(set.region).unwrap_or("?");
        let report = PatchReport::from_set(set, table);
        files.insert(
            PathBuf::from(format!("patches/{name}.json")),
            report.to_json().into_bytes(),
        );
        let png = match mosaic_for(set, manifest)? {
            Some(image) => {
                let png = encode_png(&image)?;
                files.insert(PathBuf::from(format!("mosaics/{name}.png")), png.clone());
                Some(png)
            }
            None => None,
        };
        mosaics.insert(set.region, png);
    }

    let scale = ColorScale::with_normalization(config.norm);
    let heatmap = render_heatmap(&summary, &template, &scale)?;
    let run: BTreeMap<String, String> = config.recorded(manifest).into_iter().collect();
    let recorded: Vec<(String, String)> = run.clone().into_iter().collect();
    let report = render_report(&ReportInputs {
        summary: &summary,
        ranking: &ranking,
        topk: &topk,
        mosaics: &mosaics,
        heatmap_svg: &heatmap,
        config: &recorded,
    })?;

    files.insert(
        "summary.json".into(),
        SummaryDocument::from_summary(&summary).to_json().into_bytes(),
    );
    files.insert(
        "ranking.json".into(),
        to_json(&RankingDocument::new(&summary, &ranking, config.include_background)).into_bytes(),
    );
    files.insert("run.json".into(), to_json(&run).into_bytes());
    files.insert("heatmap.svg".into(), heatmap.into_bytes());
    files.insert("report.html".into(), report.into_bytes());

    Ok(Bundle {
        files,
        summary,
        ranking,
        topk,
    })
}

const BUNDLE_MARKERS: [&str; 2] = ["summary.json", "report.html"];

fn is_replaceable(out: &Path) -> Result<bool> {
    if !out.exists() {
        return Ok(true);
    }
    if !out.is_dir() {
        return Ok(false);
    }
    let mut entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
    if entries.next().is_none() {
        return Ok(true);
    }
    Ok(BUNDLE_MARKERS.iter().all(|m| out.join(m).is_file()))
}

/// Writes `files` into a temporary sibling of `out` and swaps it into place.
/// An existing `out` is replaced only if it is empty or a previous bundle.
pub fn write_bundle_atomically(out: &Path, files: &BTreeMap<PathBuf, Vec<u8>>) -> Result<()> {
    if !is_replaceable(out)? {
        return Err(Error::Config(format!(
            "{} exists and is not an output bundle; refusing to replace it",
            out.display()
        )));
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".regionscope-staging-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    for (relative, bytes) in files {
        write_file(&staging.path().join(relative), bytes)?;
    }
    if out.exists() {
        let retired = tempfile::Builder::new()
            .prefix(".regionscope-retired-")
            .tempdir_in(&parent)
            .map_err(|e| Error::io(&parent, e))?;
        let target = retired.path().join("old");
        fs::rename(out, &target).map_err(|e| Error::io(out, e))?;
        fs::rename(staging.path(), out).map_err(|e| Error::io(out, e))?;
        drop(retired);
    } else {
        fs::rename(staging.path(), out).map_err(|e| Error::io(out, e))?;
    }
    // staging was renamed away; forget it so drop does not touch `out`
    let _ = staging.keep();
    Ok(())
}

/// Full run: builds the bundle and writes it to `config.out`.
pub fn run_pipeline(config: &RunConfig) -> Result<Bundle> {
    let out = config.out_path()?.to_path_buf();
    let manifest = prepare_manifest(config)?;
    let bundle = build_bundle(&manifest, config)?;
    write_bundle_atomically(&out, &bundle.files)?;
    Ok(bundle)
}

/// One experiment of an experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentEntry {
    pub target: String,
    pub biased_attributes: Vec<String>,
    /// Summary document for this experiment; defaults to the command's summary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExperimentDocument {
    Many { experiments: Vec<ExperimentEntry> },
    One(ExperimentEntry),
}

impl ExperimentDocument {
    pub fn entries(self) -> Vec<ExperimentEntry> {
        match self {
            ExperimentDocument::Many { experiments } => experiments,
            ExperimentDocument::One(entry) => vec![entry],
        }
    }
}

pub fn read_summary(path: &Path) -> Result<IoRSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SummaryDocument::from_json(&text)?.into_summary()
}

/// Evaluates every experiment of the document at `spec_path`.
pub fn run_rank(
    summary_path: Option<&Path>,
    spec_path: &Path,
    mapping_path: Option<&Path>,
) -> Result<EvaluationReport> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let doc: ExperimentDocument = serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: "experiment document".into(),
        message: e.to_string(),
    })?;
    let spec_dir = spec_path.parent().unwrap_or(Path::new(""));
    let mut results = Vec::new();
    for entry in doc.entries() {
        let path = match (&entry.summary, summary_path) {
            (Some(p), _) if p.is_absolute() => p.clone(),
            (Some(p), _) => spec_dir.join(p),
            (None, Some(p)) => p.to_path_buf(),
            (None, None) => {
                return Err(Error::Config(format!(
                    "experiment {:?} names no summary and --summary was not given",
                    entry.target
                )))
            }
        };
        let summary = read_summary(&path)?;
        let mapping = match mapping_path {
            Some(mp) => {
                let text = fs::read_to_string(mp).map_err(|e| Error::io(mp, e))?;
                AttributeRegionMapping::from_json(&text, &summary.region_table)?
            }
            None => AttributeRegionMapping::default_for(&summary.region_table)?,
        };
        let spec = ExperimentSpec::new(entry.target, entry.biased_attributes, mapping)?;
        let result = evaluate_experiment(&summary, &spec)?;
        results.push((spec, result));
    }
    Ok(EvaluationReport::new(&results))
}

/// Rebuilds `report.html` from the artifacts of an existing bundle directory.
pub fn rebuild_report(bundle_dir: &Path) -> Result<String> {
    let summary = read_summary(&bundle_dir.join("summary.json"))?;
    let run_path = bundle_dir.join("run.json");
    let run_text = fs::read_to_string(&run_path).map_err(|e| Error::io(&run_path, e))?;
    let run: BTreeMap<String, String> = serde_json::from_str(&run_text).map_err(|e| Error::Parse {
        what: "run.json".into(),
        message: e.to_string(),
    })?;
    let include_background = run.get("include_background").is_some_and(|v| v == "true");
    let ranking = rank_regions(&summary, include_background)?;
    let heatmap_path = bundle_dir.join("heatmap.svg");
    let heatmap = fs::read_to_string(&heatmap_path).map_err(|e| Error::io(&heatmap_path, e))?;

    let table = &summary.region_table;
    let mut topk = Vec::new();
    let mut mosaics = BTreeMap::new();
    for (label, name) in table.iter() {
        let path = bundle_dir.join(format!("patches/{name}.json"));
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report = PatchReport::from_json(&text)?;
        let set = TopKSet {
            region: label,
            k: report.k,
            patch_size: report.patch_size,
            manifest_hash: report.manifest_hash,
            records: report
                .patches
                .into_iter()
                .enumerate()
                .map(|(i, p)| PatchRecord {
                    sample_id: p.sample_id,
                    sample_position: i,
                    patch_index: p.patch_index,
                    region: label,
                    score: p.score,
                    bbox: p.bbox,
                })
                .collect(),
        };
        let png_path = bundle_dir.join(format!("mosaics/{name}.png"));
        let png = if png_path.is_file() {
            Some(fs::read(&png_path).map_err(|e| Error::io(&png_path, e))?)
        } else {
            None
        };
        mosaics.insert(label, png);
        topk.push(set);
    }
    let config: Vec<(String, String)> = run.into_iter().collect();
    render_report(&ReportInputs {
        summary: &summary,
        ranking: &ranking,
        topk: &topk,
        mosaics: &mosaics,
        heatmap_svg: &heatmap,
        config: &config,
    })
}
