//! Intersection over Region (IoR) and its set-level reduction.
//!
//! For one sample, the IoR of region `r` is the mean attribution over the
//! pixels labelled `r`. Over a sample set, the region score is the mean of
//! the per-sample IoR values taken only over samples where `r` is present,
//! so a region that appears in few samples is not diluted by its absences.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interchange::{
    load_attribution, load_mask, AttributionMap, Manifest, RegionLabelMap, RegionTable, BACKGROUND,
};
use crate::numfmt::round_sig9;
use crate::parallel::with_workers;

/// IoR values of one sample, keyed by region label. Only regions with at
/// least one labelled pixel appear.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleIoR {
    pub sample_id: String,
    pub values: BTreeMap<u8, f64>,
}

impl SampleIoR {
    pub fn is_present(&self, region: u8) -> bool {
        self.values.contains_key(&region)
    }

    pub fn present(&self) -> impl Iterator<Item = u8> + '_ {
        self.values.keys().copied()
    }

    pub fn get(&self, region: u8) -> Option<f64> {
        self.values.get(&region).copied()
    }
}

/// Per-region attribution sums and pixel counts, accumulated in `f64`.
pub(crate) fn region_sums(
    attribution: &AttributionMap,
    mask: &RegionLabelMap,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if attribution.dims() != mask.dims() {
        return Err(Error::DimensionMismatch {
            attribution: attribution.dims(),
            mask: mask.dims(),
        });
    }
    let mut sums = vec![0.0f64; 256];
    let mut counts = vec![0usize; 256];
    for (&g, &label) in attribution.values().iter().zip(mask.labels()) {
        sums[label as usize] += g as f64;
        counts[label as usize] += 1;
    }
    Ok((sums, counts))
}

pub fn sample_ior(
    sample_id: impl Into<String>,
    attribution: &AttributionMap,
    mask: &RegionLabelMap,
) -> Result<SampleIoR> {
    let (sums, counts) = region_sums(attribution, mask)?;
    let values = counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(label, &n)| (label as u8, sums[label] / n as f64))
        .collect();
    Ok(SampleIoR {
        sample_id: sample_id.into(),
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStat {
    /// `None` when the region never occurs (`count == 0`).
    pub ior_mean: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoRSummary {
    pub class_of_interest: String,
    pub sample_count: usize,
    pub region_table: RegionTable,
    /// One entry per label of `region_table`.
    pub per_region: BTreeMap<u8, RegionStat>,
    /// Identifies the manifest the summary was computed from, when known.
    pub manifest_hash: Option<String>,
}

impl IoRSummary {
    pub fn stat(&self, region: u8) -> Option<RegionStat> {
        self.per_region.get(&region).copied()
    }

    pub fn ior(&self, region: u8) -> Option<f64> {
        self.stat(region).and_then(|s| s.ior_mean)
    }

    /// Builds a summary from known means; regions not listed are absent.
    /// Intended for fixtures and for documents produced elsewhere.
    pub fn from_means(
        class_of_interest: impl Into<String>,
        region_table: RegionTable,
        sample_count: usize,
        means: impl IntoIterator<Item = (u8, f64, usize)>,
    ) -> Self {
        let mut per_region: BTreeMap<u8, RegionStat> = region_table
            .iter()
            .map(|(label, _)| {
                (
                    label,
                    RegionStat {
                        ior_mean: None,
                        count: 0,
                    },
                )
            })
            .collect();
        for (label, ior, count) in means {
            per_region.insert(
                label,
                RegionStat {
                    ior_mean: Some(ior),
                    count,
                },
            );
        }
        Self {
            class_of_interest: class_of_interest.into(),
            sample_count,
            region_table,
            per_region,
            manifest_hash: None,
        }
    }
}

/// Ordered reducer: sums per-region IoR in stream order into `f64`
/// accumulators and divides by the presence count.
#[derive(Debug, Clone)]
pub struct IoRAccumulator {
    sums: Vec<f64>,
    counts: Vec<usize>,
    samples: usize,
}

impl IoRAccumulator {
    pub fn new(table: &RegionTable) -> Self {
        Self {
            sums: vec![0.0; table.len()],
            counts: vec![0; table.len()],
            samples: 0,
        }
    }

    pub fn push(&mut self, sample: &SampleIoR) -> Result<()> {
        for (&label, &ior) in &sample.values {
            let slot = label as usize;
            if slot >= self.sums.len() {
                return Err(Error::UnknownRegion(format!("label {label}")));
            }
            self.sums[slot] += ior;
            self.counts[slot] += 1;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(self, class_of_interest: &str, table: &RegionTable) -> Result<IoRSummary> {
        if self.samples == 0 {
            return Err(Error::NoSamples);
        }
        let per_region = table
            .iter()
            .map(|(label, _)| {
                let slot = label as usize;
                let count = self.counts[slot];
                let ior_mean = (count > 0).then(|| self.sums[slot] / count as f64);
                (label, RegionStat { ior_mean, count })
            })
            .collect();
        Ok(IoRSummary {
            class_of_interest: class_of_interest.to_string(),
            sample_count: self.samples,
            region_table: table.clone(),
            per_region,
            manifest_hash: None,
        })
    }
}

/// Reduces a stream of per-sample IoR values into a summary.
pub fn aggregate<'a>(
    samples: impl IntoIterator<Item = &'a SampleIoR>,
    class_of_interest: &str,
    table: &RegionTable,
) -> Result<IoRSummary> {
    let mut acc = IoRAccumulator::new(table);
    for sample in samples {
        acc.push(sample)?;
    }
    acc.finish(class_of_interest, table)
}

/// Loads every sample of `manifest` on `workers` threads, computes per-sample
/// IoR in parallel and reduces them in manifest order. The result is
/// bit-identical for any worker count.
pub fn aggregate_ordered(
    manifest: &Manifest,
    class_of_interest: &str,
    workers: usize,
) -> Result<IoRSummary> {
    if manifest.samples.is_empty() {
        return Err(Error::NoSamples);
    }
    let per_sample: Vec<Result<SampleIoR>> = with_workers(workers, || {
        manifest
            .samples
            .par_iter()
            .map(|record| {
                let attribution = load_attribution(record, manifest)?;
                let mask = load_mask(record, manifest)?;
                sample_ior(record.id.clone(), &attribution, &mask)
            })
            .collect()
    })?;
    let per_sample: Vec<SampleIoR> = per_sample.into_iter().collect::<Result<_>>()?;
    let mut summary = aggregate(&per_sample, class_of_interest, &manifest.region_table)?;
    summary.manifest_hash = Some(manifest.content_hash());
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedRegion {
    pub label: u8,
    pub ior: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionRanking {
    /// Present regions, highest IoR first.
    pub entries: Vec<RankedRegion>,
    /// Considered regions that never occur.
    pub absent: Vec<u8>,
}

impl RegionRanking {
    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// 1-based position of `label`, if ranked.
    pub fn position(&self, label: u8) -> Option<usize> {
        self.entries.iter().position(|e| e.label == label).map(|i| i + 1)
    }
}

/// Orders present regions by mean IoR descending, ties by ascending label.
pub fn rank_regions(summary: &IoRSummary, include_background: bool) -> Result<RegionRanking> {
    let mut entries = Vec::new();
    let mut absent = Vec::new();
    for (&label, stat) in &summary.per_region {
        if label == BACKGROUND && !include_background {
            continue;
        }
        match stat.ior_mean {
            Some(ior) if stat.count > 0 => entries.push(RankedRegion {
                label,
                ior,
                count: stat.count,
            }),
            _ => absent.push(label),
        }
    }
    if entries.is_empty() {
        return Err(Error::NoRegionPresent);
    }
    entries.sort_by(|a, b| b.ior.total_cmp(&a.ior).then(a.label.cmp(&b.label)));
    Ok(RegionRanking { entries, absent })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRegion {
    pub id: u8,
    pub name: String,
    pub ior: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsentRegion {
    pub id: u8,
    pub name: String,
}

/// Serialized form of [`IoRSummary`]; IoR values carry 9 significant digits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDocument {
    pub class_of_interest: String,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
    pub regions: Vec<SummaryRegion>,
    pub absent_regions: Vec<AbsentRegion>,
}

impl SummaryDocument {
    pub fn from_summary(summary: &IoRSummary) -> Self {
        let mut regions = Vec::new();
        let mut absent_regions = Vec::new();
        for (label, name) in summary.region_table.iter() {
            match summary.stat(label) {
                Some(RegionStat {
                    ior_mean: Some(ior),
                    count,
                }) if count > 0 => regions.push(SummaryRegion {
                    id: label,
                    name: name.to_string(),
                    ior: round_sig9(ior),
                    count,
                }),
                _ => absent_regions.push(AbsentRegion {
                    id: label,
                    name: name.to_string(),
                }),
            }
        }
        Self {
            class_of_interest: summary.class_of_interest.clone(),
            sample_count: summary.sample_count,
            manifest_hash: summary.manifest_hash.clone(),
            regions,
            absent_regions,
        }
    }

    /// Rebuilds the summary; the region table is recovered from the union of
    /// present and absent regions, which must cover contiguous ids.
    pub fn into_summary(self) -> Result<IoRSummary> {
        let mut names: BTreeMap<u8, String> = BTreeMap::new();
        for r in &self.regions {
            names.insert(r.id, r.name.clone());
        }
        for r in &self.absent_regions {
            if names.insert(r.id, r.name.clone()).is_some() {
                return Err(Error::Parse {
                    what: "summary".into(),
                    message: format!("region id {} listed twice", r.id),
                });
            }
        }
        for (expected, &id) in names.keys().enumerate() {
            if id as usize != expected {
                return Err(Error::Parse {
                    what: "summary".into(),
                    message: format!("region ids are not contiguous at {expected}"),
                });
            }
        }
        let table = RegionTable::new(names.into_values())?;
        for r in &self.regions {
            if !(0.0..=1.0).contains(&r.ior) || r.count == 0 || r.count > self.sample_count {
                return Err(Error::Parse {
                    what: "summary".into(),
                    message: format!("region {:?} has an invalid ior or count", r.name),
                });
            }
        }
        let mut summary = IoRSummary::from_means(
            self.class_of_interest,
            table,
            self.sample_count,
            self.regions.iter().map(|r| (r.id, r.ior, r.count)),
        );
        summary.manifest_hash = self.manifest_hash;
        Ok(summary)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("summary serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "summary".into(),
            message: e.to_string(),
        })
    }
}
