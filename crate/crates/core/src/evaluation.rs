//! Bias-detection metrics over region rankings.
//!
//! The ranking position of an attribute is the best (lowest) 1-based rank
//! among the regions the attribute is tied to. Regions that never occur in
//! the test set produce [`Position::Unranked`], which is kept apart from
//! numeric positions.

use std::collections::BTreeSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::aggregation::{rank_regions, IoRSummary, RegionRanking};
use crate::error::{Error, Result};
use crate::interchange::RegionTable;

const TIE_TOLERANCE: f64 = 1e-12;

/// Attribute name → set of region labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeRegionMapping {
    entries: IndexMap<String, BTreeSet<u8>>,
}

impl AttributeRegionMapping {
    /// Builds a mapping from region names, checking them against `table`.
    pub fn from_names<A, R, I>(table: &RegionTable, entries: impl IntoIterator<Item = (A, I)>) -> Result<Self>
    where
        A: Into<String>,
        R: AsRef<str>,
        I: IntoIterator<Item = R>,
    {
        let mut out = IndexMap::new();
        for (attribute, regions) in entries {
            let attribute = attribute.into();
            let labels = regions
                .into_iter()
                .map(|r| table.require_label(r.as_ref()))
                .collect::<Result<BTreeSet<u8>>>()?;
            if labels.is_empty() {
                return Err(Error::InvalidExperiment(format!(
                    "attribute {attribute:?} maps to no region"
                )));
            }
            out.insert(attribute, labels);
        }
        Ok(Self { entries: out })
    }

    /// Accessory and facial attributes tied to CelebAMask-HQ regions.
    pub fn default_for(table: &RegionTable) -> Result<Self> {
        Self::from_names(
            table,
            [
                ("Blond_Hair", vec!["hair"]),
                ("Eyeglasses", vec!["eye_g"]),
                ("Smiling", vec!["mouth"]),
                ("Wearing_Earrings", vec!["ear_r"]),
                ("Wearing_Lipstick", vec!["u_lip", "l_lip"]),
                ("Wearing_Necklace", vec!["neck_l"]),
                ("Wearing_Hat", vec!["hat"]),
                ("Race", vec!["skin"]),
            ],
        )
    }

    pub fn regions(&self, attribute: &str) -> Result<&BTreeSet<u8>> {
        self.entries
            .get(attribute)
            .ok_or_else(|| Error::UnmappedAttribute(attribute.to_string()))
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `{"Attribute": ["region", ...], ...}`.
    pub fn from_json(text: &str, table: &RegionTable) -> Result<Self> {
        let raw: IndexMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| Error::Parse {
                what: "attribute mapping".into(),
                message: e.to_string(),
            })?;
        Self::from_names(table, raw)
    }
}

/// 1-based ranking position, or the unranked sentinel. `Ranked` always
/// orders before `Unranked`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Position {
    Ranked(usize),
    Unranked,
}

impl Position {
    pub fn rank(self) -> Option<usize> {
        match self {
            Position::Ranked(p) => Some(p),
            Position::Unranked => None,
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Ranked(p) => write!(f, "{p}"),
            Position::Unranked => f.write_str("unranked"),
        }
    }
}

impl Serialize for Position {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Position::Ranked(p) => serializer.serialize_u64(*p as u64),
            Position::Unranked => serializer.serialize_str("unranked"),
        }
    }
}

impl<'de> Deserialize<'de> for Position {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Rank(usize),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Rank(p) if p >= 1 => Ok(Position::Ranked(p)),
            Raw::Text(s) if s == "unranked" => Ok(Position::Unranked),
            _ => Err(serde::de::Error::custom(
                "expected a positive rank or \"unranked\"",
            )),
        }
    }
}

/// Position of the best-ranked region mapped to `attribute`.
pub fn ranking_position(
    ranking: &[u8],
    attribute: &str,
    mapping: &AttributeRegionMapping,
) -> Result<Position> {
    let regions = mapping.regions(attribute)?;
    Ok(ranking
        .iter()
        .position(|label| regions.contains(label))
        .map_or(Position::Unranked, |i| Position::Ranked(i + 1)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentSpec {
    pub target: String,
    pub biased_attributes: Vec<String>,
    pub mapping: AttributeRegionMapping,
}

impl ExperimentSpec {
    pub fn new(
        target: impl Into<String>,
        biased_attributes: Vec<String>,
        mapping: AttributeRegionMapping,
    ) -> Result<Self> {
        if biased_attributes.is_empty() || biased_attributes.len() > 2 {
            return Err(Error::InvalidExperiment(format!(
                "expected 1 or 2 biased attributes, got {}",
                biased_attributes.len()
            )));
        }
        for attribute in &biased_attributes {
            mapping.regions(attribute)?;
        }
        Ok(Self {
            target: target.into(),
            biased_attributes,
            mapping,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingResult {
    pub per_attribute: IndexMap<String, Position>,
    pub rp1: Position,
    pub rp2: Option<Position>,
    /// Some attribute's region shares its IoR with a neighbouring rank.
    pub tied: bool,
}

fn is_tied(ranking: &RegionRanking, position: Position) -> bool {
    let Some(p) = position.rank() else {
        return false;
    };
    let here = ranking.entries[p - 1].ior;
    let close = |i: usize| {
        ranking
            .entries
            .get(i)
            .is_some_and(|e| (e.ior - here).abs() <= TIE_TOLERANCE)
    };
    (p >= 2 && close(p - 2)) || close(p)
}

/// Ranks the summary's regions (background excluded) and reports where the
/// biased attributes' regions land.
pub fn evaluate_experiment(summary: &IoRSummary, spec: &ExperimentSpec) -> Result<RankingResult> {
    let ranking = rank_regions(summary, false)?;
    let labels = ranking.labels();
    let mut per_attribute = IndexMap::new();
    for attribute in &spec.biased_attributes {
        per_attribute.insert(
            attribute.clone(),
            ranking_position(&labels, attribute, &spec.mapping)?,
        );
    }
    let positions: Vec<Position> = per_attribute.values().copied().collect();
    let rp1 = *positions.iter().min().expect("at least one attribute");
    let rp2 = (positions.len() == 2).then(|| *positions.iter().max().expect("two attributes"));
    let tied = positions.iter().any(|&p| is_tied(&ranking, p));
    Ok(RankingResult {
        per_attribute,
        rp1,
        rp2,
        tied,
    })
}

/// Arithmetic mean of ranking positions.
pub fn mean_ranking(results: &[Position]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyRanking);
    }
    let mut total = 0usize;
    for (i, p) in results.iter().enumerate() {
        total += p.rank().ok_or(Error::UnrankedInMean(i))?;
    }
    Ok(total as f64 / results.len() as f64)
}

pub fn ranked(positions: &[usize]) -> Vec<Position> {
    positions.iter().map(|&p| Position::Ranked(p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub target: String,
    pub attributes: Vec<String>,
    pub rp: IndexMap<String, Position>,
    pub rp1: Position,
    pub rp2: Option<Position>,
    pub tied: bool,
}

/// Serialized evaluation output. Means are taken over ranked entries only;
/// `unranked` counts the experiments whose positions were left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub experiments: Vec<ExperimentReport>,
    pub mean_rp1: Option<f64>,
    pub mean_rp2: Option<f64>,
    pub unranked: usize,
}

impl EvaluationReport {
    pub fn new(results: &[(ExperimentSpec, RankingResult)]) -> Self {
        let experiments: Vec<ExperimentReport> = results
            .iter()
            .map(|(spec, result)| ExperimentReport {
                target: spec.target.clone(),
                attributes: spec.biased_attributes.clone(),
                rp: result.per_attribute.clone(),
                rp1: result.rp1,
                rp2: result.rp2,
                tied: result.tied,
            })
            .collect();
        let rp1: Vec<Position> = experiments.iter().map(|e| e.rp1).collect();
        let rp2: Vec<Position> = experiments.iter().filter_map(|e| e.rp2).collect();
        let unranked = experiments
            .iter()
            .filter(|e| e.rp.values().any(|p| *p == Position::Unranked))
            .count();
        let mean_of = |list: &[Position]| {
            let kept: Vec<Position> = list
                .iter()
                .copied()
                .filter(|p| *p != Position::Unranked)
                .collect();
            mean_ranking(&kept).ok()
        };
        Self {
            mean_rp1: mean_of(&rp1),
            mean_rp2: mean_of(&rp2),
            experiments,
            unranked,
        }
    }

    pub fn has_unranked(&self) -> bool {
        self.unranked > 0
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// Plain-text RP table with 2-decimal means.
    pub fn table(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:<40} {:>9} {:>9}", "target", "attributes", "RP1", "RP2");
        for e in &self.experiments {
            let rp2 = e.rp2.map_or("-".to_string(), |p| p.to_string());
            let _ = writeln!(
                out,
                "{:<12} {:<40} {:>9} {:>9}{}",
                e.target,
                e.attributes.join(" & "),
                e.rp1.to_string(),
                rp2,
                if e.tied { "  (tie)" } else { "" }
            );
        }
        let fmt = |m: Option<f64>| m.map_or("-".to_string(), crate::numfmt::two_decimals);
        let _ = writeln!(
            out,
            "{:<12} {:<40} {:>9} {:>9}",
            "mean",
            "",
            fmt(self.mean_rp1),
            fmt(self.mean_rp2)
        );
        out
    }
}
