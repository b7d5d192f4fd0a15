//! Prototype heatmaps and the static HTML report.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::aggregation::{IoRSummary, RegionRanking};
use crate::error::{Error, Result};
use crate::interchange::{RegionTable, BACKGROUND};
use crate::numfmt::sig9;
use crate::patches::TopKSet;

pub const DEFAULT_TEMPLATE_JSON: &str = include_str!("../assets/face_prototype.json");

const NO_DATA_FILL: &str = "#cccccc";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateShape {
    pub region: String,
    /// SVG path data.
    pub d: String,
}

/// Abstract face drawing: one closed path per foreground region, painted in
/// list order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTemplate {
    pub canvas: Canvas,
    pub legend_box: Rect,
    pub shapes: Vec<TemplateShape>,
}

impl PrototypeTemplate {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "prototype template".into(),
            message: e.to_string(),
        })
    }

    /// Checks that every foreground region of `table` has exactly one path and
    /// that no path names an unknown region or background.
    pub fn validate(&self, table: &RegionTable) -> Result<()> {
        let mut seen = HashSet::new();
        for shape in &self.shapes {
            if shape.region == "background" {
                return Err(Error::InvalidTemplate("background is never drawn".into()));
            }
            if table.label(&shape.region).is_none() {
                return Err(Error::InvalidTemplate(format!(
                    "path for unknown region {:?}",
                    shape.region
                )));
            }
            if !seen.insert(shape.region.as_str()) {
                return Err(Error::InvalidTemplate(format!(
                    "region {:?} has more than one path",
                    shape.region
                )));
            }
        }
        for (_, name) in table.foreground() {
            if !seen.contains(name) {
                return Err(Error::TemplateMissingRegion(name.to_string()));
            }
        }
        Ok(())
    }
}

impl Default for PrototypeTemplate {
    fn default() -> Self {
        Self::from_json(DEFAULT_TEMPLATE_JSON).expect("bundled template parses")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Min-max over the rendered, present regions.
    #[default]
    Relative,
    /// Raw IoR used as the display value.
    Absolute,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative" => Ok(Normalization::Relative),
            "absolute" => Ok(Normalization::Absolute),
            other => Err(Error::Config(format!(
                "normalization must be relative or absolute, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::Relative => "relative",
            Normalization::Absolute => "absolute",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Rgb {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Self { r, g, b }
    }

    pub fn hex(self) -> String {
        format!("#{:02x}{:02x}{:02x}", self.r, self.g, self.b)
    }

    pub fn from_hex(text: &str) -> Option<Self> {
        let digits = text.strip_prefix('#')?;
        if digits.len() != 6 {
            return None;
        }
        let byte = |i: usize| u8::from_str_radix(&digits[i..i + 2], 16).ok();
        Some(Self::new(byte(0)?, byte(2)?, byte(4)?))
    }
}

/// Hue sweep at full saturation and 50% lightness: blue at 0, red at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorScale {
    pub low_hue: f64,
    pub high_hue: f64,
    pub normalization: Normalization,
}

impl Default for ColorScale {
    fn default() -> Self {
        Self {
            low_hue: 240.0,
            high_hue: 0.0,
            normalization: Normalization::Relative,
        }
    }
}

impl ColorScale {
    pub fn with_normalization(normalization: Normalization) -> Self {
        Self {
            normalization,
            ..Self::default()
        }
    }

    pub fn low_color(&self) -> Rgb {
        hsl_to_rgb(self.low_hue, 1.0, 0.5)
    }

    pub fn high_color(&self) -> Rgb {
        hsl_to_rgb(self.high_hue, 1.0, 0.5)
    }
}

/// HSL to 8-bit RGB; channels rounded half away from zero.
pub fn hsl_to_rgb(hue: f64, saturation: f64, lightness: f64) -> Rgb {
    let hue = hue.rem_euclid(360.0);
    let chroma = (1.0 - (2.0 * lightness - 1.0).abs()) * saturation;
    let sector = hue / 60.0;
    let x = chroma * (1.0 - (sector % 2.0 - 1.0).abs());
    let (r, g, b) = match sector as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = lightness - chroma / 2.0;
    let channel = |v: f64| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    Rgb::new(channel(r), channel(g), channel(b))
}

pub fn color_of(v: f64, scale: &ColorScale) -> Result<Rgb> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::ColorOutOfRange(v));
    }
    let hue = scale.low_hue + v * (scale.high_hue - scale.low_hue);
    Ok(hsl_to_rgb(hue, 1.0, 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DisplayValue {
    Value(f64),
    NoData,
}

/// Display values in `[0, 1]` for `rendered` regions. Regions that never
/// occur map to [`DisplayValue::NoData`] and do not affect the range.
pub fn normalize_for_display(
    summary: &IoRSummary,
    rendered: &[u8],
    normalization: Normalization,
) -> Result<BTreeMap<u8, DisplayValue>> {
    let present: Vec<(u8, f64)> = rendered
        .iter()
        .filter_map(|&r| summary.ior(r).map(|v| (r, v)))
        .collect();
    if present.is_empty() {
        return Err(Error::NoRegionPresent);
    }
    let min = present.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max = present.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let mut out: BTreeMap<u8, DisplayValue> =
        rendered.iter().map(|&r| (r, DisplayValue::NoData)).collect();
    for (region, ior) in present {
        let v = match normalization {
            Normalization::Relative if max > min => (ior - min) / (max - min),
            Normalization::Relative => 0.5,
            Normalization::Absolute => ior.clamp(0.0, 1.0),
        };
        out.insert(region, DisplayValue::Value(v));
    }
    Ok(out)
}

pub fn xml_escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Renders the summary onto the prototype as an SVG document. Background is
/// never drawn.
pub fn render_heatmap(
    summary: &IoRSummary,
    template: &PrototypeTemplate,
    scale: &ColorScale,
) -> Result<String> {
    let table = &summary.region_table;
    template.validate(table)?;
    let rendered: Vec<u8> = table
        .foreground()
        .map(|(label, _)| label)
        .filter(|&l| l != BACKGROUND)
        .collect();
    let display = normalize_for_display(summary, &rendered, scale.normalization)?;
    let raw: Vec<f64> = rendered.iter().filter_map(|&r| summary.ior(r)).collect();
    let raw_min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let raw_max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let Canvas { width, height } = template.canvas;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" data-class="{class}" data-samples="{n}">"#,
        w = num(width),
        h = num(height),
        class = xml_escape(&summary.class_of_interest),
        n = summary.sample_count,
    );
    svg.push_str("<defs>\n");
    svg.push_str(
        r##"<pattern id="nodata-hatch" patternUnits="userSpaceOnUse" width="6" height="6" patternTransform="rotate(45)"><line x1="0" y1="0" x2="0" y2="6" stroke="#888888" stroke-width="1.5"/></pattern>"##,
    );
    svg.push('\n');
    svg.push_str(r#"<linearGradient id="legend-gradient" x1="0" y1="0" x2="1" y2="0">"#);
    for step in 0..=10 {
        let t = step as f64 / 10.0;
        let c = color_of(t, scale)?;
        let _ = write!(svg, r#"<stop offset="{}" stop-color="{}"/>"#, num(t), c.hex());
    }
    svg.push_str("</linearGradient>\n</defs>\n");
    let _ = writeln!(
        svg,
        r##"<rect x="0" y="0" width="{}" height="{}" fill="#ffffff"/>"##,
        num(width),
        num(height)
    );

    for shape in &template.shapes {
        let label = table.require_label(&shape.region)?;
        let name = xml_escape(&shape.region);
        let d = xml_escape(&shape.d);
        match display.get(&label).copied().unwrap_or(DisplayValue::NoData) {
            DisplayValue::Value(v) => {
                let stat = summary.stat(label).expect("present region has stats");
                let ior = sig9(stat.ior_mean.expect("present region has a mean"));
                let _ = writeln!(
                    svg,
                    r##"<path id="region-{name}" data-region="{name}" data-ior="{ior}" data-count="{count}" fill="{fill}" fill-rule="evenodd" stroke="#ffffff" stroke-width="0.75" d="{d}"><title>{name}: IoR {ior} (N={count})</title></path>"##,
                    count = stat.count,
                    fill = color_of(v, scale)?.hex(),
                );
            }
            DisplayValue::NoData => {
                let _ = writeln!(
                    svg,
                    r##"<path id="region-{name}" data-region="{name}" data-ior="none" data-count="0" fill="{NO_DATA_FILL}" fill-rule="evenodd" stroke="#ffffff" stroke-width="0.75" d="{d}"><title>{name}: no data</title></path>"##,
                );
                let _ = writeln!(
                    svg,
                    r#"<path class="nodata-hatch" fill="url(#nodata-hatch)" fill-rule="evenodd" pointer-events="none" d="{d}"/>"#,
                );
            }
        }
    }

    let lb = template.legend_box;
    let _ = writeln!(
        svg,
        r##"<rect class="legend" x="{}" y="{}" width="{}" height="{}" fill="url(#legend-gradient)" stroke="#444444" stroke-width="0.5"/>"##,
        num(lb.x),
        num(lb.y),
        num(lb.width),
        num(lb.height)
    );
    let (low_label, high_label) = match scale.normalization {
        Normalization::Relative => (sig9(raw_min), sig9(raw_max)),
        Normalization::Absolute => ("0".to_string(), "1".to_string()),
    };
    let text_y = num(lb.y + lb.height + 10.0);
    let _ = writeln!(
        svg,
        r#"<text class="legend-min" x="{}" y="{text_y}" font-size="8" font-family="sans-serif" data-ior="{}">{low_label}</text>"#,
        num(lb.x),
        sig9(raw_min),
    );
    let _ = writeln!(
        svg,
        r#"<text class="legend-max" x="{}" y="{text_y}" font-size="8" font-family="sans-serif" text-anchor="end" data-ior="{}">{high_label}</text>"#,
        num(lb.x + lb.width),
        sig9(raw_max),
    );
    let _ = writeln!(
        svg,
        r#"<text class="legend-title" x="{}" y="{}" font-size="8" font-family="sans-serif" text-anchor="middle">IoR ({}; raw {} to {})</text>"#,
        num(lb.x + lb.width / 2.0),
        num(lb.y - 3.0),
        scale.normalization,
        sig9(raw_min),
        sig9(raw_max),
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Everything the combined report embeds.
#[derive(Debug, Clone)]
pub struct ReportInputs<'a> {
    pub summary: &'a IoRSummary,
    pub ranking: &'a RegionRanking,
    pub topk: &'a [TopKSet],
    /// PNG bytes per region label, `None` when the region has no patches.
    pub mosaics: &'a BTreeMap<u8, Option<Vec<u8>>>,
    pub heatmap_svg: &'a str,
    /// Run configuration shown verbatim, in order.
    pub config: &'a [(String, String)],
}

/// Single self-contained HTML page; images are inlined as base64.
pub fn render_report(inputs: &ReportInputs<'_>) -> Result<String> {
    let summary = inputs.summary;
    let table = &summary.region_table;
    if let Some(expected) = &summary.manifest_hash {
        for set in inputs.topk {
            if let Some(found) = &set.manifest_hash {
                if found != expected {
                    return Err(Error::ManifestHashMismatch {
                        expected: expected.clone(),
                        found: found.clone(),
                        what: format!(
                            "patches for {}",
                            table.name(set.region).unwrap_or("?")
                        ),
                    });
                }
            }
        }
    }

    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    let _ = writeln!(
        html,
        "<title>Region attribution report: {}</title>",
        xml_escape(&summary.class_of_interest)
    );
    html.push_str(
        "<style>body{font-family:sans-serif;margin:2em;max-width:60em}table{border-collapse:collapse}\
td,th{border:1px solid #bbb;padding:2px 8px;text-align:left}td.num{text-align:right}\
.notice{color:#666;font-style:italic}img{image-rendering:pixelated}</style>\n</head>\n<body>\n",
    );
    let _ = writeln!(
        html,
        "<h1>Region attribution: {}</h1>\n<p>{} samples.</p>",
        xml_escape(&summary.class_of_interest),
        summary.sample_count
    );

    html.push_str("<section id=\"heatmap\">\n<h2>Prototype heatmap</h2>\n");
    html.push_str(inputs.heatmap_svg);
    html.push_str("</section>\n");

    html.push_str("<section id=\"ranking\">\n<h2>Region ranking</h2>\n<table>\n<tr><th>rank</th><th>region</th><th>IoR</th><th>N</th></tr>\n");
    for (i, entry) in inputs.ranking.entries.iter().enumerate() {
        let _ = writeln!(
            html,
            "<tr class=\"ranked\"><td class=\"num\">{}</td><td>{}</td><td class=\"num\">{}</td><td class=\"num\">{}</td></tr>",
            i + 1,
            xml_escape(table.name(entry.label).unwrap_or("?")),
            sig9(entry.ior),
            entry.count
        );
    }
    html.push_str("</table>\n");
    if !inputs.ranking.absent.is_empty() {
        let names: Vec<String> = inputs
            .ranking
            .absent
            .iter()
            .map(|&l| xml_escape(table.name(l).unwrap_or("?")))
            .collect();
        let _ = writeln!(
            html,
            "<p class=\"absent\">Absent from every sample: {}</p>",
            names.join(", ")
        );
    }
    html.push_str("</section>\n");

    html.push_str("<section id=\"patches\">\n<h2>High-impact patches</h2>\n");
    for set in inputs.topk {
        let name = xml_escape(table.name(set.region).unwrap_or("?"));
        let _ = writeln!(html, "<h3>{name}</h3>");
        match inputs.mosaics.get(&set.region).and_then(Option::as_ref) {
            Some(png) if !set.is_empty() => {
                let encoded = base64::engine::general_purpose::STANDARD.encode(png);
                let _ = writeln!(
                    html,
                    "<p>Top {} of k={} (patch size {}).</p>\n<img class=\"mosaic\" alt=\"{name} patches\" src=\"data:image/png;base64,{encoded}\">",
                    set.records.len(),
                    set.k,
                    set.patch_size
                );
            }
            _ => {
                html.push_str("<p class=\"notice\">no activated patches</p>\n");
            }
        }
    }
    html.push_str("</section>\n");

    html.push_str("<section id=\"config\">\n<h2>Run configuration</h2>\n<table>\n");
    if let Some(hash) = &summary.manifest_hash {
        let _ = writeln!(html, "<tr><th>manifest_hash</th><td>{hash}</td></tr>");
    }
    for (key, value) in inputs.config {
        let _ = writeln!(
            html,
            "<tr><th>{}</th><td>{}</td></tr>",
            xml_escape(key),
            xml_escape(value)
        );
    }
    html.push_str("</table>\n</section>\n</body>\n</html>\n");
    Ok(html)
}
