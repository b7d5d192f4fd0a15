//! `regionscope` command-line interface.
//!
//! Exit status: 0 success, 1 validation failure (or an unranked attribute in
//! `rank`), 2 usage error or unreadable manifest, 3 internal error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use regionscope_core::aggregation::{aggregate_ordered, SummaryDocument};
use regionscope_core::interchange::{balance_subset, read_manifest, write_manifest, Manifest, BACKGROUND};
use regionscope_core::patches::{encode_png, mosaic_for, topk_regions, PatchReport, TopKOptions};
use regionscope_core::pipeline::{
    rebuild_report, read_summary, run_pipeline, run_rank, validate_manifest, Finding, RunConfig,
};
use regionscope_core::rendering::{render_heatmap, ColorScale, Normalization};
use regionscope_core::synthetic::{write_bundle, SyntheticSpec};
use regionscope_core::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "regionscope", version, about = "Region-level attribution audits for face classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check every sample's files; prints findings as JSON.
    Validate(RunArgs),
    /// Write a balanced subset manifest to --out.
    Subset(SubsetArgs),
    /// Write the per-region IoR summary to --out (or stdout).
    Aggregate(RunArgs),
    /// Mine top-k patches and mosaics into the --out directory.
    Patches(PatchArgs),
    /// Evaluate ranking positions for an experiment document.
    Rank(RankArgs),
    /// Render the prototype heatmap for a summary.
    Render(RenderArgs),
    /// Regenerate report.html inside an existing bundle.
    Report(ReportArgs),
    /// Run every stage and write an audit bundle to --out.
    Pipeline(RunArgs),
    /// Generate a synthetic face manifest with attribution mass in one region.
    Synth(SynthArgs),
}

/// Flags mirroring `RunConfig`; anything given here overrides --config.
#[derive(Debug, Args, Default)]
struct RunArgs {
    /// TOML file with `RunConfig` fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    class: Option<String>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    include_background: bool,
    #[arg(long)]
    norm: Option<Normalization>,
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    per_sample_cap: Option<usize>,
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long)]
    balance_target: Option<String>,
    #[arg(long)]
    balance_attribute: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
                toml::from_str(&text)
                    .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { config.$field = v.clone().into(); })*
            };
        }
        take!(manifest, out, patch_size, mapping, per_sample_cap, template, balance_target, balance_attribute);
        if let Some(class) = &self.class {
            config.class = class.clone();
        }
        if let Some(k) = self.top_k {
            config.top_k = k;
        }
        if let Some(norm) = self.norm {
            config.norm = norm;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(workers) = self.workers {
            config.workers = workers;
        }
        config.include_background |= self.include_background;
        config.check().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct SubsetArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Path of the subset manifest to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    target: String,
    #[arg(long)]
    attribute: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PatchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Region name; repeat for several. Defaults to every region.
    #[arg(long = "region")]
    regions: Vec<String>,
}

#[derive(Debug, Args)]
struct RankArgs {
    /// Summary used by experiments that do not name their own.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Experiment document: `{"target", "biased_attributes"}` or `{"experiments": [...]}`.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Also write the evaluation document here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    summary: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = Normalization::Relative)]
    norm: Normalization,
    #[arg(long)]
    template: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Bundle directory produced by `pipeline`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Directory that receives `manifest.json` and `samples/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    hot_region: String,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Error carrying the exit status it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: anyhow::anyhow!(message.into()),
        }
    }
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Config(_)
        | Error::UnknownRegion(_)
        | Error::UnmappedAttribute(_)
        | Error::InvalidExperiment(_)
        | Error::InvalidK
        | Error::InvalidPatchSize { .. } => EXIT_USAGE,
        Error::ValidationFailed(_)
        | Error::NoSamples
        | Error::NoRegionPresent
        | Error::SizeMismatch { .. }
        | Error::NonFiniteValue { .. }
        | Error::ValueOutOfRange { .. }
        | Error::LabelOutOfRange { .. }
        | Error::DimensionMismatch { .. }
        | Error::MissingAttribute { .. }
        | Error::EmptyCell { .. }
        | Error::MissingImage { .. }
        | Error::ImageDimensionMismatch { .. }
        | Error::ManifestHashMismatch { .. } => EXIT_VALIDATION,
        _ => EXIT_INTERNAL,
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Self {
            code: exit_code_for(&error),
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error
            .downcast_ref::<Error>()
            .map_or(EXIT_INTERNAL, exit_code_for);
        Self { code, error }
    }
}

type Outcome = std::result::Result<u8, Failure>;

/// Reading the manifest is the one step whose failure is always a usage error.
fn load_manifest(path: Option<&Path>) -> Result<Manifest, Failure> {
    let path = path.ok_or_else(|| Failure::usage("--manifest is required"))?;
    read_manifest(path).map_err(|e| Failure {
        code: EXIT_USAGE,
        error: anyhow::Error::new(e).context("cannot read manifest"),
    })
}

fn write_output(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct ValidationReport<'a> {
    manifest: &'a Path,
    samples: usize,
    findings: Vec<Finding>,
}

fn cmd_validate(args: &RunArgs) -> Outcome {
    let config = args.resolve()?;
    let path = config.manifest_path().map_err(Failure::from)?;
    let manifest = load_manifest(Some(path))?;
    let findings = validate_manifest(&manifest, config.workers)?;
    let clean = findings.is_empty();
    let report = ValidationReport {
        manifest: path,
        samples: manifest.samples.len(),
        findings,
    };
    println!("{}", serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?);
    Ok(if clean { 0 } else { EXIT_VALIDATION })
}

fn cmd_subset(args: &SubsetArgs) -> Outcome {
    let manifest = load_manifest(Some(&args.manifest))?;
    let mut subset = balance_subset(&manifest, &args.target, &args.attribute, args.seed)?;
    // keep the sample paths valid from the subset manifest's own directory
    let out_dir = args.out.parent().filter(|p| !p.as_os_str().is_empty());
    let same_dir = match out_dir {
        Some(dir) => dir.canonicalize().ok() == manifest.base_dir().canonicalize().ok(),
        None => manifest.base_dir().as_os_str().is_empty(),
    };
    if !same_dir {
        for record in &mut subset.samples {
            for path in [&mut record.image_path, &mut record.attribution_path, &mut record.mask_path] {
                let resolved = manifest.resolve(path);
                *path = std::path::absolute(&resolved).unwrap_or(resolved);
            }
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_manifest(&subset, &args.out)?;
    eprintln!(
        "kept {} of {} samples",
        subset.samples.len(),
        manifest.samples.len()
    );
    Ok(0)
}

fn cmd_aggregate(args: &RunArgs) -> Outcome {
    let config = args.resolve()?;
    let manifest = load_manifest(config.manifest.as_deref())?;
    let summary = aggregate_ordered(&manifest, &config.class, config.workers)?;
    let json = SummaryDocument::from_summary(&summary).to_json();
    match &config.out {
        Some(out) => write_output(out, json)?,
        None => print!("{json}"),
    }
    Ok(0)
}

fn cmd_patches(args: &PatchArgs) -> Outcome {
    let config = args.run.resolve()?;
    let out = config.out_path().map_err(Failure::from)?.to_path_buf();
    let manifest = load_manifest(config.manifest.as_deref())?;
    let table = &manifest.region_table;
    let regions: Vec<u8> = if args.regions.is_empty() {
        table
            .iter()
            .map(|(l, _)| l)
            .filter(|&l| l != BACKGROUND || config.include_background)
            .collect()
    } else {
        args.regions
            .iter()
            .map(|name| table.label(name).ok_or_else(|| Error::UnknownRegion(name.clone())))
            .collect::<std::result::Result<_, _>>()?
    };
    let options = TopKOptions {
        patch_size: config.patch_size_for(&manifest),
        k: config.top_k,
        per_sample_cap: config.per_sample_cap,
        workers: config.workers,
    };
    for set in topk_regions(&manifest, &regions, &options)? {
        let name = table.name(set.region).unwrap_or("?");
        write_output(
            &out.join(format!("patches/{name}.json")),
            PatchReport::from_set(&set, table).to_json(),
        )?;
        match mosaic_for(&set, &manifest)? {
            Some(image) => write_output(&out.join(format!("mosaics/{name}.png")), encode_png(&image)?)?,
            None => eprintln!("{name}: no activated patches"),
        }
    }
    Ok(0)
}

fn cmd_rank(args: &RankArgs) -> Outcome {
    let report = run_rank(args.summary.as_deref(), &args.spec, args.mapping.as_deref())?;
    if let Some(out) = &args.out {
        write_output(out, report.to_json())?;
    }
    print!("{}", report.table());
    if report.has_unranked() {
        eprintln!("warning: some attributes map only to regions absent from the summary");
        return Ok(EXIT_VALIDATION);
    }
    Ok(0)
}

fn cmd_render(args: &RenderArgs) -> Outcome {
    let summary = read_summary(&args.summary)?;
    let config = RunConfig {
        template: args.template.clone(),
        ..RunConfig::default()
    };
    let template = config.template()?;
    template.validate(&summary.region_table)?;
    let svg = render_heatmap(&summary, &template, &ColorScale::with_normalization(args.norm))?;
    write_output(&args.out, svg)?;
    Ok(0)
}

fn cmd_report(args: &ReportArgs) -> Outcome {
    let html = rebuild_report(&args.out)?;
    write_output(&args.out.join("report.html"), html)?;
    Ok(0)
}

fn cmd_pipeline(args: &RunArgs) -> Outcome {
    let config = args.resolve()?;
    config.out_path().map_err(Failure::from)?;
    // surface an unreadable manifest as a usage error before running stages
    load_manifest(config.manifest.as_deref())?;
    let bundle = run_pipeline(&config)?;
    print!("{}", bundle.ranking_table());
    for name in bundle.empty_regions() {
        eprintln!("{name}: no activated patches");
    }
    Ok(0)
}

fn cmd_synth(args: &SynthArgs) -> Outcome {
    let spec = SyntheticSpec {
        size: args.size,
        ..SyntheticSpec::new(&args.hot_region, args.samples, args.seed)
    };
    let path = write_bundle(&args.out, &spec)?;
    println!("{}", path.display());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let outcome = match &cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Subset(a) => cmd_subset(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::Patches(a) => cmd_patches(a),
        Command::Rank(a) => cmd_rank(a),
        Command::Render(a) => cmd_render(a),
        Command::Report(a) => cmd_report(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
