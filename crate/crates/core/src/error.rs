use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("unsupported manifest format_version {0} (expected 1)")]
    UnsupportedVersion(u32),

    #[error("manifest dimensions must be positive, got {height}x{width}")]
    InvalidDimensions { height: usize, width: usize },

    #[error("invalid region table: {0}")]
    InvalidRegionTable(String),

    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),

    #[error("empty sample id at manifest position {0}")]
    EmptySampleId(usize),

    #[error("{path}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: non-finite attribution value at pixel {index}")]
    NonFiniteValue { path: PathBuf, index: usize },

    #[error("{path}: attribution value {value} at pixel {index} is outside [0, 1]")]
    ValueOutOfRange {
        path: PathBuf,
        index: usize,
        value: f32,
    },

    #[error("{path}: label {label} at pixel {index} is not in the region table ({table_size} entries)")]
    LabelOutOfRange {
        path: PathBuf,
        index: usize,
        label: u8,
        table_size: usize,
    },

    #[error("attribution is {attribution:?} but mask is {mask:?}")]
    DimensionMismatch {
        attribution: (usize, usize),
        mask: (usize, usize),
    },

    #[error("sample {sample_id:?} has no binary value for attribute {attribute:?}")]
    MissingAttribute { sample_id: String, attribute: String },

    #[error("balancing cell ({target}={target_value}, {attribute}={attribute_value}) is empty")]
    EmptyCell {
        target: String,
        target_value: u8,
        attribute: String,
        attribute_value: u8,
    },

    #[error("no samples to aggregate")]
    NoSamples,

    #[error("no region is present in any sample")]
    NoRegionPresent,

    #[error("patch size {patch_size} does not tile a {height}x{width} image; re-extract at a resolution divisible by the patch size")]
    InvalidPatchSize {
        patch_size: usize,
        height: usize,
        width: usize,
    },

    #[error("unknown region {0}")]
    UnknownRegion(String),

    #[error("top-k requires k >= 1")]
    InvalidK,

    #[error("source image for sample {sample_id:?} is missing: {path}")]
    MissingImage { sample_id: String, path: PathBuf },

    #[error("image for sample {sample_id:?} is {actual:?}, manifest says {expected:?}")]
    ImageDimensionMismatch {
        sample_id: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("image error: {0}")]
    Image(String),

    #[error("attribute {0:?} has no region mapping")]
    UnmappedAttribute(String),

    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),

    #[error("cannot average an empty list of ranking positions")]
    EmptyRanking,

    #[error("ranking list contains an unranked entry at index {0}")]
    UnrankedInMean(usize),

    #[error("display value {0} is outside [0, 1]")]
    ColorOutOfRange(f64),

    #[error("template has no path for region {0:?}")]
    TemplateMissingRegion(String),

    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("report inputs come from different manifests ({expected} vs {found} in {what})")]
    ManifestHashMismatch {
        expected: String,
        found: String,
        what: String,
    },

    #[error("manifest failed validation with {0} finding(s)")]
    ValidationFailed(usize),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
