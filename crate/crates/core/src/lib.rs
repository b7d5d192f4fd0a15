//! Summary explanations for face attribute classifiers.
//!
//! The engine consumes per-sample attribution maps together with facial
//! region label maps and reduces them into per-region importance scores,
//! region rankings, high-impact patches, a prototype heatmap and bias-audit
//! reports. Everything here is model-free: attribution maps are produced
//! upstream and handed over through the [`interchange`] formats.

pub mod aggregation;
pub mod error;
pub mod evaluation;
pub mod interchange;
pub mod numfmt;
pub mod parallel;
pub mod patches;
pub mod pipeline;
pub mod rendering;
pub mod synthetic;

pub use aggregation::{
    aggregate, aggregate_ordered, rank_regions, sample_ior, IoRSummary, RegionRanking, RegionStat,
    SampleIoR, SummaryDocument,
};
pub use error::{Error, Result};
pub use evaluation::{
    evaluate_experiment, mean_ranking, ranking_position, AttributeRegionMapping, EvaluationReport, ExperimentSpec,
    Position, RankingResult,
};
pub use interchange::{
    balance_subset, load_attribution, load_mask, read_manifest, write_attribution, write_manifest,
    write_mask, AttributionMap, Manifest, RegionLabelMap, RegionTable, SampleRecord,
};
pub use patches::{
    extract_patch_pixels, score_patches, topk_patches, BestK, PatchGrid, PatchRecord, TopKSet,
};
pub use rendering::{color_of, normalize_for_display, render_heatmap, ColorScale, PrototypeTemplate};
