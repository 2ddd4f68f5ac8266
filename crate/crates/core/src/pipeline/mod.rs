//! Staged runs: data, pretraining, finetuning, variant generation,
//! evaluation of generation and segmentation, ablation sweeps and reports.
//!
//! Every stage writes into `<run_dir>/<stage>/` and finishes with a
//! `complete.json` marker holding a hash of the settings and seed it was
//! produced from, chained through its upstream stages.

mod ablation;
mod config;
mod plot;
mod report;
mod run;

pub use ablation::{run_ablation, AblationTable, SweepParam, SweepRow};
pub use config::{
    DataConfig, DiffusionStage, ExternalData, Method, MetricsConfig, RunConfig, SegmentationConfig, Stage,
};
pub use report::{load_results, write_report, GenerationResults, Report};
pub use run::{
    generate_for, is_complete, repeat_seed, run_pipeline, run_stage, stage_hash, Pairing, PipelineOutcome, RunLayout,
    SegRun,
};
