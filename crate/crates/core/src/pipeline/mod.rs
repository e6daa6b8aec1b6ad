//! End-to-end orchestration: dataset, caption, perturb, generate, assemble,
//! train and evaluate, driven by one configuration file.

mod config;
mod run;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    AblationSection, Backends, BackendsConfig, DatasetConfig, DatasetKind, EvalSection, PerturberKind,
    PipelineConfig, ServiceKind, TrainSection, TOY_E2E_CONFIG,
};
pub use run::{
    run_experiment, Bundle, Failure, RunStatus, Summary, ABLATION_CSV, CALL_LOG, CAPTIONS_FILE, CONFIG_FILE, EDITS_FILE,
    MEDIA_DIR,
    MERGED_MANIFEST, ORIGINAL_MANIFEST, RESULTS_CSV, RESULTS_TABLE, RESULTS_WIDE_CSV, RUN_LOG, SUBSET_MANIFEST,
    SUMMARY_FILE, SYNTHETIC_MANIFEST,
};
pub use synth::{
    caption_images, generate_planned, item_seed, plan_edits, read_jsonl, select_sources, synthesize_triplets,
    synthesize_with_log, synthetic_image_id, write_jsonl, CallLog, CaptionOutcome, ItemOutcome, PlannedEdit,
    Shortfall, Synthesis, SYNTHETIC_SUBDIR,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("stage `{stage}`{}: {cause}", item.as_ref().map(|i| format!(" (item {i})")).unwrap_or_default())]
    Stage {
        stage: String,
        item: Option<String>,
        cause: String,
    },
}

impl PipelineError {
    pub fn stage(stage: &str, cause: impl std::fmt::Display) -> Self {
        PipelineError::Stage {
            stage: stage.to_string(),
            item: None,
            cause: cause.to_string(),
        }
    }

    pub fn stage_name(&self) -> &str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Io { .. } => "io",
            PipelineError::Stage { stage, .. } => stage,
        }
    }
}
