pub mod captioner;
pub mod cfgen;
pub mod dataset;
pub mod evalkit;
pub mod hashing;
pub mod manifest;
pub mod perturber;
pub mod pipeline;
pub mod toycir;
pub mod toyworld;
pub mod transport;
pub mod types;

pub use evalkit::{Arm, CirModel, EmbeddingVector, EvalConfig, EvalResult};
pub use manifest::{compute_stats, validate_manifest, DatasetManifest, ManifestError, StatsTable, Violation, ViolationCode};
pub use pipeline::{Backends, Bundle, PipelineConfig, PipelineError};
pub use toyworld::{SceneMeta, Vocabulary};
pub use types::{
    Caption, CaptionEdit, ComponentKind, ImageRecord, InjectionMode, Provenance, Source, Split, TokenSpan, Triplet,
};
