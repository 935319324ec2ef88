//! End-to-end orchestration: standardize, chunk, diarize, resolve overlaps,
//! handle background music, transcribe, caption and select duplex regions,
//! one manifest per source file.

pub mod config;
pub mod manifest;
mod run;

pub use config::{BackendMode, ConfigError, PipelineConfig, StageToggles};
pub use manifest::{check_manifest, manifest_schema, read_manifest, Manifest, ManifestStatus, SCHEMA_VERSION};
pub use run::{
    caption_with_context, connect_backends, discover_inputs, required_capabilities, run, run_with, FileStatus, FileSummary,
    PipelineError, Summary, STAGE_ORDER,
};
