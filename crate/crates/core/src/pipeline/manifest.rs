//! Per-source manifest: everything the pipeline produced for one input,
//! with artifact paths relative to the manifest's directory.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::audio::LoudnessReport;
use crate::ensemble::RepetitionReport;
use crate::flags::Flag;
use crate::overlap::OverlapRecord;
use crate::timeline::TimeInterval;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum ManifestStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub status: ManifestStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub source: SourceRecord,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
    #[serde(default)]
    pub chunks: Vec<ChunkRecord>,
    #[serde(default)]
    pub duplex_regions: Vec<RegionRecord>,
    /// Backend-reported processing seconds per stage, in stage order.
    #[serde(default)]
    pub stage_timings: Vec<StageTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SourceRecord {
    /// File name within the input directory.
    pub file_name: String,
    pub stem: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_sample_rate_hz: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_channel_count: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dbfs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loudness: Option<LoudnessReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardized_audio: Option<String>,
}

impl SourceRecord {
    pub fn new(file_name: &str, stem: &str) -> Self {
        Self {
            file_name: file_name.into(),
            stem: stem.into(),
            duration_s: None,
            original_sample_rate_hz: None,
            original_channel_count: None,
            input_dbfs: None,
            loudness: None,
            standardized_audio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ChunkRecord {
    pub chunk_id: String,
    pub interval: TimeInterval,
    pub forced_cut: bool,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
    #[serde(default)]
    pub segments: Vec<SegmentRecord>,
    #[serde(default)]
    pub overlaps: Vec<OverlapRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub segment_id: String,
    pub speaker_id: String,
    /// Diarized extent; `audio` covers exactly this interval.
    pub interval: TimeInterval,
    /// Parts not removed by overlap cuts.
    pub kept: Vec<TimeInterval>,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub music_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<TranscriptRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TranscriptRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_model: Option<String>,
    pub text: String,
    /// Absolute source times.
    pub words: Vec<WordRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetition: Option<RepetitionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct WordRecord {
    pub word: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RegionRecord {
    pub region_id: String,
    pub chunk_id: String,
    pub interval: TimeInterval,
    pub left_speaker_id: String,
    pub right_speaker_id: String,
    pub turn_count: usize,
    pub segment_ids: Vec<String>,
    /// Two-channel WAV, left speaker first; absent when the region was dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    /// Word streams per channel, times relative to the region start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<String>,
    #[serde(default)]
    pub flags: BTreeSet<Flag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct StageTiming {
    pub stage: String,
    pub processing_s: f64,
}

/// Word streams stored next to each duplex region's audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DuplexWords {
    pub region_id: String,
    /// Source time of the first sample.
    pub offset_s: f64,
    pub left_speaker_id: String,
    pub right_speaker_id: String,
    pub left: Vec<WordRecord>,
    pub right: Vec<WordRecord>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn total_processing_s(&self) -> f64 {
        self.stage_timings.iter().map(|t| t.processing_s).sum()
    }
}

/// JSON Schema of [`Manifest`], as published in the docs.
pub fn manifest_schema() -> String {
    let mut s = serde_json::to_string_pretty(&schemars::schema_for!(Manifest)).expect("schema serializes");
    s.push('\n');
    s
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestReadError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    Version { found: u64 },
    #[error("malformed manifest: {0}")]
    Malformed(String),
}

/// Strict read: the version is checked first so that a future manifest is
/// reported as such rather than as malformed.
pub fn read_manifest(path: &Path) -> Result<Manifest, ManifestReadError> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| ManifestReadError::Malformed(e.to_string()))?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(found) => return Err(ManifestReadError::Version { found }),
        None => return Err(ManifestReadError::Malformed("missing schema_version".into())),
    }
    serde_json::from_value(value).map_err(|e| ManifestReadError::Malformed(e.to_string()))
}

fn interval_ok(iv: &TimeInterval) -> bool {
    iv.start_s.is_finite() && iv.end_s.is_finite() && iv.start_s <= iv.end_s
}

/// Semantic checks beyond the schema. `dir` is the manifest's directory,
/// against which artifact paths resolve. Returns one message per problem.
pub fn check_manifest(m: &Manifest, dir: &Path) -> Vec<String> {
    let mut problems = Vec::new();
    let artifact = |what: &str, rel: &str, problems: &mut Vec<String>| {
        let p = PathBuf::from(rel);
        if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            problems.push(format!("{what}: artifact path {rel:?} is not inside the manifest directory"));
        } else if !dir.join(&p).is_file() {
            problems.push(format!("{what}: missing artifact {rel}"));
        }
    };
    if m.status == ManifestStatus::Failed && m.error.is_none() {
        problems.push("failed manifest without error message".into());
    }
    if let Some(a) = &m.source.standardized_audio {
        artifact("source", a, &mut problems);
    }
    let mut seen = HashSet::new();
    let mut prev_chunk_end = f64::NEG_INFINITY;
    for c in &m.chunks {
        let at = format!("chunk {}", c.chunk_id);
        if !seen.insert(c.chunk_id.clone()) {
            problems.push(format!("{at}: duplicate id"));
        }
        if !interval_ok(&c.interval) {
            problems.push(format!("{at}: invalid interval"));
        }
        if c.interval.start_s < prev_chunk_end {
            problems.push(format!("{at}: overlaps the previous chunk"));
        }
        prev_chunk_end = c.interval.end_s;
        for s in &c.segments {
            let at = format!("segment {}", s.segment_id);
            if !seen.insert(s.segment_id.clone()) {
                problems.push(format!("{at}: duplicate id"));
            }
            if !interval_ok(&s.interval) || !c.interval.contains(&s.interval) {
                problems.push(format!("{at}: interval outside its chunk"));
            }
            if s.kept.iter().any(|k| !interval_ok(k) || !s.interval.contains(k)) {
                problems.push(format!("{at}: kept part outside the segment"));
            }
            if s.music_prob.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
                problems.push(format!("{at}: music_prob out of range"));
            }
            if let Some(a) = &s.audio {
                artifact(&at, a, &mut problems);
            }
            if let Some(t) = &s.transcript {
                let mut last = f64::NEG_INFINITY;
                for w in &t.words {
                    if !(w.start_s <= w.end_s && w.start_s >= last - 1e-9) {
                        problems.push(format!("{at}: word times not monotone at {:?}", w.word));
                        break;
                    }
                    last = w.end_s;
                }
                if let Some(r) = &t.repetition {
                    if r.discarded && !t.words.is_empty() {
                        problems.push(format!("{at}: discarded transcript still has words"));
                    }
                }
            }
        }
        for o in &c.overlaps {
            if !interval_ok(&o.overlap) || !c.interval.contains(&o.overlap) {
                problems.push(format!("{at}: overlap outside the chunk"));
            }
        }
    }
    for r in &m.duplex_regions {
        let at = format!("region {}", r.region_id);
        if !seen.insert(r.region_id.clone()) {
            problems.push(format!("{at}: duplicate id"));
        }
        if r.left_speaker_id == r.right_speaker_id {
            problems.push(format!("{at}: both channels carry the same speaker"));
        }
        if !interval_ok(&r.interval) {
            problems.push(format!("{at}: invalid interval"));
        }
        for a in r.audio.iter().chain(&r.words) {
            artifact(&at, a, &mut problems);
        }
    }
    for t in &m.stage_timings {
        if !(t.processing_s >= 0.0) {
            problems.push(format!("stage {}: negative or undefined time", t.stage));
        }
    }
    problems
}
