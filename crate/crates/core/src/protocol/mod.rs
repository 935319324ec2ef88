//! Versioned request/response protocol to inference backends.
//!
//! Frames are single-line JSON objects terminated by `\n`, exchanged over a
//! byte stream (stdio of a worker process or a TCP socket). The first frame a
//! worker sends is a `hello` advertising its capabilities. Every subsequent
//! `request` gets exactly one `response` echoing its `request_id`.
//!
//! Audio travels either inline as base64 little-endian signed 16-bit PCM or
//! as a file path plus a time interval within that file.

pub mod conformance;
pub mod dispatch;
pub mod mock;
pub mod serve;

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioBuffer};
use crate::timeline::TimeInterval;

pub use dispatch::{Backend, DispatchError, DispatchRecord, Dispatcher, StreamConnection};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Vad,
    Diarize,
    Separate2,
    Embed,
    TagAudio,
    ExtractVocals,
    Denoise,
    Asr,
    Caption,
}

impl TaskKind {
    pub const ALL: [TaskKind; 9] = [
        TaskKind::Vad,
        TaskKind::Diarize,
        TaskKind::Separate2,
        TaskKind::Embed,
        TaskKind::TagAudio,
        TaskKind::ExtractVocals,
        TaskKind::Denoise,
        TaskKind::Asr,
        TaskKind::Caption,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Vad => "vad",
            TaskKind::Diarize => "diarize",
            TaskKind::Separate2 => "separate2",
            TaskKind::Embed => "embed",
            TaskKind::TagAudio => "tag_audio",
            TaskKind::ExtractVocals => "extract_vocals",
            TaskKind::Denoise => "denoise",
            TaskKind::Asr => "asr",
            TaskKind::Caption => "caption",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Base64 little-endian signed 16-bit mono PCM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcmData {
    pub sample_rate_hz: u32,
    pub pcm_s16le_b64: String,
}

impl PcmData {
    pub fn encode(buf: &AudioBuffer) -> Self {
        let mut bytes = Vec::with_capacity(buf.samples.len() * 2);
        for s in buf.to_i16() {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        Self { sample_rate_hz: buf.sample_rate_hz, pcm_s16le_b64: B64.encode(bytes) }
    }

    pub fn decode(&self) -> Result<AudioBuffer, ProtocolError> {
        let bytes = B64
            .decode(&self.pcm_s16le_b64)
            .map_err(|e| ProtocolError::BadAudio(format!("base64: {e}")))?;
        if bytes.len() % 2 != 0 {
            return Err(ProtocolError::BadAudio("odd PCM byte count".into()));
        }
        let pcm: Vec<i16> = bytes.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
        Ok(AudioBuffer::from_i16(&pcm, self.sample_rate_hz, 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub interval: TimeInterval,
}

/// Exactly one of a file reference or inline PCM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioPayload {
    File(FileRef),
    Inline(PcmData),
}

impl AudioPayload {
    pub fn inline(buf: &AudioBuffer) -> Self {
        AudioPayload::Inline(PcmData::encode(buf))
    }

    pub fn file(path: impl AsRef<Path>, interval: TimeInterval) -> Self {
        AudioPayload::File(FileRef { path: path.as_ref().to_string_lossy().into_owned(), interval })
    }

    /// Materialize the payload as mono audio.
    pub fn load(&self) -> Result<AudioBuffer, ProtocolError> {
        match self {
            AudioPayload::Inline(pcm) => pcm.decode(),
            AudioPayload::File(f) => {
                let full = audio::wav::read_wav(&f.path)
                    .map_err(|e| ProtocolError::BadAudio(format!("{}: {e}", f.path)))?;
                let mono = audio::to_mono(&full);
                Ok(mono.slice_s(f.interval.start_s, f.interval.end_s))
            }
        }
    }
}

pub type Params = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub request_id: String,
    pub protocol_version: u32,
    pub task_kind: TaskKind,
    pub audio: AudioPayload,
    #[serde(default)]
    pub params: Params,
}

impl TaskRequest {
    pub fn new(request_id: impl Into<String>, task_kind: TaskKind, audio: AudioPayload, params: Params) -> Self {
        Self { request_id: request_id.into(), protocol_version: PROTOCOL_VERSION, task_kind, audio, params }
    }

    pub fn param_str(&self, key: &str) -> Option<&str> {
        self.params.get(key).and_then(|v| v.as_str())
    }

    pub fn param_f64(&self, key: &str) -> Option<f64> {
        self.params.get(key).and_then(|v| v.as_f64())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSegment {
    pub speaker_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireWord {
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_s: Option<f64>,
}

/// Result payload; its `kind` must equal the request's `task_kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Vad { hop_s: f64, probs: Vec<f64> },
    Diarize { segments: Vec<WireSegment> },
    Separate2 { sources: Vec<PcmData> },
    Embed { vector: Vec<f64> },
    TagAudio { music_prob: f64 },
    ExtractVocals { audio: PcmData },
    Denoise { audio: PcmData },
    Asr { model_id: String, words: Vec<WireWord> },
    Caption { text: String },
}

impl Payload {
    pub fn kind(&self) -> TaskKind {
        match self {
            Payload::Vad { .. } => TaskKind::Vad,
            Payload::Diarize { .. } => TaskKind::Diarize,
            Payload::Separate2 { .. } => TaskKind::Separate2,
            Payload::Embed { .. } => TaskKind::Embed,
            Payload::TagAudio { .. } => TaskKind::TagAudio,
            Payload::ExtractVocals { .. } => TaskKind::ExtractVocals,
            Payload::Denoise { .. } => TaskKind::Denoise,
            Payload::Asr { .. } => TaskKind::Asr,
            Payload::Caption { .. } => TaskKind::Caption,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok(Payload),
    Error(ErrorBody),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResponse {
    pub request_id: String,
    pub protocol_version: u32,
    pub outcome: Outcome,
    pub timing_s: f64,
}

impl TaskResponse {
    pub fn ok(request_id: impl Into<String>, payload: Payload, timing_s: f64) -> Self {
        Self { request_id: request_id.into(), protocol_version: PROTOCOL_VERSION, outcome: Outcome::Ok(payload), timing_s }
    }

    pub fn error(request_id: impl Into<String>, body: ErrorBody) -> Self {
        Self { request_id: request_id.into(), protocol_version: PROTOCOL_VERSION, outcome: Outcome::Error(body), timing_s: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capability {
    pub task_kind: TaskKind,
    #[serde(default)]
    pub model_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: u32,
    pub worker: String,
    pub capabilities: Vec<Capability>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Frame {
    Hello(Hello),
    Request(TaskRequest),
    Response(TaskResponse),
}

impl Frame {
    fn version(&self) -> u32 {
        match self {
            Frame::Hello(h) => h.protocol_version,
            Frame::Request(r) => r.protocol_version,
            Frame::Response(r) => r.protocol_version,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("malformed frame at line {line}, column {column}: {message}")]
    Malformed { line: usize, column: usize, message: String },
    #[error("unsupported protocol version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("bad audio payload: {0}")]
    BadAudio(String),
}

/// Serialize a frame as one JSON line including the trailing newline.
pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut bytes = serde_json::to_vec(frame).expect("frames always serialize");
    bytes.push(b'\n');
    bytes
}

/// Parse one frame. A single trailing newline is accepted.
pub fn decode(bytes: &[u8]) -> Result<Frame, ProtocolError> {
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    let frame: Frame = serde_json::from_slice(body).map_err(|e| ProtocolError::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if frame.version() != PROTOCOL_VERSION {
        return Err(ProtocolError::UnsupportedVersion { found: frame.version(), expected: PROTOCOL_VERSION });
    }
    Ok(frame)
}
