//! Pipeline configuration: one TOML document plus `key.path=value`
//! overrides. Relative paths are resolved against the working directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bgm::BgmPolicy;
use crate::duplex::DuplexPolicy;
use crate::ensemble::EnsemblePolicy;
use crate::overlap::OverlapPolicy;
use crate::protocol::mock::MockConfig;
use crate::vad::{VadParams, DEFAULT_MAX_CHUNK_S};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected key.path=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub standardize: bool,
    /// VAD and chunking.
    pub chunk: bool,
    pub diarize: bool,
    pub overlap_resolve: bool,
    pub bgm: bool,
    pub denoise: bool,
    pub asr: bool,
    pub caption: bool,
    pub duplex_select: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            standardize: true,
            chunk: true,
            diarize: true,
            overlap_resolve: true,
            bgm: true,
            denoise: false,
            asr: true,
            caption: true,
            duplex_select: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StandardizeConfig {
    pub target_dbfs: f64,
}

impl Default for StandardizeConfig {
    fn default() -> Self {
        Self { target_dbfs: -20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkConfig {
    #[serde(flatten)]
    pub vad: VadParams,
    pub max_chunk_s: f64,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self { vad: VadParams::default(), max_chunk_s: DEFAULT_MAX_CHUNK_S }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsrConfig {
    pub models: Vec<String>,
    pub primary: String,
    #[serde(flatten)]
    pub ensemble: EnsemblePolicy,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            models: vec!["asr_a".into(), "asr_b".into(), "asr_c".into()],
            primary: "asr_a".into(),
            ensemble: EnsemblePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionConfig {
    /// Preceding segments sent as context.
    pub context_segments: usize,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self { context_segments: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    /// In-process deterministic backends answering from fixture sidecars.
    Mock,
    /// External workers speaking the wire protocol.
    Endpoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Worker program and arguments, spoken to over stdio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    /// `host:port` of a listening worker.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcp: Option<String>,
    /// Parallel connections to open.
    #[serde(default = "one")]
    pub connections: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub mode: BackendMode,
    /// Fixture directory for mock mode; defaults to the input directory.
    pub fixtures_dir: Option<PathBuf>,
    /// Payloads up to this long travel inline; longer ones by file reference.
    pub inline_max_s: f64,
    pub deadline_s: f64,
    pub retries: u32,
    pub endpoints: Vec<EndpointConfig>,
    pub mock: MockConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            mode: BackendMode::Mock,
            fixtures_dir: None,
            inline_max_s: 10.0,
            deadline_s: 60.0,
            retries: 1,
            endpoints: Vec::new(),
            mock: MockConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Converter for non-WAV inputs; `{input}` and `{output}` are replaced
    /// by the source path and a temporary WAV path.
    pub command: Option<Vec<String>>,
    /// Extensions (without dot) picked up besides `wav`.
    pub extensions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub worker_count: usize,
    /// Skip sources whose manifest is already complete.
    pub resume: bool,
    pub stages: StageToggles,
    pub standardize: StandardizeConfig,
    pub chunk: ChunkConfig,
    pub overlap: OverlapPolicy,
    pub bgm: BgmPolicy,
    pub asr: AsrConfig,
    pub caption: CaptionConfig,
    pub duplex: DuplexPolicy,
    pub backend: BackendConfig,
    pub decode: DecodeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("input"),
            output_dir: PathBuf::from("output"),
            worker_count: 1,
            resume: true,
            stages: StageToggles::default(),
            standardize: StandardizeConfig::default(),
            chunk: ChunkConfig::default(),
            overlap: OverlapPolicy::default(),
            bgm: BgmPolicy::default(),
            asr: AsrConfig::default(),
            caption: CaptionConfig::default(),
            duplex: DuplexPolicy::default(),
            backend: BackendConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.into(), source })?;
                text.parse::<toml::Table>().map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Static checks; backend availability is checked when backends connect.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.worker_count == 0 {
            return bad("worker_count must be at least 1");
        }
        if self.stages.asr {
            if self.asr.models.is_empty() {
                return bad("asr.models is empty");
            }
            if !self.asr.models.contains(&self.asr.primary) {
                return bad("asr.primary must be one of asr.models");
            }
            if self.asr.ensemble.ngram_n == 0 {
                return bad("asr.ngram_n must be positive");
            }
        }
        if self.chunk.max_chunk_s <= 0.0 || self.bgm.window_s <= 0.0 {
            return bad("chunk and window lengths must be positive");
        }
        if self.backend.mode == BackendMode::Endpoints {
            if self.backend.endpoints.is_empty() {
                return bad("backend.mode = endpoints needs at least one backend.endpoints entry");
            }
            for e in &self.backend.endpoints {
                if e.command.is_some() == e.tcp.is_some() {
                    return bad("each endpoint needs exactly one of command or tcp");
                }
            }
        }
        if self.stages.overlap_resolve && !self.stages.diarize {
            return bad("overlap_resolve requires diarize");
        }
        Ok(())
    }

    pub fn fixtures_dir(&self) -> &Path {
        self.backend.fixtures_dir.as_deref().unwrap_or(&self.input_dir)
    }
}

/// Set `a.b.c = value` in `doc`. The value is read as a TOML literal, and
/// as a plain string when it does not parse as one.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(!cfg.stages.denoise);
        assert_eq!(cfg.bgm.threshold, 0.3);
    }

    #[test]
    fn overrides() {
        let cfg = PipelineConfig::load(
            None,
            &["stages.asr=false".into(), "worker_count=4".into(), "output_dir=out/x".into(), "asr.ngram_n=10".into()],
        )
        .unwrap();
        assert!(!cfg.stages.asr);
        assert_eq!(cfg.worker_count, 4);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert_eq!(cfg.asr.ensemble.ngram_n, 10);
        assert!(matches!(PipelineConfig::load(None, &["nokey".into()]), Err(ConfigError::Override(_))));
        assert!(matches!(PipelineConfig::load(None, &["stages.bogus=true".into()]), Err(ConfigError::Parse(_))));
        assert!(matches!(PipelineConfig::load(None, &["worker_count=0".into()]), Err(ConfigError::Invalid(_))));
    }
}
