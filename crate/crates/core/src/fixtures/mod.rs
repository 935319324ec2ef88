//! Ground-truth fixtures: mixtures with clean per-speaker tracks, reference
//! RTTM and word-level transcripts.
//!
//! On disk, a fixture with stem `s` in directory `d` is
//!
//! - `d/s.wav`: the mixture
//! - `d/s.fixture.json`: [`FixtureMeta`]
//! - `d/s.rttm`: reference speaker segments
//! - `d/s.transcript.json`: [`Transcript`]
//! - `d/clean/s.<speaker>.wav`: each speaker alone, on the mixture timeline
//!
//! Clean tracks and the mixture share the 16-bit grid and the mixture is
//! the exact sum of the clean tracks, music and noise floor.

pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{self, AudioBuffer, AudioError};
use crate::metrics::rttm::{parse_rttm, write_rttm, RttmError, RttmSegment};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("no fixture for source {0:?}")]
    Missing(String),
    #[error("{path}: {source}")]
    Audio { path: PathBuf, source: AudioError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Rttm { path: PathBuf, source: RttmError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpeaker {
    pub speaker_id: String,
    pub f0_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MusicSpan {
    pub start_s: f64,
    pub end_s: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureMeta {
    pub stem: String,
    pub sample_rate_hz: u32,
    pub duration_s: f64,
    pub speakers: Vec<FixtureSpeaker>,
    #[serde(default)]
    pub music: Vec<MusicSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptWord {
    pub speaker_id: String,
    pub word: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Transcript {
    pub words: Vec<TranscriptWord>,
}

/// One fixture fully in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub meta: FixtureMeta,
    pub mixture: AudioBuffer,
    /// Speaker id → clean track, same length as the mixture.
    pub tracks: BTreeMap<String, AudioBuffer>,
    pub rttm: Vec<RttmSegment>,
    pub transcript: Transcript,
}

pub fn mixture_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.wav"))
}

pub fn clean_path(dir: &Path, stem: &str, speaker_id: &str) -> PathBuf {
    dir.join("clean").join(format!("{stem}.{speaker_id}.wav"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, FixtureError> {
    let text = std::fs::read_to_string(path).map_err(|source| FixtureError::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|source| FixtureError::Json { path: path.into(), source })
}

fn write_text(path: &Path, text: &str) -> Result<(), FixtureError> {
    std::fs::write(path, text).map_err(|source| FixtureError::Io { path: path.into(), source })
}

fn read_audio(path: &Path) -> Result<AudioBuffer, FixtureError> {
    audio::wav::read_wav(path)
        .map(|b| audio::to_mono(&b))
        .map_err(|source| FixtureError::Audio { path: path.into(), source })
}

impl Fixture {
    pub fn load(dir: &Path, stem: &str) -> Result<Self, FixtureError> {
        let meta: FixtureMeta = read_json(&dir.join(format!("{stem}.fixture.json")))?;
        let mixture = read_audio(&mixture_path(dir, stem))?;
        let tracks = meta
            .speakers
            .iter()
            .map(|s| Ok((s.speaker_id.clone(), read_audio(&clean_path(dir, stem, &s.speaker_id))?)))
            .collect::<Result<_, FixtureError>>()?;
        let rttm_path = dir.join(format!("{stem}.rttm"));
        let rttm_text =
            std::fs::read_to_string(&rttm_path).map_err(|source| FixtureError::Io { path: rttm_path.clone(), source })?;
        let rttm = parse_rttm(&rttm_text).map_err(|source| FixtureError::Rttm { path: rttm_path, source })?;
        let transcript = read_json(&dir.join(format!("{stem}.transcript.json")))?;
        Ok(Self { meta, mixture, tracks, rttm, transcript })
    }

    pub fn write(&self, dir: &Path) -> Result<(), FixtureError> {
        let stem = &self.meta.stem;
        let wav = |path: PathBuf, buf: &AudioBuffer| {
            audio::wav::write_wav(buf, &path).map_err(|source| FixtureError::Audio { path, source })
        };
        wav(mixture_path(dir, stem), &self.mixture)?;
        for (spk, track) in &self.tracks {
            wav(clean_path(dir, stem, spk), track)?;
        }
        write_text(&dir.join(format!("{stem}.fixture.json")), &pretty_json(&self.meta))?;
        write_text(&dir.join(format!("{stem}.transcript.json")), &pretty_json(&self.transcript))?;
        write_text(&dir.join(format!("{stem}.rttm")), &write_rttm(&self.rttm))
    }

    pub fn words_of<'a>(&'a self, speaker_id: &'a str) -> impl Iterator<Item = &'a TranscriptWord> + 'a {
        self.transcript.words.iter().filter(move |w| w.speaker_id == speaker_id)
    }
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("fixture types serialize");
    s.push('\n');
    s
}

/// Read-only set of fixtures keyed by stem.
#[derive(Debug, Clone, Default)]
pub struct FixtureStore {
    fixtures: BTreeMap<String, Arc<Fixture>>,
}

impl FixtureStore {
    /// Load every `*.fixture.json` in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, FixtureError> {
        let entries = std::fs::read_dir(dir).map_err(|source| FixtureError::Io { path: dir.into(), source })?;
        let mut stems: Vec<String> = entries
            .filter_map(Result::ok)
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".fixture.json")).map(str::to_string))
            .collect();
        stems.sort();
        let mut store = Self::default();
        for stem in stems {
            store.insert(Fixture::load(dir, &stem)?);
        }
        Ok(store)
    }

    pub fn insert(&mut self, fixture: Fixture) {
        self.fixtures.insert(fixture.meta.stem.clone(), Arc::new(fixture));
    }

    pub fn get(&self, stem: &str) -> Result<&Arc<Fixture>, FixtureError> {
        self.fixtures.get(stem).ok_or_else(|| FixtureError::Missing(stem.to_string()))
    }

    pub fn stems(&self) -> impl Iterator<Item = &str> {
        self.fixtures.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

/// Stable 64-bit seed from a base seed and labels.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_separates_labels() {
        assert_eq!(derive_seed(1, &["a", "b"]), derive_seed(1, &["a", "b"]));
        assert_ne!(derive_seed(1, &["ab"]), derive_seed(1, &["a", "b"]));
        assert_ne!(derive_seed(1, &["a"]), derive_seed(2, &["a"]));
    }

    #[test]
    fn write_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fx = synth::synth_conversation(&synth::ConversationSpec::short("rt", 7));
        fx.write(dir.path()).unwrap();
        let back = Fixture::load(dir.path(), "rt").unwrap();
        assert_eq!(back.meta, fx.meta);
        assert_eq!(back.mixture, fx.mixture);
        assert_eq!(back.tracks, fx.tracks);
        assert_eq!(back.transcript, fx.transcript);
        assert_eq!(back.rttm.len(), fx.rttm.len());
        let store = FixtureStore::load_dir(dir.path()).unwrap();
        assert_eq!(store.stems().collect::<Vec<_>>(), vec!["rt"]);
    }
}
