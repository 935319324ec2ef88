//! Deterministic in-process backends answering every task kind from
//! fixture ground truth.
//!
//! Requests locate their fixture through the `source_id` param (the fixture
//! stem) and their position through `offset_s`, the source time at which
//! the payload audio starts. Every answer is a pure function of the request,
//! the fixture store and the config. `timing_s` is modeled as payload
//! duration times a per-kind real-time factor so that manifests stay
//! reproducible.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Capability, DispatchError, ErrorBody, Payload, PcmData, TaskKind, TaskRequest, TaskResponse, WireSegment, WireWord,
};
use super::dispatch::Backend;
use crate::audio::{rms, AudioBuffer};
use crate::fixtures::{derive_seed, synth::VOCAB, Fixture, FixtureStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockAsrModel {
    pub model_id: String,
    /// Independent per-word probability of replacing the true word.
    pub substitution_rate: f64,
    pub timestamps: bool,
    /// Per-request probability of answering with a repetition loop.
    pub hallucination_rate: f64,
}

impl Default for MockAsrModel {
    fn default() -> Self {
        Self { model_id: String::new(), substitution_rate: 0.0, timestamps: true, hallucination_rate: 0.0 }
    }
}

impl MockAsrModel {
    pub fn new(model_id: &str, substitution_rate: f64, timestamps: bool) -> Self {
        Self { model_id: model_id.to_string(), substitution_rate, timestamps, hallucination_rate: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub seed: u64,
    pub vad_hop_s: f64,
    /// Frame RMS at or above this is speech.
    pub vad_threshold: f64,
    pub embed_dim: usize,
    pub asr_models: Vec<MockAsrModel>,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            vad_hop_s: 0.02,
            vad_threshold: 0.01,
            embed_dim: 64,
            asr_models: vec![
                MockAsrModel::new("asr_a", 0.0, true),
                MockAsrModel::new("asr_b", 0.0, true),
                MockAsrModel::new("asr_c", 0.0, false),
            ],
        }
    }
}

/// Modeled processing seconds per second of payload audio.
pub fn modeled_rtf(kind: TaskKind) -> f64 {
    match kind {
        TaskKind::Vad => 0.002,
        TaskKind::Diarize => 0.014,
        TaskKind::Separate2 => 0.01,
        TaskKind::Embed => 0.001,
        TaskKind::TagAudio => 0.002,
        TaskKind::ExtractVocals => 0.02,
        TaskKind::Denoise => 0.04,
        TaskKind::Asr => 0.04,
        TaskKind::Caption => 0.05,
    }
}

/// The hallucination loop the mock ASR emits.
pub const LOOP_WORD: &str = "yeah";
pub const LOOP_LEN: usize = 100;

pub struct MockBackend {
    store: Arc<FixtureStore>,
    config: MockConfig,
    kinds: Vec<TaskKind>,
}

impl MockBackend {
    pub fn new(store: Arc<FixtureStore>, config: MockConfig) -> Self {
        Self { store, config, kinds: TaskKind::ALL.to_vec() }
    }

    /// Advertise and answer only `kinds`.
    pub fn with_kinds(mut self, kinds: &[TaskKind]) -> Self {
        self.kinds = kinds.to_vec();
        self
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn fixture(&self, req: &TaskRequest) -> Result<&Arc<Fixture>, ErrorBody> {
        let source = req.param_str("source_id").ok_or_else(|| ErrorBody::new("missing_param", "source_id"))?;
        self.store.get(source).map_err(|e| ErrorBody::new("missing_fixture", e.to_string()))
    }

    fn answer(&self, req: &TaskRequest) -> Result<(Payload, f64), ErrorBody> {
        if !self.kinds.contains(&req.task_kind) {
            return Err(ErrorBody::new("unsupported_task", req.task_kind.as_str()));
        }
        let audio = req.audio.load().map_err(|e| ErrorBody::new("bad_audio", e.to_string()))?;
        let offset = req.param_f64("offset_s").unwrap_or(0.0);
        let dur = audio.duration_s();
        let payload = match req.task_kind {
            TaskKind::Vad => self.vad(&audio),
            TaskKind::Diarize => diarize(self.fixture(req)?, offset, dur),
            TaskKind::Separate2 => self.separate(req, self.fixture(req)?, offset, &audio)?,
            TaskKind::Embed => self.embed(self.fixture(req)?, &audio)?,
            TaskKind::TagAudio => tag(self.fixture(req)?, offset, dur),
            TaskKind::ExtractVocals => extract(self.fixture(req)?, offset, &audio),
            TaskKind::Denoise => Payload::Denoise { audio: PcmData::encode(&audio) },
            TaskKind::Asr => self.asr(req, self.fixture(req)?, offset, &audio)?,
            TaskKind::Caption => caption(req, dur),
        };
        Ok((payload, dur * modeled_rtf(req.task_kind)))
    }

    fn vad(&self, audio: &AudioBuffer) -> Payload {
        let hop = ((self.config.vad_hop_s * audio.sample_rate_hz as f64).round() as usize).max(1);
        let probs = audio
            .samples
            .chunks(hop)
            .map(|frame| if rms(frame) >= self.config.vad_threshold { 1.0 } else { 0.0 })
            .collect();
        Payload::Vad { hop_s: hop as f64 / audio.sample_rate_hz as f64, probs }
    }

    fn separate(&self, req: &TaskRequest, fx: &Fixture, offset: f64, audio: &AudioBuffer) -> Result<Payload, ErrorBody> {
        let windows: Vec<(&String, AudioBuffer)> =
            fx.tracks.iter().map(|(id, t)| (id, track_window(t, offset, audio.frames()))).collect();
        let mut ranked: Vec<(f64, usize)> =
            windows.iter().enumerate().map(|(i, (_, w))| (w.samples.iter().map(|x| x * x).sum(), i)).collect();
        // Highest energy first; ties keep speaker order.
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if ranked.len() < 2 {
            return Err(ErrorBody::new("separation_failed", "fewer than two sources"));
        }
        let mut pair = [ranked[0].1, ranked[1].1];
        pair.sort_unstable();
        let source = req.param_str("source_id").unwrap_or_default();
        if derive_seed(self.config.seed, &["separate", source, &format!("{offset:.6}")]) & 1 == 1 {
            pair.swap(0, 1);
        }
        Ok(Payload::Separate2 { sources: pair.iter().map(|&i| PcmData::encode(&windows[i].1)).collect() })
    }

    fn embed(&self, fx: &Fixture, audio: &AudioBuffer) -> Result<Payload, ErrorBody> {
        if audio.is_empty() {
            return Err(ErrorBody::new("bad_audio", "empty embedding input"));
        }
        let sr = audio.sample_rate_hz as f64;
        let score = |f0: f64| -> f64 { (1..=3).map(|h| goertzel_power(&audio.samples, h as f64 * f0, sr)).sum() };
        let best = fx
            .meta
            .speakers
            .iter()
            .map(|s| (score(s.f0_hz), &s.speaker_id))
            .fold(None::<(f64, &String)>, |acc, cur| match acc {
                Some(a) if a.0 >= cur.0 => Some(a),
                _ => Some(cur),
            })
            .ok_or_else(|| ErrorBody::new("missing_fixture", "fixture has no speakers"))?;
        Ok(Payload::Embed { vector: speaker_vector(self.config.seed, best.1, self.config.embed_dim) })
    }

    fn asr(&self, req: &TaskRequest, fx: &Fixture, offset: f64, audio: &AudioBuffer) -> Result<Payload, ErrorBody> {
        let model_id = req.param_str("model_id").ok_or_else(|| ErrorBody::new("missing_param", "model_id"))?;
        let model = self
            .config
            .asr_models
            .iter()
            .find(|m| m.model_id == model_id)
            .ok_or_else(|| ErrorBody::new("unknown_model", model_id))?;
        let speaker = req.param_str("speaker_id").ok_or_else(|| ErrorBody::new("missing_param", "speaker_id"))?;
        let source = req.param_str("source_id").unwrap_or_default();
        let dur = audio.duration_s();
        let request_key = format!("{offset:.6}/{dur:.6}");

        let mut loop_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &["loop", model_id, source, speaker, &request_key]));
        if model.hallucination_rate > 0.0 && loop_rng.random::<f64>() < model.hallucination_rate {
            let words = (0..LOOP_LEN).map(|_| WireWord { surface: LOOP_WORD.into(), start_s: None, end_s: None }).collect();
            return Ok(Payload::Asr { model_id: model_id.into(), words });
        }

        let sr = audio.sample_rate_hz as f64;
        let audible = |a: f64, b: f64| {
            let i = ((a * sr).round().max(0.0) as usize).min(audio.frames());
            let j = ((b * sr).round().max(0.0) as usize).min(audio.frames());
            j > i && rms(&audio.samples[i..j]) > 1e-4
        };
        let words = fx
            .words_of(speaker)
            .filter(|w| {
                let mid = 0.5 * (w.start_s + w.end_s) - offset;
                (0.0..dur).contains(&mid) && audible(w.start_s - offset, w.end_s - offset)
            })
            .map(|w| {
                let key = format!("{:.3}", w.start_s);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &["asr", model_id, source, speaker, &key]));
                let surface = if rng.random::<f64>() < model.substitution_rate {
                    substitute(&mut rng, &w.word)
                } else {
                    w.word.clone()
                };
                let (start_s, end_s) = if model.timestamps {
                    (Some((w.start_s - offset).clamp(0.0, dur)), Some((w.end_s - offset).clamp(0.0, dur)))
                } else {
                    (None, None)
                };
                WireWord { surface, start_s, end_s }
            })
            .collect();
        Ok(Payload::Asr { model_id: model_id.into(), words })
    }
}

impl Backend for MockBackend {
    fn capabilities(&self) -> Vec<Capability> {
        self.kinds
            .iter()
            .map(|&task_kind| Capability {
                task_kind,
                model_ids: if task_kind == TaskKind::Asr {
                    self.config.asr_models.iter().map(|m| m.model_id.clone()).collect()
                } else {
                    Vec::new()
                },
            })
            .collect()
    }

    fn call(&self, request: &TaskRequest) -> Result<TaskResponse, DispatchError> {
        Ok(match self.answer(request) {
            Ok((payload, timing)) => TaskResponse::ok(&request.request_id, payload, timing),
            Err(body) => TaskResponse::error(&request.request_id, body),
        })
    }
}

fn substitute(rng: &mut ChaCha8Rng, truth: &str) -> String {
    loop {
        let w = VOCAB[rng.random_range(0..VOCAB.len())];
        if w != truth {
            return w.to_string();
        }
    }
}

/// `frames` samples of `track` from `offset_s`, zero-padded past the end.
fn track_window(track: &AudioBuffer, offset_s: f64, frames: usize) -> AudioBuffer {
    let start = (offset_s * track.sample_rate_hz as f64).round().max(0.0) as usize;
    let samples = (start..start + frames).map(|i| track.samples.get(i).copied().unwrap_or(0.0)).collect();
    AudioBuffer::mono(samples, track.sample_rate_hz)
}

fn diarize(fx: &Fixture, offset: f64, dur: f64) -> Payload {
    let mut segments: Vec<WireSegment> = fx
        .rttm
        .iter()
        .filter_map(|s| {
            let a = s.interval.start_s.max(offset);
            let b = s.interval.end_s.min(offset + dur);
            (b > a).then(|| WireSegment { speaker_id: s.speaker_id.clone(), start_s: a - offset, end_s: b - offset })
        })
        .collect();
    segments.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then_with(|| a.speaker_id.cmp(&b.speaker_id)));
    Payload::Diarize { segments }
}

fn tag(fx: &Fixture, offset: f64, dur: f64) -> Payload {
    let music_prob = fx
        .meta
        .music
        .iter()
        .filter(|m| m.start_s < offset + dur && m.end_s > offset)
        .map(|m| m.prob)
        .fold(0.0, f64::max);
    Payload::TagAudio { music_prob }
}

fn extract(fx: &Fixture, offset: f64, audio: &AudioBuffer) -> Payload {
    let mut sum = vec![0.0; audio.frames()];
    for t in fx.tracks.values() {
        for (s, x) in sum.iter_mut().zip(track_window(t, offset, audio.frames()).samples) {
            *s += x;
        }
    }
    Payload::ExtractVocals { audio: PcmData::encode(&AudioBuffer::mono(sum, audio.sample_rate_hz)) }
}

fn caption(req: &TaskRequest, dur: f64) -> Payload {
    let n = req.params.get("context").and_then(|v| v.as_array()).map_or(0, Vec::len);
    Payload::Caption { text: format!("speech segment of {dur:.2} s captioned with {n} context segment(s)") }
}

/// Number of context segments encoded in a mock caption.
pub fn caption_context_count(text: &str) -> Option<usize> {
    text.split(" with ").nth(1)?.split_whitespace().next()?.parse().ok()
}

/// Power of `samples` at `freq_hz` (Goertzel).
pub fn goertzel_power(samples: &[f64], freq_hz: f64, sample_rate_hz: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * freq_hz / sample_rate_hz;
    let coeff = 2.0 * w.cos();
    let (mut s1, mut s2) = (0.0, 0.0);
    for &x in samples {
        let s0 = x + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    s1 * s1 + s2 * s2 - coeff * s1 * s2
}

/// Fixed pseudo-random unit vector for a speaker.
pub fn speaker_vector(seed: u64, speaker_id: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["embed", speaker_id]));
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::synth::{overlap_grid, overlap_pair_fixture, synth_conversation, ConversationSpec};
    use crate::protocol::{AudioPayload, Outcome, Params};
    use serde_json::json;

    fn backend(fx: Fixture, config: MockConfig) -> MockBackend {
        let mut store = FixtureStore::default();
        store.insert(fx);
        MockBackend::new(Arc::new(store), config)
    }

    fn params(pairs: &[(&str, serde_json::Value)]) -> Params {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn ok(b: &MockBackend, kind: TaskKind, audio: &AudioBuffer, p: Params) -> Payload {
        match b.call(&TaskRequest::new("t", kind, AudioPayload::inline(audio), p)).unwrap().outcome {
            Outcome::Ok(p) => p,
            Outcome::Error(e) => panic!("{e:?}"),
        }
    }

    #[test]
    fn embedder_is_deterministic_per_speaker() {
        let fx = synth_conversation(&ConversationSpec::short("e", 3));
        let seg = fx.rttm[0].clone();
        let audio = fx.mixture.slice_s(seg.interval.start_s, seg.interval.end_s);
        let b = backend(fx, MockConfig::default());
        let p = params(&[("source_id", json!("e"))]);
        let v1 = ok(&b, TaskKind::Embed, &audio, p.clone());
        let v2 = ok(&b, TaskKind::Embed, &audio, p);
        assert_eq!(v1, v2);
        assert_eq!(v1, Payload::Embed { vector: speaker_vector(7, &seg.speaker_id, 64) });
    }

    #[test]
    fn asr_without_noise_is_truth() {
        let fx = synth_conversation(&ConversationSpec::short("a", 4));
        let seg = fx.rttm.iter().max_by(|a, b| a.interval.duration().total_cmp(&b.interval.duration())).unwrap().clone();
        let truth: Vec<String> = fx
            .words_of(&seg.speaker_id)
            .filter(|w| seg.interval.contains_time(0.5 * (w.start_s + w.end_s)))
            .map(|w| w.word.clone())
            .collect();
        let audio = fx.tracks[&seg.speaker_id].slice_s(seg.interval.start_s, seg.interval.end_s);
        let b = backend(fx, MockConfig::default());
        let p = params(&[
            ("source_id", json!("a")),
            ("offset_s", json!(seg.interval.start_s)),
            ("speaker_id", json!(seg.speaker_id)),
            ("model_id", json!("asr_a")),
        ]);
        let Payload::Asr { words, .. } = ok(&b, TaskKind::Asr, &audio, p.clone()) else { panic!() };
        assert_eq!(words.iter().map(|w| w.surface.clone()).collect::<Vec<_>>(), truth);
        let mut unknown = p;
        unknown.insert("model_id".into(), json!("nope"));
        let resp = b.call(&TaskRequest::new("t", TaskKind::Asr, AudioPayload::inline(&audio), unknown)).unwrap();
        assert!(matches!(resp.outcome, Outcome::Error(ref e) if e.code == "unknown_model"));
    }

    #[test]
    fn separator_returns_clean_sources_bit_exact() {
        let spec = &overlap_grid()[4];
        let (fx, truth) = overlap_pair_fixture(spec);
        let ov = truth.first_span.intersect(&truth.second_span).unwrap();
        let mix = fx.mixture.slice_s(ov.start_s, ov.end_s);
        let clean: Vec<AudioBuffer> =
            [&truth.first_id, &truth.second_id].iter().map(|id| fx.tracks[*id].slice_s(ov.start_s, ov.end_s)).collect();
        let b = backend(fx, MockConfig::default());
        let p = params(&[("source_id", json!(spec.stem)), ("offset_s", json!(ov.start_s))]);
        let Payload::Separate2 { sources } = ok(&b, TaskKind::Separate2, &mix, p) else { panic!() };
        let got: Vec<AudioBuffer> = sources.iter().map(|s| s.decode().unwrap()).collect();
        assert!(
            (got[0] == clean[0] && got[1] == clean[1]) || (got[0] == clean[1] && got[1] == clean[0]),
            "separated sources differ from clean tracks"
        );
    }

    #[test]
    fn missing_fixture_is_an_error() {
        let b = MockBackend::new(Arc::new(FixtureStore::default()), MockConfig::default());
        let audio = AudioBuffer::mono(vec![0.1; 160], 16000);
        let resp = b
            .call(&TaskRequest::new("t", TaskKind::Diarize, AudioPayload::inline(&audio), params(&[("source_id", json!("x"))])))
            .unwrap();
        assert!(matches!(resp.outcome, Outcome::Error(ref e) if e.code == "missing_fixture"));
    }

    #[test]
    fn caption_encodes_context_count() {
        let b = MockBackend::new(Arc::new(FixtureStore::default()), MockConfig::default());
        let audio = AudioBuffer::mono(vec![0.1; 1600], 16000);
        let p = params(&[("context", json!([{"a": 1}, {"b": 2}]))]);
        let Payload::Caption { text } = ok(&b, TaskKind::Caption, &audio, p) else { panic!() };
        assert_eq!(caption_context_count(&text), Some(2));
    }

    #[test]
    fn goertzel_peaks_at_tone() {
        let sr = 16000.0;
        let x: Vec<f64> = (0..8000).map(|i| (2.0 * std::f64::consts::PI * 155.0 * i as f64 / sr).sin()).collect();
        assert!(goertzel_power(&x, 155.0, sr) > 100.0 * goertzel_power(&x, 100.0, sr));
    }
}
