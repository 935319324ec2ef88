use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::config::{BackendMode, PipelineConfig};
use super::manifest::{
    read_manifest, write_atomic, ChunkRecord, DuplexWords, Manifest, ManifestReadError, ManifestStatus, RegionRecord,
    SegmentRecord, SourceRecord, StageTiming, TranscriptRecord, WordRecord, MANIFEST_FILE, SCHEMA_VERSION,
};
use crate::audio::{self, wav, AudioBuffer, Resampler};
use crate::bgm::{flag_music, plan_windows, splice_extracted, MusicTag};
use crate::duplex::{build_stereo, select_regions, StereoSource};
use crate::ensemble::{combine, WordToken};
use crate::fixtures::FixtureStore;
use crate::flags::Flag;
use crate::metrics::{rtf_report, RtfReport};
use crate::overlap::{render_segment, resolve_chunk, OverlapBackends, ResolvedSegment, TimedAudio};
use crate::protocol::mock::MockBackend;
use crate::protocol::{
    AudioPayload, Backend, DispatchError, Dispatcher, ErrorBody, Params, Payload, StreamConnection, TaskKind,
};
use crate::timeline::{build_turns, find_overlaps, SpeakerSegment, TimeInterval};
use crate::vad::{chunk_id, chunk_regions, detect_regions, Chunk, VadFrameSeries};

/// Stages that talk to backends, in processing order.
pub const STAGE_ORDER: [&str; 7] = ["vad", "diarize", "overlap_resolve", "bgm", "denoise", "asr", "caption"];

/// Speaker label used when diarization is switched off.
const UNDIARIZED: &str = "unknown";

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad configuration or unusable backends; nothing was processed.
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileStatus {
    Complete,
    Failed,
    /// A complete manifest already existed.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileSummary {
    pub stem: String,
    pub status: FileStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    pub stage_timings: Vec<StageTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub files: Vec<FileSummary>,
    /// Sums over complete (processed or skipped) files.
    pub stage_timings: Vec<StageTiming>,
    pub audio_duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_rtf: Option<f64>,
}

impl Summary {
    fn from_files(files: Vec<FileSummary>) -> Self {
        let mut totals: BTreeMap<String, f64> = BTreeMap::new();
        let mut duration = 0.0;
        for f in files.iter().filter(|f| f.status != FileStatus::Failed) {
            duration += f.duration_s.unwrap_or(0.0);
            for t in &f.stage_timings {
                *totals.entry(t.stage.clone()).or_default() += t.processing_s;
            }
        }
        let stage_timings: Vec<StageTiming> = STAGE_ORDER
            .iter()
            .filter_map(|s| totals.get(*s).map(|&processing_s| StageTiming { stage: s.to_string(), processing_s }))
            .collect();
        let total: f64 = stage_timings.iter().map(|t| t.processing_s).sum();
        let total_rtf = (duration > 0.0).then(|| total / duration);
        Self { files, stage_timings, audio_duration_s: duration, total_rtf }
    }

    pub fn failed_count(&self) -> usize {
        self.files.iter().filter(|f| f.status == FileStatus::Failed).count()
    }

    pub fn rtf_report(&self) -> Option<RtfReport> {
        (self.audio_duration_s > 0.0).then(|| {
            let stages: Vec<(&str, f64)> = self.stage_timings.iter().map(|t| (t.stage.as_str(), t.processing_s)).collect();
            rtf_report(&stages, self.audio_duration_s)
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

/// Task kinds (with model ids) the enabled stages need.
pub fn required_capabilities(cfg: &PipelineConfig) -> Vec<(TaskKind, Option<String>)> {
    let s = &cfg.stages;
    let mut need: Vec<(TaskKind, Option<String>)> = Vec::new();
    let mut add = |on: bool, kinds: &[TaskKind]| {
        if on {
            need.extend(kinds.iter().map(|&k| (k, None)));
        }
    };
    add(s.chunk, &[TaskKind::Vad]);
    add(s.diarize, &[TaskKind::Diarize]);
    add(s.overlap_resolve, &[TaskKind::Separate2, TaskKind::Embed]);
    add(s.bgm, &[TaskKind::TagAudio, TaskKind::ExtractVocals]);
    add(s.denoise, &[TaskKind::Denoise]);
    add(s.caption, &[TaskKind::Caption]);
    if s.asr {
        need.extend(cfg.asr.models.iter().map(|m| (TaskKind::Asr, Some(m.clone()))));
    }
    need
}

/// Build the dispatcher for the configured backends and check that every
/// enabled stage is served.
pub fn connect_backends(cfg: &PipelineConfig) -> Result<Dispatcher, PipelineError> {
    let deadline = Duration::from_secs_f64(cfg.backend.deadline_s.max(0.0));
    let mut dispatcher = Dispatcher::new(deadline, cfg.backend.retries);
    match cfg.backend.mode {
        BackendMode::Mock => {
            let dir = cfg.fixtures_dir();
            let store = FixtureStore::load_dir(dir)
                .map_err(|e| PipelineError::Config(format!("loading mock fixtures from {}: {e}", dir.display())))?;
            dispatcher.add_backend(Arc::new(MockBackend::new(Arc::new(store), cfg.backend.mock.clone())));
        }
        BackendMode::Endpoints => {
            for ep in &cfg.backend.endpoints {
                for _ in 0..ep.connections.max(1) {
                    let conn = match (&ep.command, &ep.tcp) {
                        (Some(cmd), None) if !cmd.is_empty() => StreamConnection::spawn(&cmd[0], &cmd[1..]),
                        (None, Some(addr)) => StreamConnection::connect_tcp(addr.as_str()),
                        _ => return Err(PipelineError::Config("endpoint needs exactly one of command or tcp".into())),
                    }
                    .map_err(|e| PipelineError::Config(format!("connecting backend: {e}")))?;
                    dispatcher.add_backend(Arc::new(conn) as Arc<dyn Backend>);
                }
            }
        }
    }
    for (kind, model) in required_capabilities(cfg) {
        if !dispatcher.supports(kind, model.as_deref()) {
            return Err(PipelineError::Config(format!(
                "no backend serves {}{} required by an enabled stage",
                kind.as_str(),
                model.map(|m| format!(" model {m}")).unwrap_or_default()
            )));
        }
    }
    Ok(dispatcher)
}

/// Source files in `cfg.input_dir` (not recursive), sorted by name.
pub fn discover_inputs(cfg: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let dir = &cfg.input_dir;
    let entries = std::fs::read_dir(dir).map_err(|source| PipelineError::Io { path: dir.clone(), source })?;
    let wanted = |p: &Path| {
        p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
            let e = e.to_ascii_lowercase();
            e == "wav" || (cfg.decode.command.is_some() && cfg.decode.extensions.iter().any(|x| x.eq_ignore_ascii_case(&e)))
        })
    };
    let mut files: Vec<PathBuf> = entries.filter_map(Result::ok).map(|e| e.path()).filter(|p| p.is_file() && wanted(p)).collect();
    files.sort();
    Ok(files)
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn run(cfg: &PipelineConfig) -> Result<Summary, PipelineError> {
    let dispatcher = connect_backends(cfg)?;
    run_with(cfg, &dispatcher)
}

enum Plan {
    Process(PathBuf),
    Skip(Box<Manifest>),
}

/// Process every input with `cfg.worker_count` workers sharing
/// `dispatcher`. Per-file failures are recorded, not returned.
pub fn run_with(cfg: &PipelineConfig, dispatcher: &Dispatcher) -> Result<Summary, PipelineError> {
    let inputs = discover_inputs(cfg)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|source| PipelineError::Io { path: cfg.output_dir.clone(), source })?;

    let mut plans = Vec::with_capacity(inputs.len());
    for path in inputs {
        let manifest_path = cfg.output_dir.join(stem_of(&path)).join(MANIFEST_FILE);
        if cfg.resume && manifest_path.exists() {
            match read_manifest(&manifest_path) {
                Ok(m) if m.status == ManifestStatus::Complete => {
                    log::info!("{}: complete manifest found, skipping", path.display());
                    plans.push(Plan::Skip(Box::new(m)));
                    continue;
                }
                Ok(_) => {}
                Err(ManifestReadError::Version { found }) => {
                    return Err(PipelineError::Config(format!(
                        "{}: manifest schema version {found} differs from {SCHEMA_VERSION}; refusing to resume",
                        manifest_path.display()
                    )))
                }
                Err(e) => log::warn!("{}: unreadable manifest ({e}); reprocessing", manifest_path.display()),
            }
        }
        plans.push(Plan::Process(path));
    }

    let results: Mutex<Vec<Option<FileSummary>>> = Mutex::new(vec![None; plans.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..cfg.worker_count.max(1).min(plans.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(plan) = plans.get(i) else { break };
                let summary = match plan {
                    Plan::Skip(m) => summarize(m, FileStatus::Skipped),
                    Plan::Process(path) => process_file(cfg, dispatcher, path),
                };
                results.lock().unwrap()[i] = Some(summary);
            });
        }
    });
    let files: Vec<FileSummary> = results.into_inner().unwrap().into_iter().map(|s| s.expect("every file handled")).collect();
    let summary = Summary::from_files(files);
    let path = cfg.output_dir.join("summary.json");
    write_atomic(&path, summary.to_json().as_bytes()).map_err(|source| PipelineError::Io { path, source })?;
    Ok(summary)
}

fn summarize(m: &Manifest, status: FileStatus) -> FileSummary {
    FileSummary {
        stem: m.source.stem.clone(),
        status,
        duration_s: m.source.duration_s,
        stage_timings: m.stage_timings.clone(),
        error: m.error.clone(),
    }
}

fn process_file(cfg: &PipelineConfig, dispatcher: &Dispatcher, path: &Path) -> FileSummary {
    let stem = stem_of(path);
    let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let dir = cfg.output_dir.join(&stem);
    let dir = std::path::absolute(&dir).unwrap_or(dir);
    let job = FileJob { cfg, dispatcher, stem: stem.clone(), dir: dir.clone(), timings: RefCell::new(BTreeMap::new()), scratch: RefCell::new(0) };
    let mut manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        status: ManifestStatus::Complete,
        error: None,
        source: SourceRecord::new(&file_name, &stem),
        flags: BTreeSet::new(),
        chunks: Vec::new(),
        duplex_regions: Vec::new(),
        stage_timings: Vec::new(),
    };
    // Stale artifacts from an earlier partial run must not survive.
    if dir.exists() {
        let _ = std::fs::remove_dir_all(&dir);
    }
    if let Err(e) = job.process(path, &mut manifest) {
        log::error!("{}: {e}", path.display());
        manifest.status = ManifestStatus::Failed;
        manifest.error = Some(e);
    }
    let _ = std::fs::remove_dir_all(dir.join("scratch"));
    manifest.stage_timings = job.stage_timings();
    let status = match manifest.status {
        ManifestStatus::Complete => FileStatus::Complete,
        ManifestStatus::Failed => FileStatus::Failed,
    };
    if let Err(e) = write_atomic(&dir.join(MANIFEST_FILE), manifest.to_json().as_bytes()) {
        log::error!("{}: writing manifest: {e}", path.display());
        return FileSummary { status: FileStatus::Failed, error: Some(e.to_string()), ..summarize(&manifest, status) };
    }
    summarize(&manifest, status)
}

fn local_error(code: &str, message: impl ToString) -> DispatchError {
    DispatchError::Backend(ErrorBody::new(code, message.to_string()))
}

fn decode_pcm(pcm: &crate::protocol::PcmData) -> Result<AudioBuffer, DispatchError> {
    pcm.decode().map_err(DispatchError::from)
}

/// Zero-pad or truncate to `n` frames.
fn fit(mut buf: AudioBuffer, n: usize) -> AudioBuffer {
    buf.samples.resize(n, 0.0);
    buf
}

/// Working state of one segment within a chunk.
struct SegState {
    id: String,
    resolved: ResolvedSegment,
    audio: AudioBuffer,
    music_prob: Option<f64>,
    audio_rel: Option<String>,
    audio_abs: Option<PathBuf>,
    transcript: Option<TranscriptRecord>,
    words: Vec<WordToken>,
    caption: Option<String>,
}

impl SegState {
    fn flags(&mut self) -> &mut BTreeSet<Flag> {
        &mut self.resolved.flags
    }

    fn interval(&self) -> TimeInterval {
        self.resolved.segment.interval
    }

    fn alive(&self) -> bool {
        !self.resolved.kept().is_empty()
    }
}

struct FileJob<'a> {
    cfg: &'a PipelineConfig,
    dispatcher: &'a Dispatcher,
    stem: String,
    dir: PathBuf,
    timings: RefCell<BTreeMap<&'static str, f64>>,
    scratch: RefCell<usize>,
}

impl FileJob<'_> {
    fn stage_timings(&self) -> Vec<StageTiming> {
        let t = self.timings.borrow();
        let s = &self.cfg.stages;
        let enabled = [s.chunk, s.diarize, s.overlap_resolve, s.bgm, s.denoise, s.asr, s.caption];
        STAGE_ORDER
            .iter()
            .zip(enabled)
            .filter(|(_, on)| *on)
            .map(|(name, _)| StageTiming { stage: name.to_string(), processing_s: t.get(name).copied().unwrap_or(0.0) })
            .collect()
    }

    fn params(&self, offset_s: f64) -> Params {
        let mut p = Params::new();
        p.insert("source_id".into(), json!(self.stem));
        p.insert("offset_s".into(), json!(offset_s));
        p
    }

    fn call(&self, stage: &'static str, kind: TaskKind, audio: AudioPayload, params: Params) -> Result<Payload, DispatchError> {
        let (payload, timing) = self.dispatcher.request(kind, audio, params)?;
        *self.timings.borrow_mut().entry(stage).or_default() += timing;
        Ok(payload)
    }

    fn base_path(&self) -> PathBuf {
        self.dir.join("standardized.wav")
    }

    /// Inline when short, otherwise a reference into the standardized file.
    fn base_payload(&self, base: &AudioBuffer, iv: TimeInterval) -> AudioPayload {
        if iv.duration() <= self.cfg.backend.inline_max_s {
            AudioPayload::inline(&TimedAudio { audio: base, origin_s: 0.0 }.slice(iv))
        } else {
            AudioPayload::file(self.base_path(), iv)
        }
    }

    /// Inline when short, otherwise written to a scratch file.
    fn buffer_payload(&self, buf: &AudioBuffer) -> Result<AudioPayload, DispatchError> {
        if buf.duration_s() <= self.cfg.backend.inline_max_s {
            return Ok(AudioPayload::inline(buf));
        }
        let n = {
            let mut c = self.scratch.borrow_mut();
            *c += 1;
            *c
        };
        let path = self.dir.join("scratch").join(format!("{n:06}.wav"));
        wav::write_wav(buf, &path).map_err(|e| local_error("local_io", e))?;
        Ok(AudioPayload::file(&path, TimeInterval::new(0.0, buf.duration_s())))
    }

    fn file_payload(&self, buf: &AudioBuffer, stored: Option<&Path>) -> Result<AudioPayload, DispatchError> {
        match stored {
            Some(p) if buf.duration_s() > self.cfg.backend.inline_max_s => {
                Ok(AudioPayload::file(p, TimeInterval::new(0.0, buf.duration_s())))
            }
            _ => self.buffer_payload(buf),
        }
    }

    fn read_source(&self, path: &Path) -> Result<AudioBuffer, String> {
        let is_wav = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav {
            return wav::read_wav(path).map_err(|e| format!("reading audio: {e}"));
        }
        let cmd = self.cfg.decode.command.as_ref().ok_or("no decode command for non-WAV input")?;
        let tmp = self.dir.join("scratch").join("decoded.wav");
        std::fs::create_dir_all(tmp.parent().expect("scratch dir")).map_err(|e| format!("creating scratch dir: {e}"))?;
        let out = tmp.to_string_lossy().into_owned();
        let input = path.to_string_lossy().into_owned();
        let args: Vec<String> = cmd.iter().map(|a| a.replace("{input}", &input).replace("{output}", &out)).collect();
        let status = std::process::Command::new(&args[0])
            .args(&args[1..])
            .status()
            .map_err(|e| format!("running decoder: {e}"))?;
        if !status.success() {
            return Err(format!("decoder exited with {status}"));
        }
        wav::read_wav(&tmp).map_err(|e| format!("reading decoded audio: {e}"))
    }

    fn process(&self, path: &Path, manifest: &mut Manifest) -> Result<(), String> {
        let cfg = self.cfg;
        let raw = self.read_source(path)?;
        manifest.source.original_sample_rate_hz = Some(raw.sample_rate_hz);
        manifest.source.original_channel_count = Some(raw.channel_count);

        let base = if cfg.stages.standardize {
            let std = audio::standardize(&raw, cfg.standardize.target_dbfs, &Resampler::default())
                .map_err(|e| format!("standardizing: {e}"))?;
            manifest.source.input_dbfs = Some(std.input_dbfs);
            manifest.source.loudness = Some(std.report);
            if std.report.clipped_sample_count > 0 {
                manifest.flags.insert(Flag::Clipped);
            }
            std.audio
        } else {
            let mono = audio::to_mono(&raw);
            if let Ok(r) = audio::measure_dbfs(&mono) {
                manifest.source.input_dbfs = Some(r.dbfs);
                manifest.source.loudness = Some(r);
            }
            mono
        }
        .quantized();
        manifest.source.duration_s = Some(base.duration_s());
        wav::write_wav(&base, &self.base_path()).map_err(|e| format!("writing standardized audio: {e}"))?;
        manifest.source.standardized_audio = Some("standardized.wav".into());

        let chunks = if cfg.stages.chunk {
            let full = TimeInterval::new(0.0, base.duration_s());
            let payload = self.call("vad", TaskKind::Vad, self.base_payload(&base, full), self.params(0.0)).map_err(|e| format!("vad: {e}"))?;
            let Payload::Vad { hop_s, probs } = payload else { return Err("vad: unexpected payload".into()) };
            let regions = detect_regions(&VadFrameSeries { hop_s, probs }, &cfg.chunk.vad);
            chunk_regions(&regions, cfg.chunk.max_chunk_s)
        } else {
            vec![Chunk { chunk_id: chunk_id(0), interval: TimeInterval::new(0.0, base.duration_s()), forced_cut: false }]
        };

        for chunk in &chunks {
            let (record, regions) = self.process_chunk(&base, chunk)?;
            manifest.chunks.push(record);
            manifest.duplex_regions.extend(regions);
        }
        Ok(())
    }

    fn diarize(&self, base: &AudioBuffer, chunk: &Chunk, flags: &mut BTreeSet<Flag>) -> Vec<SpeakerSegment> {
        let iv = chunk.interval;
        if !self.cfg.stages.diarize {
            return vec![SpeakerSegment { speaker_id: UNDIARIZED.into(), interval: iv, chunk_id: chunk.chunk_id.clone() }];
        }
        let result = self.call("diarize", TaskKind::Diarize, self.base_payload(base, iv), self.params(iv.start_s));
        let segments = match result {
            Ok(Payload::Diarize { segments }) => segments,
            Ok(_) | Err(_) => {
                if let Err(e) = result {
                    log::warn!("{} {}: diarization failed: {e}", self.stem, chunk.chunk_id);
                }
                flags.insert(Flag::DiarizationFailed);
                return Vec::new();
            }
        };
        let mut out: Vec<SpeakerSegment> = segments
            .into_iter()
            .filter_map(|s| {
                let a = (iv.start_s + s.start_s).max(iv.start_s);
                let b = (iv.start_s + s.end_s).min(iv.end_s);
                (b > a).then(|| SpeakerSegment { speaker_id: s.speaker_id, interval: TimeInterval::new(a, b), chunk_id: chunk.chunk_id.clone() })
            })
            .collect();
        out.sort_by(|x, y| {
            x.interval
                .start_s
                .total_cmp(&y.interval.start_s)
                .then(x.interval.end_s.total_cmp(&y.interval.end_s))
                .then(x.speaker_id.cmp(&y.speaker_id))
        });
        out
    }

    fn process_chunk(&self, base: &AudioBuffer, chunk: &Chunk) -> Result<(ChunkRecord, Vec<RegionRecord>), String> {
        let cfg = self.cfg;
        let mut chunk_flags = BTreeSet::new();
        if chunk.forced_cut {
            chunk_flags.insert(Flag::ForcedCut);
        }
        let segments = self.diarize(base, chunk, &mut chunk_flags);
        let timed = TimedAudio { audio: base, origin_s: 0.0 };

        let (resolved, overlaps) = if cfg.stages.overlap_resolve {
            let res = resolve_chunk(&segments, timed, &cfg.overlap, &OverlapBridge { job: self });
            (res.segments, res.overlaps)
        } else {
            let unresolved = find_overlaps(&segments)
                .iter()
                .map(|r| crate::overlap::OverlapRecord {
                    overlap: r.overlap,
                    kind: r.kind,
                    speakers: [segments[r.seg_a].speaker_id.clone(), segments[r.seg_b].speaker_id.clone()],
                    applied: None,
                    similarities: None,
                    cand1_speaker: None,
                    flags: BTreeSet::new(),
                })
                .collect();
            let plain = segments.iter().map(|s| ResolvedSegment { segment: s.clone(), edits: Vec::new(), flags: BTreeSet::new() }).collect();
            (plain, unresolved)
        };

        let mut segs: Vec<SegState> = resolved
            .into_iter()
            .enumerate()
            .map(|(i, r)| SegState {
                id: format!("{}_s{i:03}", chunk.chunk_id),
                audio: render_segment(&r, timed),
                resolved: r,
                music_prob: None,
                audio_rel: None,
                audio_abs: None,
                transcript: None,
                words: Vec::new(),
                caption: None,
            })
            .collect();

        if cfg.stages.bgm {
            self.bgm(base, chunk, &mut segs);
        }
        if cfg.stages.denoise {
            for s in segs.iter_mut().filter(|s| s.alive()) {
                let n = s.audio.frames();
                let r = self.buffer_payload(&s.audio).and_then(|p| self.call("denoise", TaskKind::Denoise, p, self.params(s.interval().start_s)));
                match r {
                    Ok(Payload::Denoise { audio }) => match decode_pcm(&audio) {
                        Ok(buf) => s.audio = fit(buf, n),
                        Err(_) => {
                            s.flags().insert(Flag::DenoiseFailed);
                        }
                    },
                    _ => {
                        s.flags().insert(Flag::DenoiseFailed);
                    }
                }
            }
        }
        for s in segs.iter_mut().filter(|s| s.alive()) {
            let rel = format!("segments/{}.wav", s.id);
            let abs = self.dir.join(&rel);
            wav::write_wav(&s.audio, &abs).map_err(|e| format!("writing {rel}: {e}"))?;
            s.audio_rel = Some(rel);
            s.audio_abs = Some(abs);
        }
        if cfg.stages.asr {
            for s in segs.iter_mut().filter(|s| s.audio_abs.is_some()) {
                self.transcribe(s);
            }
        }
        if cfg.stages.caption {
            let stored: Vec<usize> = (0..segs.len()).filter(|&i| segs[i].audio_abs.is_some()).collect();
            for (k, &i) in stored.iter().enumerate() {
                let ctx_from = k.saturating_sub(cfg.caption.context_segments);
                let context: Vec<AudioPayload> = stored[ctx_from..k]
                    .iter()
                    .map(|&j| {
                        AudioPayload::file(segs[j].audio_abs.as_ref().expect("stored"), TimeInterval::new(0.0, segs[j].audio.duration_s()))
                    })
                    .collect();
                let s = &segs[i];
                let result = self
                    .file_payload(&s.audio, s.audio_abs.as_deref())
                    .and_then(|p| caption_with_context(self.dispatcher, p, &context, self.params(s.interval().start_s)));
                match result {
                    Ok((text, timing)) => {
                        *self.timings.borrow_mut().entry("caption").or_default() += timing;
                        segs[i].caption = Some(text);
                    }
                    Err(e) => {
                        log::warn!("{} {}: caption failed: {e}", self.stem, segs[i].id);
                        segs[i].flags().insert(Flag::CaptionFailed);
                    }
                }
            }
        }

        let regions = if cfg.stages.duplex_select { self.duplex(chunk, &segs, &overlaps)? } else { Vec::new() };

        let record = ChunkRecord {
            chunk_id: chunk.chunk_id.clone(),
            interval: chunk.interval,
            forced_cut: chunk.forced_cut,
            flags: chunk_flags,
            segments: segs
                .into_iter()
                .map(|s| SegmentRecord {
                    segment_id: s.id.clone(),
                    speaker_id: s.resolved.segment.speaker_id.clone(),
                    interval: s.interval(),
                    kept: s.resolved.kept(),
                    flags: s.resolved.flags.clone(),
                    music_prob: s.music_prob,
                    audio: s.audio_rel,
                    transcript: s.transcript,
                    caption: s.caption,
                })
                .collect(),
            overlaps,
        };
        Ok((record, regions))
    }

    fn bgm(&self, base: &AudioBuffer, chunk: &Chunk, segs: &mut [SegState]) {
        let policy = &self.cfg.bgm;
        let mut tags = Vec::new();
        for s in segs.iter_mut().filter(|s| s.alive()) {
            let r = self.buffer_payload(&s.audio).and_then(|p| self.call("bgm", TaskKind::TagAudio, p, self.params(s.interval().start_s)));
            match r {
                Ok(Payload::TagAudio { music_prob }) if (0.0..=1.0).contains(&music_prob) => {
                    s.music_prob = Some(music_prob);
                    tags.push(MusicTag { segment_id: s.id.clone(), music_prob });
                }
                _ => {
                    s.flags().insert(Flag::TaggingFailed);
                }
            }
        }
        let flagged = flag_music(&tags, policy.threshold);
        if flagged.is_empty() {
            return;
        }
        let members: Vec<(String, TimeInterval)> =
            segs.iter_mut().filter(|s| flagged.contains(&s.id)).map(|s| {
                s.resolved.flags.insert(Flag::MusicFlagged);
                (s.id.clone(), s.interval())
            }).collect();
        let mut vocal_base = base.clone();
        let mut failed: BTreeSet<String> = BTreeSet::new();
        for w in plan_windows(&members, chunk.interval, policy) {
            let ids: Vec<&str> = w.members.iter().map(|m| m.segment_id.as_str()).collect();
            let result = self
                .call("bgm", TaskKind::ExtractVocals, self.base_payload(base, w.interval), self.params(w.interval.start_s))
                .and_then(|p| match p {
                    Payload::ExtractVocals { audio } => decode_pcm(&audio),
                    _ => Err(local_error("bad_payload", "expected extracted vocals")),
                })
                .and_then(|vocal| {
                    splice_extracted(TimedAudio { audio: &vocal_base, origin_s: 0.0 }, &w, &vocal)
                        .map_err(|e| local_error("bad_payload", e))
                });
            match result {
                Ok(next) => vocal_base = next,
                Err(e) => {
                    log::warn!("{}: vocal extraction failed for {ids:?}: {e}", self.stem);
                    failed.extend(ids.iter().map(|s| s.to_string()));
                }
            }
            if w.split {
                for s in segs.iter_mut().filter(|s| ids.contains(&s.id.as_str())) {
                    s.flags().insert(Flag::SplitExtraction);
                }
            }
        }
        let timed = TimedAudio { audio: &vocal_base, origin_s: 0.0 };
        for s in segs.iter_mut().filter(|s| flagged.contains(&s.id)) {
            if failed.contains(&s.id) {
                s.flags().insert(Flag::VocalExtractionFailed);
            } else {
                s.audio = render_segment(&s.resolved, timed);
            }
        }
    }

    fn transcribe(&self, s: &mut SegState) {
        let cfg = self.cfg;
        let iv = s.interval();
        let mut results = BTreeMap::new();
        for model in &cfg.asr.models {
            let mut params = self.params(iv.start_s);
            params.insert("model_id".into(), json!(model));
            params.insert("speaker_id".into(), json!(s.resolved.segment.speaker_id));
            let r = self
                .file_payload(&s.audio, s.audio_abs.as_deref())
                .and_then(|p| self.call("asr", TaskKind::Asr, p, params))
                .and_then(|p| match p {
                    Payload::Asr { words, .. } => Ok(words),
                    _ => Err(local_error("bad_payload", "expected asr words")),
                });
            results.insert(model.clone(), r);
        }
        let out = combine(results, &cfg.asr.primary, TimeInterval::new(0.0, iv.duration()), &cfg.asr.ensemble);
        s.resolved.flags.extend(out.flags.iter().copied());
        let words: Vec<WordToken> = out
            .words
            .into_iter()
            .map(|mut w| {
                w.interval = w.interval.map(|i| i.shift(iv.start_s));
                w
            })
            .collect();
        s.transcript = Some(TranscriptRecord {
            primary_model: out.primary_model,
            text: words.iter().map(|w| w.surface.as_str()).collect::<Vec<_>>().join(" "),
            words: words.iter().map(word_record).collect(),
            repetition: out.repetition,
        });
        s.words = words;
    }

    fn duplex(&self, chunk: &Chunk, segs: &[SegState], overlaps: &[crate::overlap::OverlapRecord]) -> Result<Vec<RegionRecord>, String> {
        let cfg = self.cfg;
        let live: Vec<&SegState> = segs.iter().filter(|s| s.alive()).collect();
        let hulls: Vec<SpeakerSegment> = live
            .iter()
            .map(|s| SpeakerSegment {
                speaker_id: s.resolved.segment.speaker_id.clone(),
                interval: s.resolved.span().expect("alive"),
                chunk_id: chunk.chunk_id.clone(),
            })
            .collect();
        let word_counts: Vec<usize> = live.iter().map(|s| s.words.len()).collect();
        let turns = build_turns(&hulls, &word_counts, cfg.duplex.merge_gap_s);
        let unresolved: Vec<TimeInterval> = overlaps
            .iter()
            .filter(|o| o.applied.is_none())
            .map(|o| o.overlap)
            .collect();
        let sr = crate::audio::STANDARD_SAMPLE_RATE_HZ;
        let mut out = Vec::new();
        for (k, region) in select_regions(&turns, &cfg.duplex).iter().enumerate() {
            let region_id = format!("{}_r{k:02}", chunk.chunk_id);
            let members: Vec<usize> = region.turns(&turns).iter().flat_map(|t| t.segment_refs.iter().copied()).collect();
            let mut record = RegionRecord {
                region_id: region_id.clone(),
                chunk_id: chunk.chunk_id.clone(),
                interval: region.interval,
                left_speaker_id: region.left_speaker_id.clone(),
                right_speaker_id: region.right_speaker_id.clone(),
                turn_count: region.end_turn - region.first_turn,
                segment_ids: members.iter().map(|&i| live[i].id.clone()).collect(),
                audio: None,
                words: None,
                flags: BTreeSet::new(),
            };
            if unresolved.iter().any(|u| u.intersect(&region.interval).is_some_and(|x| x.duration() > 0.0)) {
                record.flags.insert(Flag::RegionDroppedUnresolved);
                out.push(record);
                continue;
            }
            let sources: Vec<StereoSource> = members
                .iter()
                .map(|&i| StereoSource {
                    speaker_id: live[i].resolved.segment.speaker_id.clone(),
                    interval: live[i].interval(),
                    audio: live[i].audio.clone(),
                    words: live[i].words.clone(),
                })
                .collect();
            let rate = live.first().map_or(sr, |s| s.audio.sample_rate_hz);
            let stereo = build_stereo(region, &sources, rate);
            let wav_rel = format!("duplex/{region_id}.wav");
            wav::write_wav(&stereo.to_stereo(), &self.dir.join(&wav_rel)).map_err(|e| format!("writing {wav_rel}: {e}"))?;
            let rel_words = |ws: &[WordToken]| -> Vec<WordRecord> {
                ws.iter().map(|w| {
                    let r = word_record(w);
                    WordRecord { word: r.word, start_s: r.start_s - region.interval.start_s, end_s: r.end_s - region.interval.start_s }
                }).collect()
            };
            let streams = DuplexWords {
                region_id: region_id.clone(),
                offset_s: region.interval.start_s,
                left_speaker_id: stereo.left_speaker_id.clone(),
                right_speaker_id: stereo.right_speaker_id.clone(),
                left: rel_words(&stereo.left_words),
                right: rel_words(&stereo.right_words),
            };
            let json_rel = format!("duplex/{region_id}.json");
            let mut text = serde_json::to_string_pretty(&streams).expect("word streams serialize");
            text.push('\n');
            write_atomic(&self.dir.join(&json_rel), text.as_bytes()).map_err(|e| format!("writing {json_rel}: {e}"))?;
            record.audio = Some(wav_rel);
            record.words = Some(json_rel);
            out.push(record);
        }
        Ok(out)
    }
}

fn word_record(w: &WordToken) -> WordRecord {
    let iv = w.interval.unwrap_or(TimeInterval::new(0.0, 0.0));
    WordRecord { word: w.surface.clone(), start_s: iv.start_s, end_s: iv.end_s }
}

/// Caption one segment, sending up to the given preceding segments as
/// context references in chronological order. Returns the text and the
/// backend-reported processing time.
pub fn caption_with_context(
    dispatcher: &Dispatcher,
    audio: AudioPayload,
    context: &[AudioPayload],
    mut params: Params,
) -> Result<(String, f64), DispatchError> {
    params.insert("context".into(), serde_json::to_value(context).expect("payloads serialize"));
    match dispatcher.request(TaskKind::Caption, audio, params)? {
        (Payload::Caption { text }, timing) => Ok((text, timing)),
        _ => Err(local_error("bad_payload", "expected caption text")),
    }
}

struct OverlapBridge<'a, 'b> {
    job: &'a FileJob<'b>,
}

impl OverlapBackends for OverlapBridge<'_, '_> {
    fn separate(&self, mixture: &AudioBuffer, start_s: f64) -> Result<[AudioBuffer; 2], DispatchError> {
        let payload = self.job.buffer_payload(mixture)?;
        match self.job.call("overlap_resolve", TaskKind::Separate2, payload, self.job.params(start_s))? {
            Payload::Separate2 { sources } if sources.len() == 2 => Ok([decode_pcm(&sources[0])?, decode_pcm(&sources[1])?]),
            _ => Err(local_error("bad_payload", "expected two separated sources")),
        }
    }

    fn embed(&self, audio: &AudioBuffer, start_s: f64) -> Result<Vec<f64>, DispatchError> {
        let payload = self.job.buffer_payload(audio)?;
        match self.job.call("overlap_resolve", TaskKind::Embed, payload, self.job.params(start_s))? {
            Payload::Embed { vector } => Ok(vector),
            _ => Err(local_error("bad_payload", "expected an embedding")),
        }
    }
}
