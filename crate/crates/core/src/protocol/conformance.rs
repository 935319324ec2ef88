//! Protocol conformance checks runnable against any [`Backend`]: an
//! in-process mock, a spawned worker or a TCP endpoint.
//!
//! Only protocol behavior and payload shapes are checked, never model
//! quality.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use super::dispatch::{dispatch, Backend, DispatchError};
use super::{decode, encode, AudioPayload, Frame, Outcome, Params, Payload, TaskKind, TaskRequest, TaskResponse};
use crate::audio::AudioBuffer;
use crate::fixtures::Fixture;

/// Audio and params sent with every conformance request.
#[derive(Debug, Clone)]
pub struct Probe {
    pub audio: AudioBuffer,
    pub params: Params,
}

impl Probe {
    /// The first `max_s` seconds of a fixture, addressed for the mocks.
    pub fn from_fixture(fx: &Fixture, max_s: f64) -> Self {
        let audio = fx.mixture.slice_s(0.0, max_s.min(fx.mixture.duration_s()));
        let mut params = Params::new();
        params.insert("source_id".into(), fx.meta.stem.clone().into());
        params.insert("offset_s".into(), 0.0.into());
        if let Some(seg) = fx.rttm.first() {
            params.insert("speaker_id".into(), seg.speaker_id.clone().into());
        }
        Self { audio, params }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub task_kind: Option<TaskKind>,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
    /// Responses that failed to parse as frames.
    pub frame_errors: usize,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.frame_errors == 0 && self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{} {}{}", if c.passed { "PASS" } else { "FAIL" }, c.name, if c.detail.is_empty() { String::new() } else { format!(": {}", c.detail) });
        }
        let _ = writeln!(out, "frame errors: {}", self.frame_errors);
        out
    }
}

const UNKNOWN_MODEL: &str = "__conformance_unknown_model__";

/// Relative and absolute slack on returned audio length.
fn length_ok(got: usize, want: usize) -> bool {
    got.abs_diff(want) as f64 <= 0.01 * want as f64 + 1.0
}

/// Shape contract of one payload for a request over `dur_s` of audio.
pub fn check_shape(payload: &Payload, input: &AudioBuffer, model_id: Option<&str>) -> Result<(), String> {
    let dur = input.duration_s();
    let tol = 1e-6;
    let audio_len = |pcm: &super::PcmData, what: &str| -> Result<(), String> {
        let a = pcm.decode().map_err(|e| format!("{what}: {e}"))?;
        if a.sample_rate_hz == 0 || !length_ok(a.frames() * input.sample_rate_hz as usize / a.sample_rate_hz as usize, input.frames()) {
            return Err(format!("{what}: {} frames at {} Hz for {} input frames", a.frames(), a.sample_rate_hz, input.frames()));
        }
        Ok(())
    };
    match payload {
        Payload::Vad { hop_s, probs } => {
            if !(hop_s.is_finite() && *hop_s > 0.0) {
                return Err(format!("hop_s {hop_s}"));
            }
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err("probability outside [0, 1]".into());
            }
            if (probs.len() as f64 * hop_s - dur).abs() > hop_s + tol {
                return Err(format!("{} frames of {hop_s} s for {dur} s", probs.len()));
            }
        }
        Payload::Diarize { segments } => {
            for s in segments {
                if s.speaker_id.is_empty() || !(s.start_s >= -tol && s.start_s < s.end_s && s.end_s <= dur + tol) {
                    return Err(format!("bad segment {s:?}"));
                }
            }
        }
        Payload::Separate2 { sources } => {
            if sources.len() != 2 {
                return Err(format!("{} sources", sources.len()));
            }
            for (i, s) in sources.iter().enumerate() {
                audio_len(s, &format!("source {i}"))?;
            }
        }
        Payload::Embed { vector } => {
            if vector.is_empty() || vector.iter().any(|x| !x.is_finite()) || vector.iter().all(|x| *x == 0.0) {
                return Err("empty, non-finite or zero vector".into());
            }
        }
        Payload::TagAudio { music_prob } => {
            if !(0.0..=1.0).contains(music_prob) {
                return Err(format!("music_prob {music_prob}"));
            }
        }
        Payload::ExtractVocals { audio } | Payload::Denoise { audio } => audio_len(audio, "audio")?,
        Payload::Asr { model_id: got, words } => {
            if let Some(want) = model_id {
                if got != want {
                    return Err(format!("model_id {got} for request {want}"));
                }
            }
            let mut last = f64::NEG_INFINITY;
            for w in words {
                if w.surface.trim().is_empty() {
                    return Err("empty word".into());
                }
                if let (Some(a), Some(b)) = (w.start_s, w.end_s) {
                    if !(a >= -tol && a <= b && b <= dur + tol) {
                        return Err(format!("word {:?} outside [0, {dur}]", w.surface));
                    }
                    if a + tol < last {
                        return Err("word start times decrease".into());
                    }
                    last = a;
                } else if w.start_s.is_some() != w.end_s.is_some() {
                    return Err(format!("word {:?} has only one timestamp", w.surface));
                }
            }
        }
        Payload::Caption { text } => {
            if text.trim().is_empty() {
                return Err("empty caption".into());
            }
        }
    }
    Ok(())
}

fn frame_round_trip(resp: &TaskResponse) -> Result<(), String> {
    let bytes = encode(&Frame::Response(resp.clone()));
    let back = decode(&bytes).map_err(|e| e.to_string())?;
    if encode(&back) != bytes {
        return Err("re-encoded frame differs".into());
    }
    Ok(())
}

struct Runner {
    backend: Arc<dyn Backend>,
    deadline: Duration,
    checks: Vec<CheckResult>,
    frame_errors: usize,
    next: usize,
}

impl Runner {
    fn record(&mut self, name: String, task_kind: Option<TaskKind>, result: Result<(), String>) {
        let (passed, detail) = match result {
            Ok(()) => (true, String::new()),
            Err(d) => (false, d),
        };
        self.checks.push(CheckResult { name, task_kind, passed, detail });
    }

    fn request(&mut self, kind: TaskKind, probe: &Probe, model: Option<&str>) -> TaskRequest {
        self.next += 1;
        let mut params = probe.params.clone();
        if let Some(m) = model {
            params.insert("model_id".into(), m.into());
        }
        TaskRequest::new(format!("conf-{}", self.next), kind, AudioPayload::inline(&probe.audio), params)
    }

    fn send(&mut self, req: TaskRequest, deadline: Duration) -> Result<TaskResponse, String> {
        dispatch(req, &self.backend, deadline).map_err(|e| {
            if matches!(e, DispatchError::Protocol(_)) {
                self.frame_errors += 1;
                format!("frame error: {e}")
            } else {
                e.to_string()
            }
        })
    }
}

pub fn run_conformance(backend: Arc<dyn Backend>, probe: &Probe, deadline: Duration) -> ConformanceReport {
    let mut r = Runner { backend, deadline, checks: Vec::new(), frame_errors: 0, next: 0 };
    let caps = r.backend.capabilities();
    let mut kinds: Vec<TaskKind> = caps.iter().map(|c| c.task_kind).collect();
    kinds.sort();
    let unique = kinds.windows(2).all(|w| w[0] != w[1]);
    r.record(
        "capabilities".into(),
        None,
        if caps.is_empty() {
            Err("no capabilities advertised".into())
        } else if !unique {
            Err("task kind advertised twice".into())
        } else {
            Ok(())
        },
    );
    let asr_model = caps.iter().find(|c| c.task_kind == TaskKind::Asr).and_then(|c| c.model_ids.first().cloned());

    for &kind in &kinds {
        let model = (kind == TaskKind::Asr).then_some(asr_model.as_deref()).flatten();
        let req = r.request(kind, probe, model);
        let result = r.send(req, r.deadline).and_then(|resp| {
            frame_round_trip(&resp)?;
            match &resp.outcome {
                Outcome::Ok(p) => check_shape(p, &probe.audio.quantized(), model),
                Outcome::Error(e) => Err(format!("error outcome {}: {}", e.code, e.message)),
            }
        });
        r.record(format!("payload_shape/{kind}"), Some(kind), result);
    }

    if let Some(&kind) = kinds.first() {
        let model = (kind == TaskKind::Asr).then_some(asr_model.as_deref()).flatten();
        let reqs: Vec<TaskRequest> = (0..16).map(|_| r.request(kind, probe, model)).collect();
        let handles: Vec<_> = reqs
            .into_iter()
            .map(|req| {
                let b = Arc::clone(&r.backend);
                let deadline = r.deadline;
                std::thread::spawn(move || dispatch(req, &b, deadline))
            })
            .collect();
        let mut result = Ok(());
        for h in handles {
            match h.join() {
                Ok(Ok(_)) => {}
                Ok(Err(e)) => {
                    if matches!(e, DispatchError::Protocol(_)) {
                        r.frame_errors += 1;
                    }
                    result = Err(e.to_string());
                }
                Err(_) => result = Err("request thread panicked".into()),
            }
        }
        r.record("id_matching".into(), Some(kind), result);

        let req = r.request(kind, probe, model);
        let timed = match dispatch(req, &r.backend, Duration::ZERO) {
            Ok(_) | Err(DispatchError::Timeout { .. }) => Ok(()),
            Err(e) => Err(format!("zero deadline gave {e} instead of a timeout")),
        };
        let follow_up = r.request(kind, probe, model);
        let after = timed.and_then(|_| r.send(follow_up, r.deadline).map(|_| ()));
        r.record("timeout_then_recover".into(), Some(kind), after);
    }

    if asr_model.is_some() {
        let req = r.request(TaskKind::Asr, probe, Some(UNKNOWN_MODEL));
        let result = match r.backend.call(&req) {
            Ok(resp) if resp.request_id != req.request_id => Err("response id mismatch".into()),
            Ok(resp) => match resp.outcome {
                Outcome::Error(_) => Ok(()),
                Outcome::Ok(_) => Err("unknown model answered successfully".into()),
            },
            Err(DispatchError::Protocol(e)) => {
                r.frame_errors += 1;
                Err(format!("frame error: {e}"))
            }
            Err(DispatchError::CapabilityMismatch { .. } | DispatchError::Backend(_)) => Ok(()),
            Err(e) => Err(e.to_string()),
        };
        r.record("unknown_model_rejected".into(), Some(TaskKind::Asr), result);
    }

    ConformanceReport { checks: r.checks, frame_errors: r.frame_errors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::synth::{synth_conversation, ConversationSpec};
    use crate::fixtures::FixtureStore;
    use crate::protocol::dispatch::StreamConnection;
    use crate::protocol::mock::{MockBackend, MockConfig};
    use crate::protocol::serve::serve_stream;
    use std::io::{BufReader, Write};
    use std::net::TcpListener;

    fn mock_and_probe() -> (Arc<MockBackend>, Probe) {
        let fx = synth_conversation(&ConversationSpec::new("probe", 10.0, 2, 9));
        let probe = Probe::from_fixture(&fx, 10.0);
        let mut store = FixtureStore::default();
        store.insert(fx);
        (Arc::new(MockBackend::new(Arc::new(store), MockConfig::default())), probe)
    }

    /// Cuts every frame after the first (the hello) in half.
    struct Truncating<W: Write> {
        inner: W,
        frames: usize,
        line: Vec<u8>,
    }

    impl<W: Write> Write for Truncating<W> {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            for &b in buf {
                self.line.push(b);
                if b == b'\n' {
                    let keep = if self.frames == 0 { self.line.len() } else { self.line.len() / 2 };
                    self.inner.write_all(&self.line[..keep])?;
                    if keep < self.line.len() {
                        self.inner.write_all(b"\n")?;
                    }
                    self.line.clear();
                    self.frames += 1;
                }
            }
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            self.inner.flush()
        }
    }

    fn serve_tcp_once(backend: Arc<MockBackend>, truncate: bool) -> std::net::SocketAddr {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let reader = BufReader::new(stream.try_clone().unwrap());
            if truncate {
                let _ = serve_stream(&*backend, "faulty", reader, Truncating { inner: stream, frames: 0, line: Vec::new() });
            } else {
                let _ = serve_stream(&*backend, "mock", reader, stream);
            }
        });
        addr
    }

    #[test]
    fn mock_in_process_passes() {
        let (mock, probe) = mock_and_probe();
        let report = run_conformance(mock, &probe, Duration::from_secs(30));
        assert!(report.passed(), "{}", report.render());
        assert_eq!(report.checks.iter().filter(|c| c.name.starts_with("payload_shape/")).count(), 9);
    }

    #[test]
    fn mock_over_the_wire_passes() {
        let (mock, probe) = mock_and_probe();
        let conn = StreamConnection::connect_tcp(serve_tcp_once(mock, false)).unwrap();
        assert_eq!(conn.hello().worker, "mock");
        let report = run_conformance(Arc::new(conn), &probe, Duration::from_secs(30));
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn truncated_frames_detected() {
        let (mock, probe) = mock_and_probe();
        let conn = StreamConnection::connect_tcp(serve_tcp_once(mock, true)).unwrap();
        let report = run_conformance(Arc::new(conn), &probe, Duration::from_secs(30));
        assert!(!report.passed());
        assert!(report.frame_errors > 0);
        assert!(report.render().contains("frame error"));
    }
}
