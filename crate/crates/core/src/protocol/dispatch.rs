//! Request dispatch: connection pools per task kind, deadlines, retries,
//! request-id matching and a dispatch log.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::{
    decode, encode, AudioPayload, Capability, ErrorBody, Frame, Hello, Outcome, Params, Payload, ProtocolError, TaskKind,
    TaskRequest, TaskResponse,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DispatchError {
    #[error("{kind} request {request_id} timed out after {deadline_ms} ms")]
    Timeout { kind: TaskKind, request_id: String, deadline_ms: u128 },
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("no backend advertises {kind}{}", model.as_ref().map(|m| format!(" model {m}")).unwrap_or_default())]
    CapabilityMismatch { kind: TaskKind, model: Option<String> },
    #[error("backend error {}: {}", .0.code, .0.message)]
    Backend(ErrorBody),
    #[error("response id {got} does not match request {expected}")]
    CrossedResponse { expected: String, got: String },
    #[error("payload kind {got} does not match request kind {expected}")]
    WrongPayload { expected: TaskKind, got: TaskKind },
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
}

impl DispatchError {
    fn retryable(&self) -> bool {
        matches!(self, DispatchError::Timeout { .. } | DispatchError::ConnectionLost(_))
    }
}

/// Anything that can answer protocol requests.
///
/// Implementations may be in-process (mock backends) or a connection to an
/// external worker. `call` blocks until the response arrives.
pub trait Backend: Send + Sync {
    fn capabilities(&self) -> Vec<Capability>;
    fn call(&self, request: &TaskRequest) -> Result<TaskResponse, DispatchError>;

    fn supports(&self, kind: TaskKind, model: Option<&str>) -> bool {
        self.capabilities().iter().any(|c| {
            c.task_kind == kind && model.is_none_or(|m| c.model_ids.is_empty() || c.model_ids.iter().any(|x| x == m))
        })
    }
}

/// Send one request and wait at most `deadline` for a well-formed answer.
pub fn dispatch(request: TaskRequest, backend: &Arc<dyn Backend>, deadline: Duration) -> Result<TaskResponse, DispatchError> {
    let model = request.param_str("model_id").map(str::to_owned);
    if !backend.supports(request.task_kind, model.as_deref()) {
        return Err(DispatchError::CapabilityMismatch { kind: request.task_kind, model });
    }
    let (tx, rx) = mpsc::channel();
    let worker = Arc::clone(backend);
    let kind = request.task_kind;
    let id = request.request_id.clone();
    std::thread::spawn(move || {
        let _ = tx.send(worker.call(&request));
    });
    let response = match rx.recv_timeout(deadline) {
        Ok(r) => r?,
        Err(mpsc::RecvTimeoutError::Timeout) => {
            return Err(DispatchError::Timeout { kind, request_id: id, deadline_ms: deadline.as_millis() })
        }
        Err(mpsc::RecvTimeoutError::Disconnected) => {
            return Err(DispatchError::ConnectionLost("backend thread ended without a response".into()))
        }
    };
    if response.request_id != id {
        return Err(DispatchError::CrossedResponse { expected: id, got: response.request_id });
    }
    if let Outcome::Ok(payload) = &response.outcome {
        if payload.kind() != kind {
            return Err(DispatchError::WrongPayload { expected: kind, got: payload.kind() });
        }
    }
    Ok(response)
}

/// One line of the dispatch log.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRecord {
    pub request_id: String,
    pub task_kind: TaskKind,
    pub model_id: Option<String>,
    /// Backend-reported processing time.
    pub timing_s: f64,
    pub wall_s: f64,
    pub ok: bool,
}

struct Pool {
    members: Vec<Arc<dyn Backend>>,
    next: AtomicUsize,
}

/// Routes requests to pooled backends by task kind.
pub struct Dispatcher {
    pools: BTreeMap<TaskKind, Pool>,
    deadline: Duration,
    retries: u32,
    next_id: AtomicU64,
    log: Mutex<Vec<DispatchRecord>>,
}

impl Dispatcher {
    pub fn new(deadline: Duration, retries: u32) -> Self {
        Self { pools: BTreeMap::new(), deadline, retries, next_id: AtomicU64::new(0), log: Mutex::new(Vec::new()) }
    }

    /// Register a backend for every task kind it advertises.
    pub fn add_backend(&mut self, backend: Arc<dyn Backend>) {
        let kinds: Vec<TaskKind> = backend.capabilities().iter().map(|c| c.task_kind).collect();
        for kind in kinds {
            self.add_backend_for(kind, Arc::clone(&backend));
        }
    }

    pub fn add_backend_for(&mut self, kind: TaskKind, backend: Arc<dyn Backend>) {
        self.pools
            .entry(kind)
            .or_insert_with(|| Pool { members: Vec::new(), next: AtomicUsize::new(0) })
            .members
            .push(backend);
    }

    pub fn supports(&self, kind: TaskKind, model: Option<&str>) -> bool {
        self.pools.get(&kind).is_some_and(|p| p.members.iter().any(|b| b.supports(kind, model)))
    }

    pub fn capabilities(&self) -> Vec<Capability> {
        let mut by_kind: BTreeMap<TaskKind, Vec<String>> = BTreeMap::new();
        for pool in self.pools.values() {
            for member in &pool.members {
                for cap in member.capabilities() {
                    let models = by_kind.entry(cap.task_kind).or_default();
                    for m in cap.model_ids {
                        if !models.contains(&m) {
                            models.push(m);
                        }
                    }
                }
            }
        }
        by_kind.into_iter().map(|(task_kind, model_ids)| Capability { task_kind, model_ids }).collect()
    }

    fn next_request_id(&self, kind: TaskKind) -> String {
        format!("{}-{}", kind.as_str(), self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    /// Build, send and validate a request; returns the payload and the
    /// backend-reported processing time.
    pub fn request(&self, kind: TaskKind, audio: AudioPayload, params: Params) -> Result<(Payload, f64), DispatchError> {
        let model = params.get("model_id").and_then(|v| v.as_str()).map(str::to_owned);
        let pool = self
            .pools
            .get(&kind)
            .ok_or_else(|| DispatchError::CapabilityMismatch { kind, model: model.clone() })?;
        let candidates: Vec<&Arc<dyn Backend>> =
            pool.members.iter().filter(|b| b.supports(kind, model.as_deref())).collect();
        if candidates.is_empty() {
            return Err(DispatchError::CapabilityMismatch { kind, model });
        }
        let request = TaskRequest::new(self.next_request_id(kind), kind, audio, params);
        let mut attempt = 0;
        loop {
            let slot = pool.next.fetch_add(1, Ordering::Relaxed) % candidates.len();
            let started = Instant::now();
            let result = dispatch(request.clone(), candidates[slot], self.deadline);
            let wall_s = started.elapsed().as_secs_f64();
            let (timing_s, ok) = match &result {
                Ok(r) => (r.timing_s, matches!(r.outcome, Outcome::Ok(_))),
                Err(_) => (0.0, false),
            };
            self.log.lock().unwrap().push(DispatchRecord {
                request_id: request.request_id.clone(),
                task_kind: kind,
                model_id: model.clone(),
                timing_s,
                wall_s,
                ok,
            });
            match result {
                Ok(resp) => {
                    return match resp.outcome {
                        Outcome::Ok(payload) => Ok((payload, resp.timing_s)),
                        Outcome::Error(body) => Err(DispatchError::Backend(body)),
                    }
                }
                Err(e) if e.retryable() && attempt < self.retries => {
                    log::warn!("retrying {}: {e}", request.request_id);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn log(&self) -> Vec<DispatchRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn dispatched_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }
}

/// A framed connection to an external worker over any byte stream.
///
/// Processes one request at a time; concurrent callers queue on the lock.
pub struct StreamConnection {
    io: Mutex<(Box<dyn BufRead + Send>, Box<dyn Write + Send>)>,
    hello: Hello,
    _child: Option<Mutex<Child>>,
}

impl StreamConnection {
    /// Read the worker's `hello` and wrap the stream.
    pub fn handshake(reader: Box<dyn BufRead + Send>, writer: Box<dyn Write + Send>) -> Result<Self, DispatchError> {
        let mut reader = reader;
        let frame = read_frame(&mut *reader)?;
        match frame {
            Frame::Hello(hello) => Ok(Self { io: Mutex::new((reader, writer)), hello, _child: None }),
            _ => Err(DispatchError::ConnectionLost("worker did not open with hello".into())),
        }
    }

    pub fn connect_tcp(addr: impl ToSocketAddrs) -> Result<Self, DispatchError> {
        let stream = TcpStream::connect(addr).map_err(|e| DispatchError::ConnectionLost(e.to_string()))?;
        let read_half = stream.try_clone().map_err(|e| DispatchError::ConnectionLost(e.to_string()))?;
        Self::handshake(Box::new(BufReader::new(read_half)), Box::new(stream))
    }

    /// Spawn `program args...` and speak the protocol over its stdio.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, DispatchError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| DispatchError::ConnectionLost(format!("spawn {program}: {e}")))?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout: ChildStdout = child.stdout.take().expect("piped stdout");
        let mut conn = Self::handshake(Box::new(BufReader::new(stdout)), Box::new(stdin))?;
        conn._child = Some(Mutex::new(child));
        Ok(conn)
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }
}

fn read_frame(reader: &mut dyn BufRead) -> Result<Frame, DispatchError> {
    let mut line = Vec::new();
    let n = reader
        .read_until(b'\n', &mut line)
        .map_err(|e| DispatchError::ConnectionLost(e.to_string()))?;
    if n == 0 {
        return Err(DispatchError::ConnectionLost("end of stream".into()));
    }
    Ok(decode(&line)?)
}

impl Backend for StreamConnection {
    fn capabilities(&self) -> Vec<Capability> {
        self.hello.capabilities.clone()
    }

    fn call(&self, request: &TaskRequest) -> Result<TaskResponse, DispatchError> {
        let mut io = self.io.lock().unwrap_or_else(|p| p.into_inner());
        let (reader, writer) = &mut *io;
        writer
            .write_all(&encode(&Frame::Request(request.clone())))
            .and_then(|_| writer.flush())
            .map_err(|e| DispatchError::ConnectionLost(e.to_string()))?;
        match read_frame(&mut **reader)? {
            Frame::Response(resp) => Ok(resp),
            other => Err(DispatchError::ConnectionLost(format!("unexpected frame {other:?}"))),
        }
    }
}

impl Drop for StreamConnection {
    fn drop(&mut self) {
        if let Some(child) = &self._child {
            let mut child = child.lock().unwrap_or_else(|p| p.into_inner());
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Adapter so a plain byte reader can be used where `BufRead` is expected.
pub fn buffered<R: Read + Send + 'static>(r: R) -> Box<dyn BufRead + Send> {
    Box::new(BufReader::new(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::AudioBuffer;
    use crate::protocol::Payload;

    struct Echo {
        delay: Duration,
    }

    impl Backend for Echo {
        fn capabilities(&self) -> Vec<Capability> {
            vec![Capability { task_kind: TaskKind::Caption, model_ids: vec![] }]
        }
        fn call(&self, request: &TaskRequest) -> Result<TaskResponse, DispatchError> {
            std::thread::sleep(self.delay);
            Ok(TaskResponse::ok(&request.request_id, Payload::Caption { text: format!("echo {}", request.request_id) }, 0.5))
        }
    }

    fn tiny() -> AudioPayload {
        AudioPayload::inline(&AudioBuffer::mono(vec![0.0; 16], 16000))
    }

    #[test]
    fn echo_payload() {
        let b: Arc<dyn Backend> = Arc::new(Echo { delay: Duration::ZERO });
        let req = TaskRequest::new("q1", TaskKind::Caption, tiny(), Params::new());
        let resp = dispatch(req, &b, Duration::from_secs(5)).unwrap();
        assert_eq!(resp.outcome, Outcome::Ok(Payload::Caption { text: "echo q1".into() }));
    }

    #[test]
    fn slow_backend_times_out() {
        let b: Arc<dyn Backend> = Arc::new(Echo { delay: Duration::from_millis(200) });
        let req = TaskRequest::new("q1", TaskKind::Caption, tiny(), Params::new());
        let err = dispatch(req, &b, Duration::from_millis(1)).unwrap_err();
        assert!(matches!(err, DispatchError::Timeout { .. }));
    }

    #[test]
    fn capability_mismatch() {
        let b: Arc<dyn Backend> = Arc::new(Echo { delay: Duration::ZERO });
        let req = TaskRequest::new("q1", TaskKind::Asr, tiny(), Params::new());
        assert!(matches!(dispatch(req, &b, Duration::from_secs(1)), Err(DispatchError::CapabilityMismatch { .. })));
        let d = Dispatcher::new(Duration::from_secs(1), 1);
        assert!(matches!(d.request(TaskKind::Vad, tiny(), Params::new()), Err(DispatchError::CapabilityMismatch { .. })));
    }

    #[test]
    fn retry_logged_on_timeout() {
        let mut d = Dispatcher::new(Duration::from_millis(1), 1);
        d.add_backend(Arc::new(Echo { delay: Duration::from_millis(100) }));
        assert!(d.request(TaskKind::Caption, tiny(), Params::new()).is_err());
        assert_eq!(d.dispatched_count(), 2);
    }

    #[test]
    fn concurrent_requests_never_cross() {
        let mut d = Dispatcher::new(Duration::from_secs(10), 0);
        for _ in 0..3 {
            d.add_backend(Arc::new(Echo { delay: Duration::from_millis(1) }));
        }
        let d = Arc::new(d);
        let handles: Vec<_> = (0..100)
            .map(|_| {
                let d = Arc::clone(&d);
                std::thread::spawn(move || d.request(TaskKind::Caption, tiny(), Params::new()).unwrap())
            })
            .collect();
        let mut texts: Vec<String> = handles
            .into_iter()
            .map(|h| match h.join().unwrap().0 {
                Payload::Caption { text } => text,
                _ => unreachable!(),
            })
            .collect();
        let log = d.log();
        assert_eq!(log.len(), 100);
        let mut ids: Vec<String> = log.iter().map(|r| format!("echo {}", r.request_id)).collect();
        texts.sort();
        ids.sort();
        assert_eq!(texts, ids);
    }
}
