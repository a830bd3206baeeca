//! JSON-lines subprocess protocol for external base classifiers.
//!
//! The engine writes one JSON object per line to the child's stdin and reads
//! one per line from its stdout. Every frame carries a `type` tag:
//!
//! ```text
//! -> {"type":"hello","version":1}
//! <- {"type":"hello_ok","num_classes":4}
//! -> {"type":"infer","id":0,"shape":[2,3],"data_b64":"..."}   f32 LE, row-major
//! <- {"type":"labels","id":0,"labels":[1,3]}
//! -> {"type":"shutdown"}
//! ```
//!
//! A child may answer `{"type":"error","id":..,"message":..}` to any request.
//! Up to [`MAX_OUTSTANDING`] infer requests are in flight at once and
//! responses may arrive in any order; they are matched by `id`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::ClassifierError;
use crate::smoothing::BaseClassifier;

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_OUTSTANDING: usize = 4;
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
pub const SHUTDOWN_TIMEOUT: Duration = Duration::from_secs(5);

const STDERR_TAIL_BYTES: usize = 4096;

/// Engine-to-child frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Hello { version: u32 },
    Infer { id: u64, shape: Vec<u32>, data_b64: String },
    Shutdown {},
}

/// Child-to-engine frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Response {
    HelloOk { num_classes: u32 },
    Labels { id: u64, labels: Vec<u32> },
    Error { id: Option<u64>, message: String },
}

/// Base64 of `values` as f32 little-endian.
pub fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f32(data_b64: &str) -> Result<Vec<f32>, String> {
    let bytes = B64.decode(data_b64).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} payload bytes is not a whole number of f32", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn to_line<T: Serialize>(frame: &T) -> String {
    let mut s = serde_json::to_string(frame).expect("frames serialize");
    s.push('\n');
    s
}

/// Answers frames from `input` on `output` until a shutdown frame or end of
/// input. `classify` maps a row-major `rows x cols` batch to one label per row.
///
/// A line that is not a valid request is answered with an error frame when its
/// `id` can be recovered; otherwise `serve` returns the error, and a server
/// binary should exit with status 2.
pub fn serve<R, W, F>(input: R, mut output: W, num_classes: u32, mut classify: F) -> Result<(), String>
where
    R: BufRead,
    W: Write,
    F: FnMut(&[f32], usize, usize) -> Result<Vec<u32>, String>,
{
    let send = |frame: &Response, output: &mut W| -> Result<(), String> {
        output
            .write_all(to_line(frame).as_bytes())
            .and_then(|_| output.flush())
            .map_err(|e| format!("write failed: {e}"))
    };
    for line in input.lines() {
        let line = line.map_err(|e| format!("read failed: {e}"))?;
        if line.trim().is_empty() {
            continue;
        }
        let request: Request = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|id| id.as_u64()));
                match id {
                    Some(id) => {
                        send(
                            &Response::Error {
                                id: Some(id),
                                message: format!("malformed request: {e}"),
                            },
                            &mut output,
                        )?;
                        continue;
                    }
                    None => return Err(format!("malformed frame: {e}")),
                }
            }
        };
        match request {
            Request::Hello { version } if version == PROTOCOL_VERSION => {
                send(&Response::HelloOk { num_classes }, &mut output)?;
            }
            Request::Hello { version } => {
                send(
                    &Response::Error {
                        id: None,
                        message: format!("unsupported protocol version {version}"),
                    },
                    &mut output,
                )?;
            }
            Request::Infer { id, shape, data_b64 } => {
                let reply = decode_f32(&data_b64)
                    .and_then(|data| {
                        let (rows, cols) = match shape.as_slice() {
                            [r, c] => (*r as usize, *c as usize),
                            other => return Err(format!("shape must be [rows, cols], got {other:?}")),
                        };
                        if rows * cols != data.len() {
                            return Err(format!("shape {shape:?} does not match {} values", data.len()));
                        }
                        classify(&data, rows, cols)
                    })
                    .map(|labels| Response::Labels { id, labels })
                    .unwrap_or_else(|message| Response::Error { id: Some(id), message });
                send(&reply, &mut output)?;
            }
            Request::Shutdown {} => return Ok(()),
        }
    }
    Ok(())
}

/// How to launch an external classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSpec {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    /// Length of one input vector.
    pub input_dim: usize,
    /// Seconds to wait for any single response after the handshake.
    #[serde(default = "default_response_timeout")]
    pub response_timeout_secs: f64,
}

fn default_response_timeout() -> f64 {
    60.0
}

enum Line {
    Text { offset: u64, text: String },
    Invalid { offset: u64, message: String },
    Eof,
}

struct Session {
    stdin: Option<ChildStdin>,
    lines: Receiver<Line>,
    next_id: u64,
}

/// A child process serving [`BaseClassifier::evaluate`] over the protocol.
pub struct ExternalClassifier {
    child: Mutex<Child>,
    session: Mutex<Session>,
    stderr_tail: Arc<Mutex<VecDeque<u8>>>,
    num_classes: usize,
    input_dim: usize,
    response_timeout: Duration,
}

impl std::fmt::Debug for ExternalClassifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalClassifier")
            .field("num_classes", &self.num_classes)
            .field("input_dim", &self.input_dim)
            .finish_non_exhaustive()
    }
}

fn spawn_stdout_reader(stdout: impl Read + Send + 'static) -> Receiver<Line> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(stdout);
        let mut offset = 0u64;
        let mut buf = Vec::new();
        loop {
            buf.clear();
            match reader.read_until(b'\n', &mut buf) {
                Ok(0) | Err(_) => {
                    let _ = tx.send(Line::Eof);
                    return;
                }
                Ok(n) => {
                    let line = match String::from_utf8(buf.clone()) {
                        Ok(text) => Line::Text {
                            offset,
                            text: text.trim_end_matches(['\n', '\r']).to_owned(),
                        },
                        Err(_) => Line::Invalid {
                            offset,
                            message: "line is not UTF-8".into(),
                        },
                    };
                    offset += n as u64;
                    if tx.send(line).is_err() {
                        return;
                    }
                }
            }
        }
    });
    rx
}

fn spawn_stderr_tail(stderr: impl Read + Send + 'static, tail: Arc<Mutex<VecDeque<u8>>>) {
    thread::spawn(move || {
        let mut stderr = stderr;
        let mut chunk = [0u8; 1024];
        while let Ok(n) = stderr.read(&mut chunk) {
            if n == 0 {
                return;
            }
            let mut t = tail.lock().unwrap();
            t.extend(&chunk[..n]);
            let excess = t.len().saturating_sub(STDERR_TAIL_BYTES);
            t.drain(..excess);
        }
    });
}

impl ExternalClassifier {
    /// Launches `spec.command` and performs the handshake.
    pub fn spawn(spec: &ExternalSpec) -> Result<Self, ClassifierError> {
        ExternalClassifier::spawn_with_timeout(spec, HANDSHAKE_TIMEOUT)
    }

    pub fn spawn_with_timeout(spec: &ExternalSpec, handshake: Duration) -> Result<Self, ClassifierError> {
        let (program, args) = spec
            .command
            .split_first()
            .ok_or_else(|| ClassifierError::Protocol("empty command line".into()))?;
        if spec.input_dim == 0 {
            return Err(ClassifierError::Protocol("input_dim must be positive".into()));
        }
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ClassifierError::External {
                message: format!("cannot launch {program}: {e}"),
                stderr_tail: String::new(),
            })?;
        let stderr_tail = Arc::new(Mutex::new(VecDeque::new()));
        spawn_stderr_tail(child.stderr.take().unwrap(), Arc::clone(&stderr_tail));
        let lines = spawn_stdout_reader(child.stdout.take().unwrap());
        let stdin = child.stdin.take();
        let ext = ExternalClassifier {
            child: Mutex::new(child),
            session: Mutex::new(Session {
                stdin,
                lines,
                next_id: 0,
            }),
            stderr_tail,
            num_classes: 0,
            input_dim: spec.input_dim,
            response_timeout: Duration::from_secs_f64(spec.response_timeout_secs.max(0.001)),
        };
        ext.handshake(handshake)
    }

    fn handshake(mut self, timeout: Duration) -> Result<Self, ClassifierError> {
        let num_classes = {
            let mut session = self.session.lock().unwrap();
            self.write(&mut session, &Request::Hello {
                version: PROTOCOL_VERSION,
            })?;
            match self.read(&mut session, Instant::now() + timeout, "handshake")? {
                Response::HelloOk { num_classes } => num_classes as usize,
                Response::Error { message, .. } => {
                    return Err(self.external(format!("handshake rejected: {message}")))
                }
                other => {
                    return Err(ClassifierError::Protocol(format!(
                        "expected hello_ok, got {other:?}"
                    )))
                }
            }
        };
        if num_classes < 2 {
            return Err(ClassifierError::Protocol(format!(
                "child reported {num_classes} classes"
            )));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    fn tail(&self) -> String {
        let t = self.stderr_tail.lock().unwrap();
        String::from_utf8_lossy(&t.iter().copied().collect::<Vec<_>>()).into_owned()
    }

    fn external(&self, message: String) -> ClassifierError {
        // give the stderr reader a moment to drain a dying child's last words
        thread::sleep(Duration::from_millis(20));
        ClassifierError::External {
            message,
            stderr_tail: self.tail(),
        }
    }

    fn write(&self, session: &mut Session, frame: &Request) -> Result<(), ClassifierError> {
        let stdin = session
            .stdin
            .as_mut()
            .ok_or_else(|| ClassifierError::Protocol("session already shut down".into()))?;
        stdin
            .write_all(to_line(frame).as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| self.external(format!("write to child failed: {e}")))
    }

    fn read(&self, session: &mut Session, deadline: Instant, what: &str) -> Result<Response, ClassifierError> {
        let wait = deadline.saturating_duration_since(Instant::now());
        match session.lines.recv_timeout(wait) {
            Ok(Line::Text { offset, text }) => serde_json::from_str(&text).map_err(|e| {
                ClassifierError::Protocol(format!(
                    "malformed response line at byte offset {offset}: {e}"
                ))
            }),
            Ok(Line::Invalid { offset, message }) => Err(ClassifierError::Protocol(format!(
                "malformed response line at byte offset {offset}: {message}"
            ))),
            Ok(Line::Eof) | Err(RecvTimeoutError::Disconnected) => {
                Err(self.external(format!("child closed its output during {what}")))
            }
            Err(RecvTimeoutError::Timeout) => Err(self.external(format!("timed out waiting for {what}"))),
        }
    }

    fn infer(&self, batch: &[f64]) -> Result<Vec<usize>, ClassifierError> {
        let d = self.input_dim;
        let rows = batch.len() / d;
        if rows == 0 {
            return Ok(Vec::new());
        }
        let per_request = rows.div_ceil(MAX_OUTSTANDING);
        let mut session = self.session.lock().unwrap();
        let mut pending: HashMap<u64, (usize, usize)> = HashMap::new();
        let mut answered = HashSet::new();
        for (chunk_index, chunk) in batch.chunks(per_request * d).enumerate() {
            let id = session.next_id;
            session.next_id += 1;
            let values: Vec<f32> = chunk.iter().map(|&x| x as f32).collect();
            let chunk_rows = chunk.len() / d;
            self.write(&mut session, &Request::Infer {
                id,
                shape: vec![chunk_rows as u32, d as u32],
                data_b64: encode_f32(&values),
            })?;
            pending.insert(id, (chunk_index * per_request, chunk_rows));
        }
        let mut labels = vec![usize::MAX; rows];
        while !pending.is_empty() {
            let deadline = Instant::now() + self.response_timeout;
            match self.read(&mut session, deadline, "infer response")? {
                Response::Labels { id, labels: got } => {
                    let Some((first, count)) = pending.remove(&id) else {
                        let kind = if answered.contains(&id) { "duplicate" } else { "unknown" };
                        return Err(ClassifierError::Protocol(format!("{kind} response id {id}")));
                    };
                    answered.insert(id);
                    if got.len() != count {
                        return Err(ClassifierError::Protocol(format!(
                            "response {id} has {} labels for {count} inputs",
                            got.len()
                        )));
                    }
                    for (slot, &label) in labels[first..first + count].iter_mut().zip(&got) {
                        let label = label as usize;
                        if label >= self.num_classes {
                            return Err(ClassifierError::LabelOutOfRange {
                                label,
                                num_classes: self.num_classes,
                            });
                        }
                        *slot = label;
                    }
                }
                Response::Error { id, message } => {
                    let at = id.map(|i| format!(" for request {i}")).unwrap_or_default();
                    return Err(self.external(format!("child reported an error{at}: {message}")));
                }
                Response::HelloOk { .. } => {
                    return Err(ClassifierError::Protocol("unexpected hello_ok".into()))
                }
            }
        }
        Ok(labels)
    }

    /// Sends `shutdown` and waits up to five seconds for the child to exit.
    pub fn shutdown(self) -> Result<ExitStatus, ClassifierError> {
        {
            let mut session = self.session.lock().unwrap();
            let _ = self.write(&mut session, &Request::Shutdown {});
            session.stdin = None;
        }
        let deadline = Instant::now() + SHUTDOWN_TIMEOUT;
        loop {
            let status = self.child.lock().unwrap().try_wait();
            match status {
                Ok(Some(status)) => return Ok(status),
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
                Ok(None) => {
                    self.kill();
                    return Err(self.external("child did not exit within 5 s of shutdown".into()));
                }
                Err(e) => return Err(self.external(format!("waiting for child failed: {e}"))),
            }
        }
    }

    fn kill(&self) {
        let mut child = self.child.lock().unwrap();
        if let Ok(None) = child.try_wait() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Drop for ExternalClassifier {
    fn drop(&mut self) {
        if let Ok(mut session) = self.session.lock() {
            if session.stdin.is_some() {
                let _ = self.write(&mut session, &Request::Shutdown {});
                session.stdin = None;
            }
        }
        let deadline = Instant::now() + Duration::from_millis(500);
        loop {
            let done = !matches!(self.child.lock().map(|mut c| c.try_wait()), Ok(Ok(None)));
            if done || Instant::now() >= deadline {
                break;
            }
            thread::sleep(Duration::from_millis(5));
        }
        self.kill();
    }
}

impl BaseClassifier for ExternalClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn evaluate(&self, batch: &[f64], labels: &mut Vec<usize>) -> Result<(), ClassifierError> {
        if !batch.len().is_multiple_of(self.input_dim) {
            return Err(ClassifierError::Input(format!(
                "batch of {} values is not a multiple of {}",
                batch.len(),
                self.input_dim
            )));
        }
        labels.extend(self.infer(batch)?);
        Ok(())
    }

    fn supports_concurrent_evaluation(&self) -> bool {
        false
    }
}

/// Rounds every input to f32 before handing it to the wrapped classifier,
/// matching what an external classifier receives over the wire.
#[derive(Debug, Clone)]
pub struct F32Inputs<C>(pub C);

impl<C: BaseClassifier> BaseClassifier for F32Inputs<C> {
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }
    fn evaluate(&self, batch: &[f64], labels: &mut Vec<usize>) -> Result<(), ClassifierError> {
        let rounded: Vec<f64> = batch.iter().map(|&x| x as f32 as f64).collect();
        self.0.evaluate(&rounded, labels)
    }
    fn supports_concurrent_evaluation(&self) -> bool {
        self.0.supports_concurrent_evaluation()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_text_is_fixed() {
        assert_eq!(
            to_line(&Request::Hello { version: 1 }),
            "{\"type\":\"hello\",\"version\":1}\n"
        );
        assert_eq!(to_line(&Request::Shutdown {}), "{\"type\":\"shutdown\"}\n");
        assert_eq!(
            to_line(&Response::Labels { id: 3, labels: vec![1, 0] }),
            "{\"type\":\"labels\",\"id\":3,\"labels\":[1,0]}\n"
        );
        let r: Request = serde_json::from_str("{\"type\":\"shutdown\"}").unwrap();
        assert_eq!(r, Request::Shutdown {});
    }

    #[test]
    fn payload_round_trips_bit_exactly() {
        let values = [0.0f32, -0.0, 1.5, f32::MIN_POSITIVE, f32::MAX, -3.25e-7];
        let text = encode_f32(&values);
        assert_eq!(encode_f32(&[1.0]), "AACAPw==");
        let back = decode_f32(&text).unwrap();
        assert_eq!(
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            values.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(decode_f32("AAA=").is_err());
        assert!(decode_f32("!!").is_err());
    }

    fn run_serve(input: &str) -> (Result<(), String>, String) {
        let mut out = Vec::new();
        let res = serve(input.as_bytes(), &mut out, 3, |data, rows, cols| {
            Ok((0..rows)
                .map(|r| {
                    let row = &data[r * cols..(r + 1) * cols];
                    crate::linalg::argmax(row) as u32
                })
                .collect())
        });
        (res, String::from_utf8(out).unwrap())
    }

    #[test]
    fn server_answers_each_frame() {
        let infer = to_line(&Request::Infer {
            id: 9,
            shape: vec![2, 3],
            data_b64: encode_f32(&[0.0, 0.0, 1.0, 5.0, 1.0, 1.0]),
        });
        let input = format!("{{\"type\":\"hello\",\"version\":1}}\n{infer}{{\"type\":\"shutdown\"}}\nignored\n");
        let (res, out) = run_serve(&input);
        res.unwrap();
        assert_eq!(
            out,
            "{\"type\":\"hello_ok\",\"num_classes\":3}\n{\"type\":\"labels\",\"id\":9,\"labels\":[2,0]}\n"
        );
    }

    #[test]
    fn server_reports_recoverable_and_fatal_errors() {
        let (res, out) = run_serve("{\"type\":\"infer\",\"id\":4,\"shape\":[1]}\n");
        res.unwrap();
        assert!(out.starts_with("{\"type\":\"error\",\"id\":4,"), "{out}");
        let (res, out) = run_serve("{\"type\":\"hello\",\"version\":2}\n");
        res.unwrap();
        assert!(out.contains("unsupported protocol version 2"));
        let (res, _) = run_serve("not json\n");
        assert!(res.is_err());
    }

    #[test]
    fn f32_wrapper_rounds_inputs() {
        let f = F32Inputs(crate::smoothing::LinearClassifier::binary(&[1.0], -0.1).unwrap());
        let mut labels = Vec::new();
        // 0.1 rounds up in f32, so the wrapped rule sees a positive margin
        f.evaluate(&[0.1], &mut labels).unwrap();
        assert_eq!(labels, [1]);
    }
}
