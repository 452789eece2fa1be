//! External backend handles: one child process per handle, speaking the
//! newline-delimited JSON protocol of [`super::protocol`] over
//! stdin/stdout. A handle serves one worker; workers never share handles.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::frame::FramePayload;
use crate::geometry::KeypointSet;

use super::protocol::{
    parse_attributes_output, parse_detector_output, parse_embedding_output,
    parse_keypoints_output, BackendRole, Hello, Ready, Request, RequestInput, Response,
    WireTransform,
};
use super::{
    BackendError, DetectorBackend, DetectorOutput, Embedding, FaceBackend, FaceContext,
    MultitaskOutput, DEFAULT_EMBEDDING_DIM,
};

/// How to launch an external backend process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessBackendSpec {
    /// Command line: executable followed by its arguments.
    pub command: Vec<String>,
    /// Per-request timeout in milliseconds.
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    5000
}

impl ProcessBackendSpec {
    pub fn new(command: Vec<String>) -> Self {
        Self {
            command,
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn spawn(&self, role: BackendRole) -> Result<ExternalBackend, BackendError> {
        ExternalBackend::spawn(self, role)
    }
}

/// A live connection to one backend process. One request in flight.
pub struct ExternalBackend {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    _reader: thread::JoinHandle<()>,
    next_id: u64,
    timeout: Duration,
    role: BackendRole,
    embedding_dim: usize,
    poisoned: bool,
}

impl ExternalBackend {
    pub fn spawn(spec: &ProcessBackendSpec, role: BackendRole) -> Result<Self, BackendError> {
        let (exe, args) = spec
            .command
            .split_first()
            .ok_or_else(|| BackendError::SpawnFailure("empty command line".into()))?;
        let mut child = Command::new(exe)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::SpawnFailure(format!("{exe}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");

        let (tx, rx) = mpsc::channel();
        let reader = thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });

        let mut backend = Self {
            child,
            stdin,
            lines: rx,
            _reader: reader,
            next_id: 0,
            timeout: Duration::from_millis(spec.timeout_ms),
            role,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            poisoned: false,
        };
        backend.handshake()?;
        Ok(backend)
    }

    pub fn role(&self) -> BackendRole {
        self.role
    }

    fn handshake(&mut self) -> Result<(), BackendError> {
        let hello = serde_json::to_string(&Hello::new(self.role)).expect("hello serializes");
        self.send_line(&hello)?;
        let line = self.recv_line()?;
        let ready: Ready = serde_json::from_str(&line)
            .map_err(|e| BackendError::ProtocolViolation(format!("bad ready message: {e}")))?;
        if let Some(dim) = ready.ready.embedding_dim {
            if dim == 0 {
                return Err(BackendError::ProtocolViolation(
                    "backend declared a zero embedding dimension".into(),
                ));
            }
            self.embedding_dim = dim;
        }
        Ok(())
    }

    fn send_line(&mut self, line: &str) -> Result<(), BackendError> {
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.write_all(b"\n"))
            .and_then(|_| self.stdin.flush())
            .map_err(|e| {
                self.poisoned = true;
                BackendError::ProtocolViolation(format!("write failed: {e}"))
            })
    }

    fn recv_line(&mut self) -> Result<String, BackendError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => {
                self.poisoned = true;
                Err(BackendError::ProtocolViolation(format!("read failed: {e}")))
            }
            Err(RecvTimeoutError::Timeout) => {
                self.poisoned = true;
                let _ = self.child.kill();
                Err(BackendError::Timeout(self.timeout))
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.poisoned = true;
                Err(BackendError::Timeout(self.timeout))
            }
        }
    }

    fn request(&mut self, input: RequestInput) -> Result<serde_json::Value, BackendError> {
        if self.poisoned {
            return Err(BackendError::ProtocolViolation(
                "backend connection is dead".into(),
            ));
        }
        self.next_id += 1;
        let id = self.next_id;
        let line = serde_json::to_string(&Request { id, input }).expect("request serializes");
        self.send_line(&line)?;
        let line = self.recv_line()?;
        let response: Response = serde_json::from_str(&line)
            .map_err(|e| BackendError::ProtocolViolation(format!("bad response: {e}")))?;
        if response.id != id {
            self.poisoned = true;
            return Err(BackendError::ProtocolViolation(format!(
                "response id {} does not match request id {id}",
                response.id
            )));
        }
        if let Some(err) = response.error {
            return Err(BackendError::ProtocolViolation(format!(
                "backend error: {err}"
            )));
        }
        response.output.ok_or_else(|| {
            BackendError::ProtocolViolation("response missing both output and error".into())
        })
    }

    fn frame_input(payload: &FramePayload) -> RequestInput {
        RequestInput {
            image: base64::engine::general_purpose::STANDARD.encode(&payload.bytes),
            width: payload.width,
            height: payload.height,
            format: payload.format.as_str().to_string(),
            bbox: None,
            transform: None,
        }
    }

    fn face_input(ctx: &FaceContext<'_>) -> RequestInput {
        let mut input = Self::frame_input(ctx.payload);
        input.bbox = Some(ctx.bbox.to_array());
        input.transform = ctx.transform.map(WireTransform::from);
        input
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

// The engine hands each ExternalBackend to exactly one worker; interior
// mutability keeps the trait object shareable under that discipline.
impl DetectorBackend for std::sync::Mutex<ExternalBackend> {
    fn detect(
        &self,
        _frame_id: u64,
        payload: &FramePayload,
    ) -> Result<DetectorOutput, BackendError> {
        let mut backend = self.lock().expect("backend mutex");
        let input = ExternalBackend::frame_input(payload);
        let output = backend.request(input)?;
        parse_detector_output(output)
    }
}

impl FaceBackend for std::sync::Mutex<ExternalBackend> {
    fn keypoints(&self, ctx: &FaceContext<'_>) -> Result<KeypointSet, BackendError> {
        let mut backend = self.lock().expect("backend mutex");
        let output = backend.request(ExternalBackend::face_input(ctx))?;
        parse_keypoints_output(output)
    }

    fn multitask(&self, ctx: &FaceContext<'_>) -> Result<MultitaskOutput, BackendError> {
        let mut backend = self.lock().expect("backend mutex");
        let output = backend.request(ExternalBackend::face_input(ctx))?;
        parse_attributes_output(output)
    }

    fn embed(&self, ctx: &FaceContext<'_>) -> Result<Embedding, BackendError> {
        let mut backend = self.lock().expect("backend mutex");
        let output = backend.request(ExternalBackend::face_input(ctx))?;
        parse_embedding_output(output)
    }

    fn embedding_dim(&self) -> usize {
        self.lock().expect("backend mutex").embedding_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::PixelFormat;

    fn python_available() -> bool {
        Command::new("python3")
            .arg("--version")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    }

    fn payload() -> FramePayload {
        FramePayload::new(2, 2, PixelFormat::Gray8, vec![0, 1, 2, 3])
    }

    /// A minimal scripted backend: replies ready, then answers every
    /// request with a fixed detector output.
    const PY_FIXED_DETECTOR: &str = r#"
import json, sys
line = sys.stdin.readline()
print(json.dumps({"ready": {}}), flush=True)
for line in sys.stdin:
    req = json.loads(line)
    out = {"id": req["id"], "output": {"boxes": [{"box": [10.0, 20.0, 30.0, 40.0], "score": 0.875}]}}
    print(json.dumps(out), flush=True)
"#;

    const PY_BAD_AGE: &str = r#"
import json, sys
line = sys.stdin.readline()
print(json.dumps({"ready": {}}), flush=True)
for line in sys.stdin:
    req = json.loads(line)
    out = {"id": req["id"], "output": {"age_probs": [0.01] * 100, "gender_p_female": 0.5, "smile_p": 0.5}}
    print(json.dumps(out), flush=True)
"#;

    const PY_HANG: &str = r#"
import json, sys, time
line = sys.stdin.readline()
print(json.dumps({"ready": {}}), flush=True)
sys.stdin.readline()
time.sleep(60)
"#;

    fn spec_for(script: &str, timeout_ms: u64) -> ProcessBackendSpec {
        ProcessBackendSpec {
            command: vec!["python3".into(), "-c".into(), script.into()],
            timeout_ms,
        }
    }

    #[test]
    fn fixed_detector_round_trip() {
        if !python_available() {
            eprintln!("skipping: python3 not available");
            return;
        }
        let backend = spec_for(PY_FIXED_DETECTOR, 5000)
            .spawn(BackendRole::Detector)
            .unwrap();
        let backend = std::sync::Mutex::new(backend);
        let out = backend.detect(0, &payload()).unwrap();
        assert_eq!(out.boxes().len(), 1);
        assert_eq!(out.boxes()[0].0, BoundingBox::new(10.0, 20.0, 30.0, 40.0));
        assert_eq!(out.boxes()[0].1, 0.875);
    }

    #[test]
    fn invalid_distribution_surfaced() {
        if !python_available() {
            eprintln!("skipping: python3 not available");
            return;
        }
        let backend = spec_for(PY_BAD_AGE, 5000)
            .spawn(BackendRole::Attributes)
            .unwrap();
        let backend = std::sync::Mutex::new(backend);
        let ctx = FaceContext {
            frame_id: 0,
            face_index: 0,
            payload: &payload(),
            bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0),
            transform: None,
        };
        assert!(matches!(
            backend.multitask(&ctx),
            Err(BackendError::InvalidDistribution(_))
        ));
    }

    #[test]
    fn hung_backend_times_out() {
        if !python_available() {
            eprintln!("skipping: python3 not available");
            return;
        }
        let backend = spec_for(PY_HANG, 300).spawn(BackendRole::Detector).unwrap();
        let backend = std::sync::Mutex::new(backend);
        let start = std::time::Instant::now();
        let err = backend.detect(0, &payload()).unwrap_err();
        assert!(matches!(err, BackendError::Timeout(_)), "got {err:?}");
        assert!(start.elapsed() < Duration::from_secs(5));
        // The handle is poisoned afterwards.
        let err = backend.detect(0, &payload()).unwrap_err();
        assert!(matches!(err, BackendError::ProtocolViolation(_)));
    }

    #[test]
    fn missing_executable_is_spawn_failure() {
        let spec = ProcessBackendSpec::new(vec!["/nonexistent/backend".into()]);
        assert!(matches!(
            spec.spawn(BackendRole::Detector),
            Err(BackendError::SpawnFailure(_))
        ));
    }
}
