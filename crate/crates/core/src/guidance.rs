//! Image-space training signal.
//!
//! A guidance source receives a rendered image and its prompt and returns
//! `d loss / d pixel`. Two sources ship: a photometric oracle that compares
//! against stored multi-view targets, and a client for an external service
//! speaking newline-delimited JSON over TCP or a child's stdio.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::io::Image;
use crate::shading::ShadingMode;

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("guidance service timed out after {0:?}")]
    Timeout(Duration),
    #[error("gradient has {got} values, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("guidance service error: {0}")]
    Service(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("no target for prompt {0:?}")]
    UnknownPrompt(String),
    #[error("no target view: {0}")]
    NoTarget(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("guidance connection closed")]
    Closed,
    #[error("guidance I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Which stored view and compositing a photometric target should use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetKey {
    pub view: usize,
    pub mode: ShadingMode,
    pub background: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct GuidanceRequest {
    /// Prompt with its directional suffix.
    pub prompt: String,
    pub image: Image,
    pub stage: u8,
    pub noise_range: (f64, f64),
    pub guidance_scale: f64,
    /// Used only by the photometric oracle.
    pub target: Option<TargetKey>,
}

impl GuidanceRequest {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let (lo, hi) = self.noise_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(GuidanceError::InvalidRequest(format!("noise range ({lo}, {hi})")));
        }
        if !matches!(self.stage, 1 | 2) {
            return Err(GuidanceError::InvalidRequest(format!("stage {}", self.stage)));
        }
        if self.image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GuidanceError::InvalidRequest("image values outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceResponse {
    /// `d loss / d pixel`, same layout as the request image.
    pub grad: Vec<f32>,
    pub loss: Option<f64>,
}

pub trait Guidance: Send {
    fn guide(&mut self, req: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError>;

    /// Whether requests may be issued concurrently and in any order.
    fn parallel_safe(&self) -> bool {
        false
    }

    /// Stored view nearest a sampled camera, for sources that only answer
    /// at fixed viewpoints.
    fn snap(&self, _stage: u8, _azimuth: f64, _elevation: f64) -> Option<ViewSnap> {
        None
    }
}

/// A fixed viewpoint a target source can answer for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewSnap {
    pub view: usize,
    pub azimuth: f64,
    pub elevation: f64,
    pub fov: f64,
}

/// Mean squared error and its gradient `2 (image - target) / N` over all
/// `N = H W 3` values.
pub fn photometric_guidance(image: &Image, target: &Image) -> Result<GuidanceResponse, GuidanceError> {
    if (image.width, image.height) != (target.width, target.height) {
        return Err(GuidanceError::ShapeMismatch { expected: target.data.len(), got: image.data.len() });
    }
    let n = image.data.len() as f64;
    let mut loss = 0.0;
    let grad = image
        .data
        .iter()
        .zip(&target.data)
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            loss += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    Ok(GuidanceResponse { grad, loss: Some(loss / n) })
}

/// Lookup of a composited target image for a request.
pub trait TargetSource: Send + Sync {
    fn target(&self, prompt: &str, key: &TargetKey, width: usize, height: usize) -> Result<Image, GuidanceError>;

    fn snap(&self, stage: u8, azimuth: f64, elevation: f64) -> Option<ViewSnap>;
}

pub struct PhotometricOracle<S> {
    pub targets: S,
}

impl<S: TargetSource> Guidance for PhotometricOracle<S> {
    fn guide(&mut self, req: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        let key = req
            .target
            .ok_or_else(|| GuidanceError::NoTarget("request carries no target view".into()))?;
        let t = self.targets.target(&req.prompt, &key, req.image.width, req.image.height)?;
        photometric_guidance(&req.image, &t)
    }

    fn parallel_safe(&self) -> bool {
        true
    }

    fn snap(&self, stage: u8, azimuth: f64, elevation: f64) -> Option<ViewSnap> {
        self.targets.snap(stage, azimuth, elevation)
    }
}

pub fn encode_pixels(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_pixels(s: &str) -> Result<Vec<f32>, GuidanceError> {
    let bytes = B64.decode(s).map_err(|e| GuidanceError::Protocol(format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(GuidanceError::Protocol(format!("{} payload bytes is not whole floats", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn request_json(req: &GuidanceRequest) -> Value {
    json!({
        "type": "guide",
        "prompt": req.prompt,
        "stage": req.stage,
        "width": req.image.width,
        "height": req.image.height,
        "guidance_scale": req.guidance_scale,
        "noise_lo": req.noise_range.0,
        "noise_hi": req.noise_range.1,
        "pixels": encode_pixels(&req.image.data),
    })
}

/// Parses one response line for a request of `expected` floats.
pub fn parse_response(line: &str, expected: usize) -> Result<GuidanceResponse, GuidanceError> {
    let v: Value = serde_json::from_str(line).map_err(|e| GuidanceError::Protocol(format!("bad JSON: {e}")))?;
    match v.get("type").and_then(Value::as_str) {
        Some("grad") => {
            let px = v
                .get("pixels")
                .and_then(Value::as_str)
                .ok_or_else(|| GuidanceError::Protocol("grad without pixels".into()))?;
            let grad = decode_pixels(px)?;
            if grad.len() != expected {
                return Err(GuidanceError::ShapeMismatch { expected, got: grad.len() });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(GuidanceError::Protocol("non-finite gradient".into()));
            }
            Ok(GuidanceResponse { grad, loss: v.get("loss").and_then(Value::as_f64) })
        }
        Some("error") => Err(GuidanceError::Service(
            v.get("message").and_then(Value::as_str).unwrap_or("unspecified").to_string(),
        )),
        other => Err(GuidanceError::Protocol(format!("unexpected message type {other:?}"))),
    }
}

/// Client for the external guidance service.
pub struct RemoteGuidance {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
    child: Option<Child>,
}

fn spawn_reader<R: std::io::Read + Send + 'static>(r: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(r);
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
    rx
}

impl RemoteGuidance {
    pub fn connect_tcp(addr: &str, timeout: Duration) -> Result<Self, GuidanceError> {
        let sock = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| GuidanceError::Handshake(format!("cannot resolve {addr}")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout)?;
        stream.set_nodelay(true)?;
        let read = stream.try_clone()?;
        Self::handshake(Box::new(stream), spawn_reader(read), timeout, None)
    }

    /// Spawns `program args..` and talks over its stdin/stdout.
    pub fn spawn_stdio(program: &str, args: &[String], timeout: Duration) -> Result<Self, GuidanceError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(Box::new(stdin), spawn_reader(stdout), timeout, Some(child))
    }

    fn handshake(
        writer: Box<dyn Write + Send>,
        lines: Receiver<std::io::Result<String>>,
        timeout: Duration,
        child: Option<Child>,
    ) -> Result<Self, GuidanceError> {
        let mut me = Self { writer, lines, timeout, child };
        me.send(&json!({"type": "hello", "version": PROTOCOL_VERSION}))?;
        let line = me.recv()?;
        let v: Value = serde_json::from_str(&line).map_err(|e| GuidanceError::Handshake(format!("bad JSON: {e}")))?;
        if v.get("type").and_then(Value::as_str) != Some("hello_ack") {
            return Err(GuidanceError::Handshake(format!("expected hello_ack, got {}", line.trim())));
        }
        match v.get("version").and_then(Value::as_u64) {
            Some(PROTOCOL_VERSION) => Ok(me),
            other => Err(GuidanceError::Handshake(format!(
                "version mismatch: client {PROTOCOL_VERSION}, service {other:?}"
            ))),
        }
    }

    fn send(&mut self, v: &Value) -> Result<(), GuidanceError> {
        let mut line = serde_json::to_vec(v).map_err(|e| GuidanceError::Protocol(e.to_string()))?;
        line.push(b'\n');
        self.writer.write_all(&line)?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<String, GuidanceError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => Ok(l),
            Ok(Err(e)) => Err(e.into()),
            Err(RecvTimeoutError::Timeout) => Err(GuidanceError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => Err(GuidanceError::Closed),
        }
    }
}

impl Guidance for RemoteGuidance {
    fn guide(&mut self, req: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        req.validate()?;
        self.send(&request_json(req))?;
        let line = self.recv()?;
        parse_response(&line, req.image.data.len())
    }
}

impl Drop for RemoteGuidance {
    fn drop(&mut self) {
        if let Some(c) = &mut self.child {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_examples() {
        let t = Image::new(2, 2, (0..12).map(|i| i as f32 / 20.0).collect()).unwrap();
        let r = photometric_guidance(&t, &t).unwrap();
        assert!(r.grad.iter().all(|&g| g == 0.0));
        assert_eq!(r.loss, Some(0.0));
        let img = Image::new(2, 2, t.data.iter().map(|v| v + 0.1).collect()).unwrap();
        let r = photometric_guidance(&img, &t).unwrap();
        for g in r.grad {
            assert!((g - 0.2 / 12.0).abs() < 1e-6);
        }
        assert!((r.loss.unwrap() - 0.01).abs() < 1e-6);
    }

    #[test]
    fn pixel_encoding_round_trips_bits() {
        let v = vec![0.0f32, -0.0, 1.5, f32::MIN_POSITIVE, 1e-42, 123.456, f32::MAX];
        let back = decode_pixels(&encode_pixels(&v)).unwrap();
        assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), back.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        // little-endian layout
        assert_eq!(B64.decode(encode_pixels(&[1.0])).unwrap(), vec![0, 0, 0x80, 0x3f]);
    }

    #[test]
    fn response_parsing() {
        let ok = format!(r#"{{"type":"grad","pixels":"{}","extra":1}}"#, encode_pixels(&[0.5; 3]));
        assert_eq!(parse_response(&ok, 3).unwrap().grad, vec![0.5; 3]);
        assert!(matches!(parse_response(&ok, 6), Err(GuidanceError::ShapeMismatch { expected: 6, got: 3 })));
        let err = r#"{"type":"error","message":"out of memory"}"#;
        assert!(matches!(parse_response(err, 3), Err(GuidanceError::Service(m)) if m == "out of memory"));
        assert!(matches!(parse_response("{", 3), Err(GuidanceError::Protocol(_))));
        assert!(matches!(parse_response(r#"{"type":"grad","pixels":"AAA"}"#, 3), Err(GuidanceError::Protocol(_))));
    }
}
