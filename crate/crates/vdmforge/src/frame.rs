//! GuidanceFrame wire format.
//!
//! ```text
//! u32 LE header length | JSON header | f32 LE payload
//! ```
//!
//! The payload holds `n_images x height x width x 3` samples, image-major,
//! row-major, channel-last: rendered images in requests, `d loss / d pixel`
//! in responses. Handshake and error frames carry no payload.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use vdmforge_core::{Camera, NormalSpace, Vec3};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_HEADER_BYTES: usize = 1 << 20;
pub const MAX_PAYLOAD_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameType {
    Request,
    Response,
    Handshake,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceTag {
    World,
    Camera,
}

impl From<NormalSpace> for SpaceTag {
    fn from(s: NormalSpace) -> Self {
        match s {
            NormalSpace::World => SpaceTag::World,
            NormalSpace::Camera => SpaceTag::Camera,
        }
    }
}

impl From<SpaceTag> for NormalSpace {
    fn from(s: SpaceTag) -> Self {
        match s {
            SpaceTag::World => NormalSpace::World,
            SpaceTag::Camera => NormalSpace::Camera,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub elevation: f64,
    pub azimuth: f64,
    pub radius: f64,
    pub fov_y: f64,
    pub target: [f64; 3],
}

impl CameraParams {
    pub fn to_camera(&self, width: usize, height: usize) -> Camera {
        let [x, y, z] = self.target;
        Camera {
            elevation: self.elevation,
            azimuth: self.azimuth,
            radius: self.radius,
            fov_y: self.fov_y,
            target: Vec3::new(x, y, z),
            width,
            height,
        }
    }
}

impl From<&Camera> for CameraParams {
    fn from(c: &Camera) -> Self {
        Self {
            elevation: c.elevation,
            azimuth: c.azimuth,
            radius: c.radius,
            fov_y: c.fov_y,
            target: c.target.to_array(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub max_resolution: u32,
    pub supports_converged_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameHeader {
    pub protocol_version: u32,
    #[serde(rename = "type")]
    pub kind: FrameType,
    #[serde(default)]
    pub iteration: u64,
    #[serde(default)]
    pub n_images: usize,
    #[serde(default)]
    pub width: usize,
    #[serde(default)]
    pub height: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cameras: Vec<CameraParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_space: Option<SpaceTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capabilities: Option<Capabilities>,
    /// Opaque prompt specification forwarded from the run config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl FrameHeader {
    pub fn new(kind: FrameType) -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION,
            kind,
            iteration: 0,
            n_images: 0,
            width: 0,
            height: 0,
            cameras: Vec::new(),
            normal_space: None,
            loss: None,
            converged: None,
            capabilities: None,
            prompt: None,
            message: None,
        }
    }

    /// Samples the payload must hold, or `None` on overflow.
    pub fn payload_len(&self) -> Option<usize> {
        self.n_images.checked_mul(self.width)?.checked_mul(self.height)?.checked_mul(3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: FrameHeader,
    pub payload: Vec<f32>,
}

impl Frame {
    pub fn handshake(capabilities: Capabilities, prompt: Option<serde_json::Value>) -> Self {
        let mut header = FrameHeader::new(FrameType::Handshake);
        header.capabilities = Some(capabilities);
        header.prompt = prompt;
        Frame { header, payload: Vec::new() }
    }

    pub fn error(iteration: u64, message: impl Into<String>) -> Self {
        let mut header = FrameHeader::new(FrameType::Error);
        header.iteration = iteration;
        header.message = Some(message.into());
        Frame { header, payload: Vec::new() }
    }

    /// Samples of image `i`.
    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.header.width * self.header.height * 3;
        &self.payload[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol error at byte {offset}: {reason}")]
pub struct ProtocolError {
    pub offset: usize,
    pub reason: String,
}

impl ProtocolError {
    fn new(offset: usize, reason: impl Into<String>) -> Self {
        Self { offset, reason: reason.into() }
    }
}

#[derive(Debug, Error)]
pub enum ReadError {
    /// Clean end of stream between frames.
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

fn header_json(header: &FrameHeader) -> Vec<u8> {
    serde_json::to_vec(header).expect("frame header serializes")
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let json = header_json(&frame.header);
    let mut out = Vec::with_capacity(4 + json.len() + frame.payload.len() * 4);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &frame.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, frame: &Frame) -> io::Result<()> {
    let expected = frame.header.payload_len();
    if expected != Some(frame.payload.len()) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("payload has {} samples, header implies {expected:?}", frame.payload.len()),
        ));
    }
    let json = header_json(&frame.header);
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(64 * 1024);
    for chunk in frame.payload.chunks(16 * 1024) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()
}

fn check_prefix(len: usize) -> Result<(), ProtocolError> {
    if len == 0 {
        return Err(ProtocolError::new(0, "empty header"));
    }
    if len > MAX_HEADER_BYTES {
        return Err(ProtocolError::new(0, format!("header length {len} exceeds {MAX_HEADER_BYTES}")));
    }
    Ok(())
}

/// Parses and checks a header that starts at byte 4; returns it with the
/// payload length in bytes.
fn parse_header(json: &[u8]) -> Result<(FrameHeader, usize), ProtocolError> {
    let header: FrameHeader = serde_json::from_slice(json).map_err(|e| {
        // compact headers are a single line, so the column is the byte position
        let at = if e.line() <= 1 { e.column().saturating_sub(1) } else { 0 };
        ProtocolError::new(4 + at.min(json.len()), format!("invalid header: {e}"))
    })?;
    if header.protocol_version != PROTOCOL_VERSION {
        return Err(ProtocolError::new(4, format!("unsupported protocol version {}", header.protocol_version)));
    }
    if header.kind == FrameType::Request && header.cameras.len() != header.n_images {
        return Err(ProtocolError::new(4, format!("{} cameras for {} images", header.cameras.len(), header.n_images)));
    }
    let bytes = header
        .payload_len()
        .and_then(|n| n.checked_mul(4))
        .filter(|&b| b <= MAX_PAYLOAD_BYTES)
        .ok_or_else(|| ProtocolError::new(4, "payload size overflows the limit"))?;
    Ok((header, bytes))
}

fn samples(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect()
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Frame, ProtocolError> {
    if bytes.len() < 4 {
        return Err(ProtocolError::new(bytes.len(), "truncated length prefix"));
    }
    let hl = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    check_prefix(hl)?;
    if bytes.len() < 4 + hl {
        return Err(ProtocolError::new(bytes.len(), format!("truncated header: expected {hl} bytes")));
    }
    let (header, pl) = parse_header(&bytes[4..4 + hl])?;
    let end = 4 + hl + pl;
    if bytes.len() < end {
        return Err(ProtocolError::new(bytes.len(), format!("truncated payload: expected {pl} bytes")));
    }
    if bytes.len() > end {
        return Err(ProtocolError::new(end, format!("{} trailing bytes", bytes.len() - end)));
    }
    Ok(Frame { header, payload: samples(&bytes[4 + hl..]) })
}

/// Reads into `buf` until full; returns how many bytes arrived before EOF.
fn fill<R: Read + ?Sized>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

/// Reads one frame from a stream. Offsets in errors count from the start of
/// this frame.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Frame, ReadError> {
    let mut prefix = [0u8; 4];
    match fill(r, &mut prefix)? {
        0 => return Err(ReadError::Closed),
        4 => {}
        n => return Err(ProtocolError::new(n, "truncated length prefix").into()),
    }
    let hl = u32::from_le_bytes(prefix) as usize;
    check_prefix(hl)?;
    let mut json = vec![0u8; hl];
    let got = fill(r, &mut json)?;
    if got < hl {
        return Err(ProtocolError::new(4 + got, format!("truncated header: expected {hl} bytes")).into());
    }
    let (header, pl) = parse_header(&json)?;
    let mut payload = vec![0u8; pl];
    let got = fill(r, &mut payload)?;
    if got < pl {
        return Err(ProtocolError::new(4 + hl + got, format!("truncated payload: expected {pl} bytes")).into());
    }
    Ok(Frame { header, payload: samples(&payload) })
}
