//! Guidance served by another process over the frame protocol.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use vdmforge_core::{GridMesh, GuidanceError, GuidanceProvider, GuidanceResponse, GuidanceView};

use crate::frame::{read_frame, write_frame, CameraParams, Capabilities, Frame, FrameHeader, FrameType, ReadError};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Where the guidance server lives: `tcp://host:port` (or bare
/// `host:port`), or `stdio:program args...` for a child process speaking
/// the protocol on stdin/stdout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Stdio { program: String, args: Vec<String> },
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if let Some(cmd) = s.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts.next().ok_or("stdio endpoint needs a program")?;
            return Ok(Endpoint::Stdio { program, args: parts.collect() });
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        match addr.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(Endpoint::Tcp(addr.into())),
            _ => Err(format!("unrecognized endpoint '{s}', expected tcp://host:port or stdio:program")),
        }
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            Endpoint::Stdio { program, args } => write!(f, "stdio:{program} {}", args.join(" ")),
        }
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    frames: Receiver<Result<Frame, ReadError>>,
    child: Option<Child>,
    socket: Option<TcpStream>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(s) = &self.socket {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(c) = &mut self.child {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn spawn_reader(mut input: impl Read + Send + 'static) -> Receiver<Result<Frame, ReadError>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || loop {
        let item = read_frame(&mut input);
        let stop = item.is_err();
        if tx.send(item).is_err() || stop {
            break;
        }
    });
    rx
}

pub struct ExternalGuidance {
    endpoint: Endpoint,
    timeout: Duration,
    prompt: Option<serde_json::Value>,
    conn: Option<Connection>,
    server: Option<Capabilities>,
}

impl ExternalGuidance {
    pub fn new(endpoint: Endpoint) -> Self {
        Self { endpoint, timeout: DEFAULT_TIMEOUT, prompt: None, conn: None, server: None }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Prompt specification sent to the server in the handshake.
    pub fn with_prompt(mut self, prompt: serde_json::Value) -> Self {
        self.prompt = Some(prompt);
        self
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Capabilities announced by the server, once connected.
    pub fn server_capabilities(&self) -> Option<Capabilities> {
        self.server
    }

    fn open(&self) -> Result<Connection, GuidanceError> {
        let unavailable = |e: std::io::Error| GuidanceError::Unavailable(format!("{}: {e}", self.endpoint));
        match &self.endpoint {
            Endpoint::Tcp(addr) => {
                let sock = addr
                    .to_socket_addrs()
                    .map_err(unavailable)?
                    .next()
                    .ok_or_else(|| GuidanceError::Unavailable(format!("{addr} resolves to nothing")))?;
                let stream = TcpStream::connect_timeout(&sock, self.timeout).map_err(unavailable)?;
                stream.set_nodelay(true).ok();
                let read = stream.try_clone().map_err(unavailable)?;
                let write = stream.try_clone().map_err(unavailable)?;
                Ok(Connection {
                    writer: Box::new(BufWriter::new(write)),
                    frames: spawn_reader(BufReader::new(read)),
                    child: None,
                    socket: Some(stream),
                })
            }
            Endpoint::Stdio { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(unavailable)?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Connection {
                    writer: Box::new(BufWriter::new(stdin)),
                    frames: spawn_reader(BufReader::new(stdout)),
                    child: Some(child),
                    socket: None,
                })
            }
        }
    }

    fn exchange(&mut self, frame: &Frame) -> Result<Frame, GuidanceError> {
        let conn = self.conn.as_mut().expect("connected");
        let result = match write_frame(&mut conn.writer, frame) {
            Err(e) => Err(GuidanceError::Unavailable(format!("send failed: {e}"))),
            Ok(()) => match conn.frames.recv_timeout(self.timeout) {
                Ok(Ok(f)) => Ok(f),
                Ok(Err(ReadError::Protocol(p))) => Err(GuidanceError::Protocol { offset: p.offset, reason: p.reason }),
                Ok(Err(ReadError::Closed)) | Err(RecvTimeoutError::Disconnected) => {
                    Err(GuidanceError::Unavailable("server closed the connection".into()))
                }
                Ok(Err(ReadError::Io(e))) => Err(GuidanceError::Unavailable(e.to_string())),
                Err(RecvTimeoutError::Timeout) => Err(GuidanceError::Timeout { seconds: self.timeout.as_secs() }),
            },
        };
        if result.is_err() {
            // a late or partial reply must never be paired with the next request
            self.conn = None;
        }
        result
    }

    fn ensure_connected(&mut self) -> Result<(), GuidanceError> {
        if self.conn.is_some() {
            return Ok(());
        }
        self.conn = Some(self.open()?);
        let caps = Capabilities { max_resolution: u32::MAX, supports_converged_flag: true };
        let reply = self.exchange(&Frame::handshake(caps, self.prompt.clone()))?;
        match (reply.header.kind, reply.header.capabilities) {
            (FrameType::Handshake, Some(c)) => {
                log::info!("guidance server at {}: {c:?}", self.endpoint);
                self.server = Some(c);
                Ok(())
            }
            (FrameType::Error, _) => {
                self.conn = None;
                Err(GuidanceError::Other(reply.header.message.unwrap_or_else(|| "handshake rejected".into())))
            }
            _ => {
                self.conn = None;
                Err(GuidanceError::Protocol {
                    offset: 4,
                    reason: "expected a handshake frame with capabilities".into(),
                })
            }
        }
    }

    fn request(&self, iteration: usize, views: &[GuidanceView<'_>]) -> Result<Frame, GuidanceError> {
        let first = views.first().ok_or_else(|| GuidanceError::Other("no views".into()))?;
        let (w, h) = (first.camera.width, first.camera.height);
        let mut header = FrameHeader::new(FrameType::Request);
        header.iteration = iteration as u64;
        header.n_images = views.len();
        header.width = w;
        header.height = h;
        header.normal_space = Some(first.space.into());
        let mut payload = Vec::with_capacity(views.len() * w * h * 3);
        for (i, v) in views.iter().enumerate() {
            if (v.camera.width, v.camera.height) != (w, h) || v.image.len() != w * h * 3 {
                return Err(GuidanceError::Shape { view: i, reason: "all views must share one resolution".into() });
            }
            if v.space != first.space {
                return Err(GuidanceError::Shape { view: i, reason: "all views must share one normal space".into() });
            }
            header.cameras.push(CameraParams::from(v.camera));
            payload.extend(v.image.iter().map(|&x| x as f32));
        }
        if let Some(c) = self.server {
            if w.max(h) > c.max_resolution as usize {
                return Err(GuidanceError::Shape {
                    view: 0,
                    reason: format!("{w}x{h} exceeds the server's max resolution {}", c.max_resolution),
                });
            }
        }
        Ok(Frame { header, payload })
    }
}

impl GuidanceProvider for ExternalGuidance {
    fn begin(&mut self, _mesh: &GridMesh) -> Result<(), GuidanceError> {
        self.ensure_connected()
    }

    fn evaluate(&mut self, iteration: usize, views: &[GuidanceView<'_>]) -> Result<GuidanceResponse, GuidanceError> {
        self.ensure_connected()?;
        let req = self.request(iteration, views)?;
        let reply = self.exchange(&req)?;
        let hd = &reply.header;
        if hd.kind == FrameType::Error {
            return Err(GuidanceError::Other(hd.message.clone().unwrap_or_else(|| "server error".into())));
        }
        let mut mismatch = |reason: String| {
            self.conn = None;
            Err(GuidanceError::Protocol { offset: 4, reason })
        };
        if hd.kind != FrameType::Response || hd.iteration != req.header.iteration {
            return mismatch(format!(
                "expected response to iteration {}, got {:?} {}",
                iteration, hd.kind, hd.iteration
            ));
        }
        if (hd.n_images, hd.width, hd.height) != (req.header.n_images, req.header.width, req.header.height) {
            return mismatch(format!(
                "response shape {}x{}x{} does not match request {}x{}x{}",
                hd.n_images, hd.width, hd.height, req.header.n_images, req.header.width, req.header.height
            ));
        }
        let Some(loss) = hd.loss else {
            return mismatch("response frame carries no loss".into());
        };
        let pixel_grads = (0..hd.n_images).map(|i| reply.image(i).iter().map(|&g| g as f64).collect()).collect();
        Ok(GuidanceResponse { pixel_grads, loss, converged: hd.converged.unwrap_or(false) })
    }
}
