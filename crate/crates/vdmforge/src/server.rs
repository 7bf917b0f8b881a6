//! Serving any in-process provider over the frame protocol. This is the
//! primary-side mock used to exercise the wire path without the sidecar.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::thread::{self, JoinHandle};

use vdmforge_core::{GuidanceProvider, GuidanceView, NormalSpace};

use crate::frame::{read_frame, write_frame, Capabilities, Frame, FrameHeader, FrameType, ProtocolError, ReadError};

pub const MOCK_CAPABILITIES: Capabilities = Capabilities { max_resolution: 4096, supports_converged_flag: true };

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

fn respond<P: GuidanceProvider + ?Sized>(provider: &mut P, req: &Frame) -> Frame {
    let hd = &req.header;
    let (w, h) = (hd.width, hd.height);
    let space: NormalSpace = hd.normal_space.map(Into::into).unwrap_or_default();
    let cameras: Vec<_> = hd.cameras.iter().map(|c| c.to_camera(w, h)).collect();
    let images: Vec<Vec<f64>> = (0..hd.n_images).map(|i| req.image(i).iter().map(|&x| x as f64).collect()).collect();
    let views: Vec<GuidanceView<'_>> =
        cameras.iter().zip(&images).map(|(camera, image)| GuidanceView { camera, space, image }).collect();
    let iteration = hd.iteration;
    let result = provider.evaluate(iteration as usize, &views).and_then(|r| r.validate(&views).map(|_| r));
    match result {
        Ok(r) => {
            let mut header = FrameHeader::new(FrameType::Response);
            header.iteration = iteration;
            header.n_images = hd.n_images;
            header.width = w;
            header.height = h;
            header.loss = Some(r.loss);
            header.converged = Some(r.converged);
            let payload = r.pixel_grads.iter().flatten().map(|&g| g as f32).collect();
            Frame { header, payload }
        }
        Err(e) => Frame::error(iteration, e.to_string()),
    }
}

/// Answers frames until the peer closes the stream.
pub fn serve_connection<P, R, W>(provider: &mut P, reader: R, writer: W, caps: Capabilities) -> Result<(), ServeError>
where
    P: GuidanceProvider + ?Sized,
    R: Read,
    W: Write,
{
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(ReadError::Closed) => return Ok(()),
            Err(ReadError::Io(e)) => return Err(e.into()),
            Err(ReadError::Protocol(p)) => {
                let _ = write_frame(&mut writer, &Frame::error(0, p.to_string()));
                return Err(p.into());
            }
        };
        let reply = match frame.header.kind {
            FrameType::Handshake => Frame::handshake(caps, None),
            FrameType::Request => respond(provider, &frame),
            other => Frame::error(frame.header.iteration, format!("unexpected {other:?} frame")),
        };
        write_frame(&mut writer, &reply)?;
    }
}

/// Accepts connections one at a time, forever.
pub fn serve_tcp<P: GuidanceProvider + ?Sized>(
    listener: TcpListener,
    provider: &mut P,
    caps: Capabilities,
) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true).ok();
        let peer = stream.peer_addr().ok();
        let read = stream.try_clone()?;
        if let Err(e) = serve_connection(provider, read, stream, caps) {
            log::warn!("guidance connection {peer:?} ended: {e}");
        }
    }
    Ok(())
}

/// A provider served on an ephemeral localhost port from a background thread.
pub struct MockServer {
    pub addr: SocketAddr,
    _thread: JoinHandle<()>,
}

impl MockServer {
    pub fn spawn<P: GuidanceProvider + Send + 'static>(provider: P) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let mut provider = provider;
        let thread = thread::spawn(move || {
            let _ = serve_tcp(listener, &mut provider, MOCK_CAPABILITIES);
        });
        Ok(Self { addr, _thread: thread })
    }

    pub fn endpoint(&self) -> String {
        format!("tcp://{}", self.addr)
    }
}
