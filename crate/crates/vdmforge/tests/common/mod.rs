#![allow(dead_code)]

use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::thread;

use vdmforge::exr_io;
use vdmforge::frame::{encode, read_frame, write_frame, Frame};
use vdmforge::server::MOCK_CAPABILITIES;
use vdmforge_core::vdm::make_gaussian_bump_vdm;
use vdmforge_core::{build_grid_mesh, GridMesh, OptimConfig, StepRule, VdmImage, VdmScale};

pub const AMPLITUDE_VDM: f64 = 0.6;
pub const SIGMA_UV: f64 = 0.15;

/// Amplitude 0.3 plane sides (VDM units are half a side), sigma 0.15 sides.
pub fn bump(resolution: usize) -> VdmImage {
    make_gaussian_bump_vdm(resolution, (0.5, 0.5), SIGMA_UV, AMPLITUDE_VDM).unwrap()
}

pub fn unit() -> VdmScale {
    VdmScale::new(1.0).unwrap()
}

pub fn flat(n: usize) -> GridMesh {
    GridMesh::flat(n, n, unit())
}

pub fn bump_mesh(n: usize) -> GridMesh {
    build_grid_mesh(&bump(n), &unit())
}

pub fn small_config(iterations: usize) -> OptimConfig {
    OptimConfig { max_iterations: iterations, render_resolution: 48, ..OptimConfig::default() }
}

pub fn plain(iterations: usize) -> OptimConfig {
    OptimConfig { step_rule: StepRule::Plain, lambda: 0.0, ..small_config(iterations) }
}

pub fn write_exr(dir: &Path, name: &str, vdm: &VdmImage) -> std::path::PathBuf {
    let p = dir.join(name);
    exr_io::save_exr(vdm, &p).unwrap();
    p
}

/// A hand-driven peer: answers the handshake, then lets `script` handle the
/// rest of each connection.
pub fn scripted_server<F>(script: F) -> SocketAddr
where
    F: Fn(usize, &mut BufReader<TcpStream>, &mut BufWriter<TcpStream>) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for (k, stream) in listener.incoming().enumerate() {
            let Ok(stream) = stream else { return };
            let mut r = BufReader::new(stream.try_clone().unwrap());
            let mut w = BufWriter::new(stream);
            let Ok(hello) = read_frame(&mut r) else { continue };
            assert_eq!(hello.header.kind, vdmforge::frame::FrameType::Handshake);
            write_frame(&mut w, &Frame::handshake(MOCK_CAPABILITIES, None)).unwrap();
            script(k, &mut r, &mut w);
        }
    });
    addr
}

/// Sends a frame's bytes minus the last `short` and closes.
pub fn send_truncated(w: &mut BufWriter<TcpStream>, frame: &Frame, short: usize) {
    let bytes = encode(frame);
    w.write_all(&bytes[..bytes.len() - short]).unwrap();
    w.flush().unwrap();
    w.get_ref().shutdown(std::net::Shutdown::Both).ok();
}
