//! Wavefront OBJ for grid meshes. The writer records the grid shape in a
//! comment so the rest plane can be rebuilt when baking a loaded mesh.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;
use vdmforge_core::vdm::{VdmError, VdmScale};
use vdmforge_core::{GridMesh, Vec3};

const GRID_TAG: &str = "# vdmforge grid";

#[derive(Debug, Error)]
pub enum ObjError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("missing '{GRID_TAG} W H plane_side' header; only grid meshes written by vdmforge can be baked")]
    MissingGrid,
    #[error("grid {w}x{h} needs {} vertices, file has {found}", w * h)]
    VertexCount { w: usize, h: usize, found: usize },
    #[error("face list does not match the {w}x{h} grid topology")]
    Topology { w: usize, h: usize },
    #[error(transparent)]
    Scale(#[from] VdmError),
}

pub fn to_obj_string(mesh: &GridMesh) -> String {
    let mut s = String::with_capacity(mesh.vertex_count() * 40 + mesh.face_count() * 24);
    let _ = writeln!(s, "{GRID_TAG} {} {} {}", mesh.grid_w(), mesh.grid_h(), mesh.scale().plane_side());
    for v in mesh.vertices() {
        // shortest round-trip formatting keeps OBJ export lossless
        let _ = writeln!(s, "v {:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn save_obj(mesh: &GridMesh, path: impl AsRef<Path>) -> Result<(), ObjError> {
    let path = path.as_ref();
    std::fs::write(path, to_obj_string(mesh)).map_err(|source| ObjError::Io { path: path.into(), source })
}

pub fn parse_obj(text: &str) -> Result<GridMesh, ObjError> {
    let mut grid = None;
    let mut verts = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let err = |reason: &str| ObjError::Parse { line, reason: reason.into() };
        if let Some(rest) = raw.strip_prefix(GRID_TAG) {
            let f: Vec<&str> = rest.split_whitespace().collect();
            let [w, h, side] = f[..] else { return Err(err("grid header needs W H plane_side")) };
            let w: usize = w.parse().map_err(|_| err("bad grid width"))?;
            let h: usize = h.parse().map_err(|_| err("bad grid height"))?;
            let side: f64 = side.parse().map_err(|_| err("bad plane side"))?;
            grid = Some((w, h, side));
            continue;
        }
        let mut it = raw.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for x in &mut c {
                    *x = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| err("vertex needs three numbers"))?;
                }
                verts.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        match first.parse::<i64>() {
                            Ok(i) if i > 0 => Ok(i as u32 - 1),
                            Ok(i) if i < 0 && (-i) as usize <= verts.len() => Ok((verts.len() as i64 + i) as u32),
                            _ => Err(err("bad face index")),
                        }
                    })
                    .collect::<Result<_, _>>()?;
                if idx.len() != 3 {
                    return Err(err("only triangles are supported"));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }

    let (w, h, side) = grid.ok_or(ObjError::MissingGrid)?;
    let mut mesh = GridMesh::flat(w, h, VdmScale::new(side)?);
    if verts.len() != mesh.vertex_count() {
        return Err(ObjError::VertexCount { w, h, found: verts.len() });
    }
    if !faces.is_empty() && faces != mesh.faces() {
        return Err(ObjError::Topology { w, h });
    }
    mesh.set_vertices(verts).map_err(|_| ObjError::VertexCount { w, h, found: 0 })?;
    Ok(mesh)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<GridMesh, ObjError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ObjError::Io { path: path.into(), source })?;
    parse_obj(&text)
}
