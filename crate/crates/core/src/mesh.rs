//! Dense planar grid meshes built from VDM rasters.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::math::Vec3;
use crate::vdm::{vdm_to_world, VdmImage, VdmScale};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("degenerate face {face}: zero area")]
    DegenerateFace { face: usize },
    #[error("vertex {vertex} has a zero-length accumulated normal")]
    DegenerateVertex { vertex: usize },
    #[error("expected {expected} vertex positions, got {actual}")]
    VertexCount { expected: usize, actual: usize },
}

/// A `grid_w x grid_h` vertex lattice over the square `[-s/2, s/2]^2`
/// (`s` = plane side) with two triangles per cell.
///
/// Vertex `(i, j)` has index `j * grid_w + i` and rests at
/// `(-s/2 + s * i / (grid_w - 1), -s/2 + s * j / (grid_h - 1), 0)`. Every cell
/// is split along the diagonal from its lower-left to its upper-right corner;
/// both triangles wind counter-clockwise seen from +Z.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMesh {
    grid_w: usize,
    grid_h: usize,
    scale: VdmScale,
    vertices: Vec<Vec3>,
    rest_positions: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
}

impl GridMesh {
    /// Flat grid at rest. Panics if either dimension is below 2.
    pub fn flat(grid_w: usize, grid_h: usize, scale: VdmScale) -> Self {
        assert!(grid_w >= 2 && grid_h >= 2, "grid must be at least 2x2");
        let side = scale.plane_side();
        let mut rest = Vec::with_capacity(grid_w * grid_h);
        for j in 0..grid_h {
            for i in 0..grid_w {
                rest.push(Vec3::new(
                    -0.5 * side + side * i as f64 / (grid_w - 1) as f64,
                    -0.5 * side + side * j as f64 / (grid_h - 1) as f64,
                    0.0,
                ));
            }
        }
        let mut faces = Vec::with_capacity(2 * (grid_w - 1) * (grid_h - 1));
        let idx = |i: usize, j: usize| (j * grid_w + i) as u32;
        for j in 0..grid_h - 1 {
            for i in 0..grid_w - 1 {
                let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
                faces.push([v00, v10, v11]);
                faces.push([v00, v11, v01]);
            }
        }
        Self { grid_w, grid_h, scale, vertices: rest.clone(), rest_positions: rest, faces }
    }

    #[inline]
    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    #[inline]
    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    #[inline]
    pub fn scale(&self) -> VdmScale {
        self.scale
    }

    #[inline]
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    #[inline]
    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    #[inline]
    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    /// Mutable positions. Topology is fixed, so only positions can change.
    #[inline]
    pub fn vertices_mut(&mut self) -> &mut [Vec3] {
        &mut self.vertices
    }

    pub fn set_vertices(&mut self, positions: Vec<Vec3>) -> Result<(), MeshError> {
        if positions.len() != self.vertices.len() {
            return Err(MeshError::VertexCount { expected: self.vertices.len(), actual: positions.len() });
        }
        self.vertices = positions;
        Ok(())
    }

    #[inline]
    pub fn rest_positions(&self) -> &[Vec3] {
        &self.rest_positions
    }

    #[inline]
    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    #[inline]
    pub fn vertex_index(&self, i: usize, j: usize) -> usize {
        j * self.grid_w + i
    }

    /// Same lattice dimensions (hence identical connectivity).
    pub fn same_topology(&self, other: &GridMesh) -> bool {
        self.grid_w == other.grid_w && self.grid_h == other.grid_h
    }

    /// Unique undirected edges `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut edges: Vec<(u32, u32)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn face_normals(&self) -> Result<Vec<Vec3>, MeshError> {
        face_normals(&self.vertices, &self.faces)
    }

    pub fn vertex_normals(&self) -> Result<Vec<Vec3>, MeshError> {
        vertex_normals(&self.vertices, &self.faces)
    }

    /// Axis-aligned bounds of the current positions.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        self.vertices
            .iter()
            .fold((Vec3::splat(f64::INFINITY), Vec3::splat(f64::NEG_INFINITY)), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Lifts a VDM onto a grid mesh with one vertex per pixel.
pub fn build_grid_mesh(vdm: &VdmImage, scale: &VdmScale) -> GridMesh {
    let mut mesh = GridMesh::flat(vdm.width(), vdm.height(), *scale);
    for (v, d) in mesh.vertices.iter_mut().zip(vdm_to_world(vdm, scale)) {
        *v += d;
    }
    mesh
}

/// Unnormalized face normal `(b - a) x (c - a)`; its length is twice the area.
#[inline]
pub(crate) fn face_cross(vertices: &[Vec3], f: &[u32; 3]) -> Vec3 {
    let a = vertices[f[0] as usize];
    (vertices[f[1] as usize] - a).cross(vertices[f[2] as usize] - a)
}

pub fn face_normals(vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<Vec<Vec3>, MeshError> {
    faces
        .iter()
        .enumerate()
        .map(|(fi, f)| face_cross(vertices, f).normalized().ok_or(MeshError::DegenerateFace { face: fi }))
        .collect()
}

/// Area-weighted vertex normals.
pub fn vertex_normals(vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<Vec<Vec3>, MeshError> {
    let acc = accumulated_normals(vertices, faces)?;
    acc.into_iter()
        .enumerate()
        .map(|(vi, m)| m.normalized().ok_or(MeshError::DegenerateVertex { vertex: vi }))
        .collect()
}

/// Sum of incident face cross products per vertex. Fails on zero-area faces.
pub(crate) fn accumulated_normals(vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<Vec<Vec3>, MeshError> {
    let mut acc = vec![Vec3::ZERO; vertices.len()];
    for (fi, f) in faces.iter().enumerate() {
        let c = face_cross(vertices, f);
        if !(c.norm_squared() > 0.0) {
            return Err(MeshError::DegenerateFace { face: fi });
        }
        for &v in f {
            acc[v as usize] += c;
        }
    }
    Ok(acc)
}
