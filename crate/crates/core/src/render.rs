//! Depth-buffered normal-map rasterizer and its vertex-gradient backward pass.
//!
//! Coverage and visibility are treated as constants in the backward pass;
//! gradients flow through the normal encoding, the perspective-correct
//! barycentric weights and the area-weighted vertex normals.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::camera::{Camera, CameraFrame};
use crate::math::{det3, Vec3};
use crate::mesh::{accumulated_normals, GridMesh, MeshError};

/// Encoding of an uncovered pixel: the +Z normal of the rest plane.
pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 1.0];

/// Face index marking an uncovered pixel.
pub const NO_FACE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RenderError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("pixel gradient buffer has {actual} values, expected {expected}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("render has {actual} vertices worth of support, mesh has {expected}")]
    MeshMismatch { expected: usize, actual: usize },
}

/// Frame in which rendered normals are expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalSpace {
    #[default]
    World,
    /// `(n . right, n . up, -n . forward)`: normals facing the camera are +Z.
    Camera,
}

#[inline]
pub fn encode_normal(n: Vec3) -> [f64; 3] {
    [(n.x + 1.0) * 0.5, (n.y + 1.0) * 0.5, (n.z + 1.0) * 0.5]
}

#[inline]
pub fn decode_normal(rgb: [f64; 3]) -> Vec3 {
    Vec3::new(2.0 * rgb[0] - 1.0, 2.0 * rgb[1] - 1.0, 2.0 * rgb[2] - 1.0)
}

/// A rendered normal image with the per-pixel data needed for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalRender {
    pub camera: Camera,
    pub space: NormalSpace,
    pub width: usize,
    pub height: usize,
    /// Row-major `height x width x 3`, values in `[0, 1]`.
    pub image: Vec<f64>,
    /// Covering face per pixel, [`NO_FACE`] for background.
    pub face: Vec<u32>,
    /// Perspective-correct barycentric weights of the covering face.
    pub bary: Vec<[f64; 3]>,
    /// View depth of the visible surface, `+inf` for background.
    pub depth: Vec<f64>,
    vertex_count: usize,
}

impl NormalRender {
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.image[o], self.image[o + 1], self.image[o + 2]]
    }

    pub fn covered_pixels(&self) -> usize {
        self.face.iter().filter(|&&f| f != NO_FACE).count()
    }

    /// 8-bit RGB copy of the image.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.image.iter().map(|&v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8).collect()
    }

    /// Box-filtered copy reduced by an integer `factor` (at least 1).
    pub fn downsampled(&self, factor: usize) -> (usize, usize, Vec<f64>) {
        let f = factor.max(1);
        let (w, h) = (self.width.div_ceil(f), self.height.div_ceil(f));
        let mut out = vec![0.0; w * h * 3];
        let mut count = vec![0usize; w * h];
        for y in 0..self.height {
            for x in 0..self.width {
                let d = (y / f) * w + x / f;
                count[d] += 1;
                for c in 0..3 {
                    out[d * 3 + c] += self.image[(y * self.width + x) * 3 + c];
                }
            }
        }
        for (d, &n) in count.iter().enumerate() {
            for c in 0..3 {
                out[d * 3 + c] /= n as f64;
            }
        }
        (w, h, out)
    }
}

/// Ray/triangle triple products `(V_a, V_b, V_c)`; the normalized triple is
/// the barycentric weight of the ray's hit point.
#[inline]
fn triple_products(o: Vec3, d: Vec3, a: Vec3, b: Vec3, c: Vec3) -> [f64; 3] {
    let (ao, bo, co) = (a - o, b - o, c - o);
    [det3(bo, co, d), det3(co, ao, d), det3(ao, bo, d)]
}

#[inline]
fn to_space(n: Vec3, frame: &CameraFrame, space: NormalSpace) -> Vec3 {
    match space {
        NormalSpace::World => n,
        NormalSpace::Camera => Vec3::new(n.dot(frame.right), n.dot(frame.up), -n.dot(frame.forward)),
    }
}

/// Transpose of [`to_space`], mapping a gradient back to world space.
#[inline]
fn from_space(g: Vec3, frame: &CameraFrame, space: NormalSpace) -> Vec3 {
    match space {
        NormalSpace::World => g,
        NormalSpace::Camera => frame.right * g.x + frame.up * g.y - frame.forward * g.z,
    }
}

pub fn rasterize_normals(mesh: &GridMesh, camera: &Camera) -> Result<NormalRender, RenderError> {
    rasterize_normals_in(mesh, camera, NormalSpace::World)
}

pub fn rasterize_normals_in(mesh: &GridMesh, camera: &Camera, space: NormalSpace) -> Result<NormalRender, RenderError> {
    let verts = mesh.vertices();
    let normals: Vec<Vec3> = accumulated_normals(verts, mesh.faces())?
        .into_iter()
        .enumerate()
        .map(|(i, m)| m.normalized().ok_or(MeshError::DegenerateVertex { vertex: i }))
        .collect::<Result<_, _>>()?;

    let frame = camera.frame();
    let (lo, hi) = mesh.bounds();
    let eye = frame.eye;
    if eye.x >= lo.x && eye.y >= lo.y && eye.z >= lo.z && eye.x <= hi.x && eye.y <= hi.y && eye.z <= hi.z {
        log::warn!("camera at {:?} is inside the mesh bounding box", eye);
    }

    let (w, h) = (camera.width, camera.height);
    let near = camera.near_plane();
    let mut face_buf = vec![NO_FACE; w * h];
    let mut bary = vec![[0.0; 3]; w * h];
    let mut depth = vec![f64::INFINITY; w * h];

    for (fi, f) in mesh.faces().iter().enumerate() {
        let (a, b, c) = (verts[f[0] as usize], verts[f[1] as usize], verts[f[2] as usize]);
        let (Some(pa), Some(pb), Some(pc)) =
            (camera.project(&frame, a, near), camera.project(&frame, b, near), camera.project(&frame, c, near))
        else {
            continue;
        };
        let min_x = pa.0.min(pb.0).min(pc.0);
        let max_x = pa.0.max(pb.0).max(pc.0);
        let min_y = pa.1.min(pb.1).min(pc.1);
        let max_y = pa.1.max(pb.1).max(pc.1);
        if max_x < 0.0 || max_y < 0.0 || min_x > w as f64 || min_y > h as f64 {
            continue;
        }
        let x0 = libm::floor(min_x - 0.5).max(0.0) as usize;
        let y0 = libm::floor(min_y - 0.5).max(0.0) as usize;
        let x1 = (libm::ceil(max_x - 0.5).max(0.0) as usize).min(w - 1);
        let y1 = (libm::ceil(max_y - 0.5).max(0.0) as usize).min(h - 1);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let d = camera.ray_dir(&frame, px, py);
                let v = triple_products(eye, d, a, b, c);
                let inside = (v[0] >= 0.0 && v[1] >= 0.0 && v[2] >= 0.0) || (v[0] <= 0.0 && v[1] <= 0.0 && v[2] <= 0.0);
                let s = v[0] + v[1] + v[2];
                if !inside || s == 0.0 {
                    continue;
                }
                let wgt = [v[0] / s, v[1] / s, v[2] / s];
                let hit = a * wgt[0] + b * wgt[1] + c * wgt[2];
                let z = (hit - eye).dot(frame.forward);
                let p = py * w + px;
                if z > near && z < depth[p] {
                    depth[p] = z;
                    face_buf[p] = fi as u32;
                    bary[p] = wgt;
                }
            }
        }
    }

    let mut image = Vec::with_capacity(w * h * 3);
    for p in 0..w * h {
        let fi = face_buf[p];
        let rgb = if fi == NO_FACE {
            BACKGROUND
        } else {
            let f = mesh.faces()[fi as usize];
            let wgt = bary[p];
            let m = normals[f[0] as usize] * wgt[0] + normals[f[1] as usize] * wgt[1] + normals[f[2] as usize] * wgt[2];
            match m.normalized() {
                Some(n) => encode_normal(to_space(n, &frame, space)),
                None => {
                    // opposing vertex normals cancel: leave as background
                    face_buf[p] = NO_FACE;
                    depth[p] = f64::INFINITY;
                    BACKGROUND
                }
            }
        };
        image.extend_from_slice(&rgb);
    }

    Ok(NormalRender {
        camera: *camera,
        space,
        width: w,
        height: h,
        image,
        face: face_buf,
        bary,
        depth,
        vertex_count: mesh.vertex_count(),
    })
}

/// Pulls `d loss / d pixel` (same layout as the image) back to
/// `d loss / d vertex position`.
pub fn backprop_to_vertices(
    render: &NormalRender,
    pixel_grads: &[f64],
    mesh: &GridMesh,
) -> Result<Vec<Vec3>, RenderError> {
    let mut grad = vec![Vec3::ZERO; mesh.vertex_count()];
    backprop_accumulate(render, pixel_grads, mesh, &mut grad)?;
    Ok(grad)
}

/// Like [`backprop_to_vertices`] but adds into an existing buffer.
pub fn backprop_accumulate(
    render: &NormalRender,
    pixel_grads: &[f64],
    mesh: &GridMesh,
    grad: &mut [Vec3],
) -> Result<(), RenderError> {
    let expected = render.width * render.height * 3;
    if pixel_grads.len() != expected {
        return Err(RenderError::ShapeMismatch { expected, actual: pixel_grads.len() });
    }
    if render.vertex_count != mesh.vertex_count() || grad.len() != mesh.vertex_count() {
        return Err(RenderError::MeshMismatch { expected: mesh.vertex_count(), actual: render.vertex_count });
    }
    let verts = mesh.vertices();
    let faces = mesh.faces();
    let acc = accumulated_normals(verts, faces)?;
    let normals: Vec<Vec3> = acc.iter().map(|m| m.normalized().unwrap_or(Vec3::ZERO)).collect();
    let frame = render.camera.frame();
    let eye = frame.eye;

    let mut g_normal = vec![Vec3::ZERO; mesh.vertex_count()];
    for (p, &fi) in render.face.iter().enumerate() {
        if fi == NO_FACE {
            continue;
        }
        let g_rgb = Vec3::new(pixel_grads[p * 3], pixel_grads[p * 3 + 1], pixel_grads[p * 3 + 2]);
        if g_rgb == Vec3::ZERO {
            continue;
        }
        let f = faces[fi as usize];
        let idx = [f[0] as usize, f[1] as usize, f[2] as usize];
        let wgt = render.bary[p];
        let nk = [normals[idx[0]], normals[idx[1]], normals[idx[2]]];

        // rgb = (n + 1) / 2
        let g_n = from_space(g_rgb * 0.5, &frame, render.space);
        let m = nk[0] * wgt[0] + nk[1] * wgt[1] + nk[2] * wgt[2];
        let len = m.norm();
        let n = m / len;
        let g_m = (g_n - n * n.dot(g_n)) / len;

        let mut g_w = [0.0; 3];
        for k in 0..3 {
            g_normal[idx[k]] += g_m * wgt[k];
            g_w[k] = g_m.dot(nk[k]);
        }

        // w_k = V_k / S
        let (px, py) = (p % render.width, p / render.width);
        let d = render.camera.ray_dir(&frame, px, py);
        let (a, b, c) = (verts[idx[0]], verts[idx[1]], verts[idx[2]]);
        let v = triple_products(eye, d, a, b, c);
        let s = v[0] + v[1] + v[2];
        let mean = g_w[0] * wgt[0] + g_w[1] * wgt[1] + g_w[2] * wgt[2];
        let g_v = [(g_w[0] - mean) / s, (g_w[1] - mean) / s, (g_w[2] - mean) / s];
        let (ao, bo, co) = (a - eye, b - eye, c - eye);
        // V_a = det(b-o, c-o, d), V_b = det(c-o, a-o, d), V_c = det(a-o, b-o, d)
        grad[idx[0]] += d.cross(co) * g_v[1] + bo.cross(d) * g_v[2];
        grad[idx[1]] += co.cross(d) * g_v[0] + d.cross(ao) * g_v[2];
        grad[idx[2]] += d.cross(bo) * g_v[0] + ao.cross(d) * g_v[1];
    }

    // n_v = m_v / |m_v|, m_v = sum of incident (b - a) x (c - a)
    let g_acc: Vec<Vec3> = g_normal
        .iter()
        .zip(&acc)
        .zip(&normals)
        .map(|((&g, m), &n)| if g == Vec3::ZERO { g } else { (g - n * n.dot(g)) / m.norm() })
        .collect();
    for f in faces {
        let idx = [f[0] as usize, f[1] as usize, f[2] as usize];
        let g_c = g_acc[idx[0]] + g_acc[idx[1]] + g_acc[idx[2]];
        if g_c == Vec3::ZERO {
            continue;
        }
        let e1 = verts[idx[1]] - verts[idx[0]];
        let e2 = verts[idx[2]] - verts[idx[0]];
        let g_e1 = e2.cross(g_c);
        let g_e2 = g_c.cross(e1);
        grad[idx[1]] += g_e1;
        grad[idx[2]] += g_e2;
        grad[idx[0]] -= g_e1 + g_e2;
    }
    Ok(())
}
