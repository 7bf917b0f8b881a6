//! Analytic vertex gradients of an image loss against central differences.

#![allow(clippy::needless_range_loop)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vdmforge_core::camera::{sample_cameras, CameraRig};
use vdmforge_core::mesh::build_grid_mesh;
use vdmforge_core::render::{backprop_to_vertices, rasterize_normals, NormalRender, NO_FACE};
use vdmforge_core::vdm::{make_gaussian_bump_vdm, VdmScale};
use vdmforge_core::{Camera, GridMesh, Vec3};

fn sq_err(r: &NormalRender, target: &[f64]) -> f64 {
    r.image.iter().zip(target).map(|(x, t)| (x - t) * (x - t)).sum()
}

fn bump_mesh() -> GridMesh {
    build_grid_mesh(&make_gaussian_bump_vdm(9, (0.5, 0.5), 0.18, 0.5).unwrap(), &VdmScale::default())
}

fn target_image(cam: &Camera) -> Vec<f64> {
    let m = build_grid_mesh(&make_gaussian_bump_vdm(9, (0.45, 0.55), 0.12, 0.8).unwrap(), &VdmScale::default());
    rasterize_normals(&m, cam).unwrap().image
}

fn agrees(analytic: f64, fd: f64) -> bool {
    (fd - analytic).abs() <= 1e-3 * analytic.abs().max(fd.abs())
}

#[derive(Default)]
struct Tally {
    ok: usize,
    checked: usize,
    /// Same counts restricted to coordinates whose perturbation leaves every
    /// pixel on its face.
    stable_ok: usize,
    stable: usize,
}

fn fd_tally(cam: &Camera, tally: &mut Tally) {
    let mesh = bump_mesh();
    let target = target_image(cam);
    let r = rasterize_normals(&mesh, cam).unwrap();
    let residual: Vec<f64> = r.image.iter().zip(&target).map(|(x, t)| x - t).collect();
    // d(sum r^2) = 2 r
    let grad: Vec<Vec3> = backprop_to_vertices(&r, &residual, &mesh).unwrap().into_iter().map(|g| g * 2.0).collect();

    let h = 1e-4 * mesh.scale().plane_side();
    for v in 0..mesh.vertex_count() {
        for c in 0..3 {
            let g = grad[v][c];
            if g.abs() <= 1e-8 {
                continue;
            }
            let mut plus = mesh.clone();
            plus.vertices_mut()[v][c] += h;
            let mut minus = mesh.clone();
            minus.vertices_mut()[v][c] -= h;
            let (rp, rm) = (rasterize_normals(&plus, cam).unwrap(), rasterize_normals(&minus, cam).unwrap());
            let fd = (sq_err(&rp, &target) - sq_err(&rm, &target)) / (2.0 * h);
            let ok = agrees(g, fd);
            tally.checked += 1;
            tally.ok += ok as usize;
            if rp.face == r.face && rm.face == r.face {
                tally.stable += 1;
                tally.stable_ok += ok as usize;
            }
        }
    }
}

fn sampled_cameras() -> Vec<Camera> {
    sample_cameras(&mut ChaCha8Rng::seed_from_u64(0), 4, &CameraRig::for_plane(1.0, 64))
}

#[test]
fn gradients_match_central_differences() {
    let mut t = Tally::default();
    for cam in sampled_cameras() {
        fd_tally(&cam, &mut t);
    }
    assert!(t.checked > 200, "only {} coordinates checked", t.checked);
    assert!(t.ok as f64 >= 0.95 * t.checked as f64, "{}/{} agree", t.ok, t.checked);
}

#[test]
fn gradients_exact_away_from_face_changes() {
    // Disagreements come only from pixel centers crossing edges under the
    // perturbation; with a fixed face assignment the loss is smooth.
    let mut t = Tally::default();
    let rig = CameraRig::for_plane(1.0, 64);
    for cam in sampled_cameras().into_iter().chain([rig.camera(0.9, 0.4), rig.camera(0.5, 2.5)]) {
        fd_tally(&cam, &mut t);
    }
    assert!(t.stable > 200);
    assert!(t.stable_ok as f64 >= 0.99 * t.stable as f64, "{}/{} agree", t.stable_ok, t.stable);
}

#[test]
fn single_pixel_finite_difference() {
    let mesh = bump_mesh();
    let cam = CameraRig::for_plane(1.0, 64).camera(1.0, 0.7);
    let target = target_image(&cam);
    let r = rasterize_normals(&mesh, &cam).unwrap();
    let h = 1e-4;
    let mut checked = 0;
    for p in (0..r.face.len()).filter(|&p| r.face[p] != NO_FACE).step_by(37) {
        let pix = |rr: &NormalRender| (0..3).map(|c| (rr.image[p * 3 + c] - target[p * 3 + c]).powi(2)).sum::<f64>();
        let mut g = vec![0.0; r.image.len()];
        for c in 0..3 {
            g[p * 3 + c] = 2.0 * (r.image[p * 3 + c] - target[p * 3 + c]);
        }
        let grad = backprop_to_vertices(&r, &g, &mesh).unwrap();
        let f = mesh.faces()[r.face[p] as usize];
        for &v in &f {
            for c in 0..3 {
                let a = grad[v as usize][c];
                if a.abs() <= 1e-8 {
                    continue;
                }
                let mut plus = mesh.clone();
                plus.vertices_mut()[v as usize][c] += h;
                let mut minus = mesh.clone();
                minus.vertices_mut()[v as usize][c] -= h;
                let (rp, rm) = (rasterize_normals(&plus, &cam).unwrap(), rasterize_normals(&minus, &cam).unwrap());
                if rp.face[p] != r.face[p] || rm.face[p] != r.face[p] {
                    continue;
                }
                let fd = (pix(&rp) - pix(&rm)) / (2.0 * h);
                assert!(agrees(a, fd), "pixel {p} vertex {v} axis {c}: analytic {a:e} fd {fd:e}");
                checked += 1;
            }
        }
    }
    assert!(checked > 30, "{checked}");
}

#[test]
fn gradient_support_is_local() {
    // a single covered pixel only reaches its face's vertices and their 1-rings
    let mesh = bump_mesh();
    let cam = CameraRig::for_plane(1.0, 64).camera(1.0, 0.7);
    let r = rasterize_normals(&mesh, &cam).unwrap();
    let p = (0..r.face.len()).find(|&p| r.face[p] != NO_FACE && p % 64 > 20 && p / 64 > 20).unwrap();
    let mut g = vec![0.0; r.image.len()];
    g[p * 3] = 1.0;
    g[p * 3 + 2] = -0.5;
    let grad = backprop_to_vertices(&r, &g, &mesh).unwrap();

    let f = mesh.faces()[r.face[p] as usize];
    let mut support = std::collections::BTreeSet::new();
    for tri in mesh.faces() {
        if tri.iter().any(|v| f.contains(v)) {
            support.extend(tri.iter().copied());
        }
    }
    for (v, gv) in grad.iter().enumerate() {
        if !support.contains(&(v as u32)) {
            assert_eq!(*gv, Vec3::ZERO, "vertex {v} outside the support got {gv:?}");
        }
    }
    assert!(grad.iter().any(|g| *g != Vec3::ZERO));
}
