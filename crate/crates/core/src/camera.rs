//! Orbit cameras around the brush plane (Z up) and random view sampling.

use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_3, PI};

use rand::Rng;

use crate::math::Vec3;

/// Perspective pinhole camera orbiting `target`.
///
/// Elevation 0 looks horizontally, `pi/2` looks straight down; azimuth is
/// measured from +X towards +Y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub elevation: f64,
    pub azimuth: f64,
    pub radius: f64,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub target: Vec3,
    pub width: usize,
    pub height: usize,
}

/// Camera placement shared by all sampled views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig {
    pub radius: f64,
    pub fov_y: f64,
    pub target: Vec3,
    pub resolution: usize,
}

impl CameraRig {
    /// Orbit at twice the plane side with a 45 degree field of view, looking
    /// at the plane center.
    pub fn for_plane(plane_side: f64, resolution: usize) -> Self {
        Self { radius: 2.0 * plane_side, fov_y: PI / 4.0, target: Vec3::ZERO, resolution }
    }

    pub fn camera(&self, elevation: f64, azimuth: f64) -> Camera {
        Camera {
            elevation,
            azimuth,
            radius: self.radius,
            fov_y: self.fov_y,
            target: self.target,
            width: self.resolution,
            height: self.resolution,
        }
    }
}

/// Orthonormal camera frame: `right`, `up` and viewing direction `forward`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraFrame {
    pub eye: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl Camera {
    pub fn eye(&self) -> Vec3 {
        let (se, ce) = libm::sincos(self.elevation);
        let (sa, ca) = libm::sincos(self.azimuth);
        self.target + Vec3::new(ce * ca, ce * sa, se) * self.radius
    }

    pub fn frame(&self) -> CameraFrame {
        let eye = self.eye();
        let forward = (self.target - eye).normalized().unwrap_or(-Vec3::Z);
        let world_up = if forward.cross(Vec3::Z).norm() < 1e-9 {
            // looking straight down: keep +Y up in the image
            Vec3::Y
        } else {
            Vec3::Z
        };
        let right = forward.cross(world_up).normalized().unwrap_or(Vec3::X);
        let up = right.cross(forward);
        CameraFrame { eye, right, up, forward }
    }

    #[inline]
    fn tan_half(&self) -> (f64, f64) {
        let ty = libm::tan(0.5 * self.fov_y);
        (ty * self.width as f64 / self.height as f64, ty)
    }

    /// Unnormalized world direction of the ray through the center of pixel
    /// `(px, py)`; row 0 is the top of the image.
    pub fn ray_dir(&self, frame: &CameraFrame, px: usize, py: usize) -> Vec3 {
        let (tx, ty) = self.tan_half();
        let sx = (2.0 * (px as f64 + 0.5) / self.width as f64 - 1.0) * tx;
        let sy = (1.0 - 2.0 * (py as f64 + 0.5) / self.height as f64) * ty;
        frame.forward + frame.right * sx + frame.up * sy
    }

    /// Continuous pixel coordinates (pixel centers at `i + 0.5`) and view
    /// depth of a world point, or `None` behind `near`.
    pub fn project(&self, frame: &CameraFrame, p: Vec3, near: f64) -> Option<(f64, f64, f64)> {
        let q = p - frame.eye;
        let depth = q.dot(frame.forward);
        if depth <= near {
            return None;
        }
        let (tx, ty) = self.tan_half();
        let nx = q.dot(frame.right) / (depth * tx);
        let ny = q.dot(frame.up) / (depth * ty);
        Some(((nx + 1.0) * 0.5 * self.width as f64, (1.0 - ny) * 0.5 * self.height as f64, depth))
    }

    pub fn near_plane(&self) -> f64 {
        1e-6 * self.radius
    }
}

/// `n` cameras with elevation ~ U(0, pi/3) and azimuth ~ U(0, 2 pi).
pub fn sample_cameras<R: Rng + ?Sized>(rng: &mut R, n: usize, rig: &CameraRig) -> Vec<Camera> {
    (0..n)
        .map(|_| {
            let elevation = rng.random_range(0.0..FRAC_PI_3);
            let azimuth = rng.random_range(0.0..2.0 * PI);
            rig.camera(elevation, azimuth)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rig() -> CameraRig {
        CameraRig::for_plane(1.0, 64)
    }

    #[test]
    fn four_views_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cams = sample_cameras(&mut rng, 4, &rig());
        assert_eq!(cams.len(), 4);
        for c in &cams {
            assert!((0.0..=FRAC_PI_3).contains(&c.elevation));
            assert!((0.0..2.0 * PI).contains(&c.azimuth));
        }
    }

    #[test]
    fn seeded_sampling_repeats() {
        let a = sample_cameras(&mut ChaCha8Rng::seed_from_u64(11), 16, &rig());
        let b = sample_cameras(&mut ChaCha8Rng::seed_from_u64(11), 16, &rig());
        assert_eq!(a, b);
    }

    #[test]
    fn elevation_mean_is_pi_over_6() {
        let n = 10_000;
        let cams = sample_cameras(&mut ChaCha8Rng::seed_from_u64(3), n, &rig());
        let mean = cams.iter().map(|c| c.elevation).sum::<f64>() / n as f64;
        // std of U(0, pi/3) is (pi/3) / sqrt(12)
        let se = FRAC_PI_3 / libm::sqrt(12.0) / libm::sqrt(n as f64);
        assert!((mean - PI / 6.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn frame_is_orthonormal_and_projects_target_to_center() {
        for (el, az) in [(0.0, 0.0), (0.4, 1.3), (FRAC_PI_3, 5.0), (PI / 2.0, 0.0)] {
            let cam = rig().camera(el, az);
            let f = cam.frame();
            assert!((f.right.norm() - 1.0).abs() < 1e-12);
            assert!((f.up.norm() - 1.0).abs() < 1e-12);
            assert!(f.right.dot(f.up).abs() < 1e-12);
            assert!(f.right.dot(f.forward).abs() < 1e-12);
            let (x, y, d) = cam.project(&f, Vec3::ZERO, 1e-9).unwrap();
            assert!((x - 32.0).abs() < 1e-9 && (y - 32.0).abs() < 1e-9);
            assert!((d - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ray_and_projection_agree() {
        let cam = rig().camera(0.7, 2.1);
        let f = cam.frame();
        let d = cam.ray_dir(&f, 10, 50);
        let (x, y, _) = cam.project(&f, f.eye + d * 1.7, 1e-9).unwrap();
        assert!((x - 10.5).abs() < 1e-9 && (y - 50.5).abs() < 1e-9);
    }
}
