//! VDM rasters, initialization patterns and VDM-unit to world scaling.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::math::Vec3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VdmError {
    #[error("invalid VDM dimensions {width}x{height} (both must be at least 2)")]
    InvalidDimension { width: usize, height: usize },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: &'static str },
    #[error("sample buffer has {actual} values, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite sample at pixel ({x}, {y}) channel {channel}")]
    NonFinite { x: usize, y: usize, channel: usize },
}

/// A `width x height` raster of 3D displacement vectors, row-major with
/// channels X, Y, Z interleaved. Values are in VDM units (see [`VdmScale`]).
///
/// Pixel `(i, j)` sits at `uv = (i / (width - 1), j / (height - 1))`, so pixel
/// centers coincide with grid mesh vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct VdmImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl VdmImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, VdmError> {
        check_dims(width, height)?;
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(VdmError::LengthMismatch { expected, actual: data.len() });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let px = pos / 3;
            return Err(VdmError::NonFinite { x: px % width, y: px / width, channel: pos % 3 });
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self, VdmError> {
        check_dims(width, height)?;
        Ok(Self { width, height, data: vec![0.0; width * height * 3] })
    }

    /// Builds a Z-only VDM from a scalar heightfield (X and Y channels zero).
    pub fn from_heights(width: usize, height: usize, z: &[f32]) -> Result<Self, VdmError> {
        check_dims(width, height)?;
        if z.len() != width * height {
            return Err(VdmError::LengthMismatch { expected: width * height, actual: z.len() });
        }
        let mut data = vec![0.0; width * height * 3];
        for (px, &h) in z.iter().enumerate() {
            data[px * 3 + 2] = h;
        }
        Self::new(width, height, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// uv coordinate of the center of pixel `(x, y)`.
    #[inline]
    pub fn pixel_uv(&self, x: usize, y: usize) -> (f64, f64) {
        pixel_uv(self.width, self.height, x, y)
    }

    /// True when every sample lies in `[0, 1]`, the valid range for
    /// initialization VDMs.
    pub fn is_init_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    /// Z channel as a `width * height` heightfield.
    pub fn z_channel(&self) -> Vec<f32> {
        self.data.chunks_exact(3).map(|p| p[2]).collect()
    }
}

fn check_dims(width: usize, height: usize) -> Result<(), VdmError> {
    if width < 2 || height < 2 {
        return Err(VdmError::InvalidDimension { width, height });
    }
    Ok(())
}

#[inline]
pub(crate) fn pixel_uv(width: usize, height: usize, x: usize, y: usize) -> (f64, f64) {
    (x as f64 / (width - 1) as f64, y as f64 / (height - 1) as f64)
}

/// World scale of a VDM: value 1.0 maps to half of the planar mesh side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VdmScale {
    plane_side: f64,
}

impl VdmScale {
    pub fn new(plane_side: f64) -> Result<Self, VdmError> {
        if !(plane_side > 0.0 && plane_side.is_finite()) {
            return Err(VdmError::InvalidParameter { name: "plane_side", reason: "must be positive and finite" });
        }
        Ok(Self { plane_side })
    }

    #[inline]
    pub fn plane_side(&self) -> f64 {
        self.plane_side
    }

    /// World length of one VDM unit.
    #[inline]
    pub fn unit_displacement(&self) -> f64 {
        0.5 * self.plane_side
    }
}

impl Default for VdmScale {
    fn default() -> Self {
        Self { plane_side: 1.0 }
    }
}

pub fn make_zero_vdm(resolution: usize) -> Result<VdmImage, VdmError> {
    VdmImage::zeros(resolution, resolution)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeProfile {
    /// Linear falloff `1 - t`.
    Cone,
    /// `exp(-4.5 t^2)`, i.e. a Gaussian with sigma at one third of the radius.
    Gaussian,
}

impl SpikeProfile {
    /// Profile value at normalized radius `t = distance / radius`; zero for `t >= 1`.
    pub fn eval(self, t: f64) -> f64 {
        if t >= 1.0 {
            return 0.0;
        }
        match self {
            SpikeProfile::Cone => 1.0 - t,
            SpikeProfile::Gaussian => libm::exp(-4.5 * t * t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeParams {
    pub center_uv: (f64, f64),
    pub radius_uv: f64,
    pub height: f64,
    pub profile: SpikeProfile,
}

impl Default for SpikeParams {
    fn default() -> Self {
        Self { center_uv: (0.5, 0.5), radius_uv: 0.25, height: 1.0, profile: SpikeProfile::Cone }
    }
}

impl SpikeParams {
    pub fn validate(&self) -> Result<(), VdmError> {
        let (cu, cv) = self.center_uv;
        if !((0.0..=1.0).contains(&cu) && (0.0..=1.0).contains(&cv)) {
            return Err(VdmError::InvalidParameter { name: "center_uv", reason: "must lie in [0,1]^2" });
        }
        if !(self.radius_uv > 0.0 && self.radius_uv <= 0.5) {
            return Err(VdmError::InvalidParameter { name: "radius_uv", reason: "must lie in (0, 0.5]" });
        }
        if !(0.0..=1.0).contains(&self.height) {
            return Err(VdmError::InvalidParameter { name: "height", reason: "must lie in [0, 1]" });
        }
        Ok(())
    }
}

/// Single radial spike along +Z. The center is snapped to the nearest pixel
/// so that the peak sample equals `height` exactly.
pub fn make_spike_vdm(resolution: usize, spike: &SpikeParams) -> Result<VdmImage, VdmError> {
    spike.validate()?;
    let mut vdm = make_zero_vdm(resolution)?;
    let n = resolution;
    let snap = |c: f64| libm::round(c * (n - 1) as f64) / (n - 1) as f64;
    let (cu, cv) = (snap(spike.center_uv.0), snap(spike.center_uv.1));
    for y in 0..n {
        for x in 0..n {
            let (u, v) = pixel_uv(n, n, x, y);
            let d = libm::hypot(u - cu, v - cv);
            let z = spike.height * spike.profile.eval(d / spike.radius_uv);
            vdm.data[(y * n + x) * 3 + 2] = z as f32;
        }
    }
    Ok(vdm)
}

/// Isotropic Gaussian bump `amplitude * exp(-d^2 / (2 sigma^2))` along +Z,
/// with `d` measured in uv. Used to build target shapes.
pub fn make_gaussian_bump_vdm(
    resolution: usize,
    center_uv: (f64, f64),
    sigma_uv: f64,
    amplitude: f64,
) -> Result<VdmImage, VdmError> {
    if !(sigma_uv > 0.0 && sigma_uv.is_finite()) {
        return Err(VdmError::InvalidParameter { name: "sigma_uv", reason: "must be positive" });
    }
    if !amplitude.is_finite() {
        return Err(VdmError::InvalidParameter { name: "amplitude", reason: "must be finite" });
    }
    let mut vdm = make_zero_vdm(resolution)?;
    let n = resolution;
    for y in 0..n {
        for x in 0..n {
            let (u, v) = pixel_uv(n, n, x, y);
            let d2 = (u - center_uv.0) * (u - center_uv.0) + (v - center_uv.1) * (v - center_uv.1);
            vdm.data[(y * n + x) * 3 + 2] = (amplitude * libm::exp(-d2 / (2.0 * sigma_uv * sigma_uv))) as f32;
        }
    }
    Ok(vdm)
}

/// Per-pixel world-space displacement, `sample * unit_displacement`.
pub fn vdm_to_world(vdm: &VdmImage, scale: &VdmScale) -> Vec<Vec3> {
    let unit = scale.unit_displacement();
    vdm.data.chunks_exact(3).map(|p| Vec3::new(p[0] as f64 * unit, p[1] as f64 * unit, p[2] as f64 * unit)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_vdm() {
        let v = make_zero_vdm(512).unwrap();
        assert_eq!((v.width(), v.height()), (512, 512));
        assert_eq!(v.data().len(), 512 * 512 * 3);
        assert!(v.data().iter().all(|&s| s == 0.0));
        let v = make_zero_vdm(2).unwrap();
        assert!(v.data().iter().all(|&s| s == 0.0));
        assert!(matches!(make_zero_vdm(1), Err(VdmError::InvalidDimension { .. })));
    }

    #[test]
    fn spike_endpoints() {
        let s = SpikeParams { center_uv: (0.5, 0.5), radius_uv: 0.25, height: 1.0, profile: SpikeProfile::Cone };
        let v = make_spike_vdm(64, &s).unwrap();
        let n = 64;
        let mut peak = (0.0f32, 0, 0);
        for y in 0..n {
            for x in 0..n {
                let p = v.pixel(x, y);
                assert_eq!((p[0], p[1]), (0.0, 0.0));
                if p[2] > peak.0 {
                    peak = (p[2], x, y);
                }
                let (u, w) = v.pixel_uv(x, y);
                // center snaps to pixel 32 (uv 32/63)
                let d = libm::hypot(u - 32.0 / 63.0, w - 32.0 / 63.0);
                if d >= 0.25 {
                    assert_eq!(p[2], 0.0);
                }
            }
        }
        assert_eq!(peak.0, 1.0);
        // nearest pixels to uv 0.5 are 31 and 32 (tie); rounding picks 32
        assert_eq!((peak.1, peak.2), (32, 32));
    }

    #[test]
    fn spike_zero_height_is_zero_vdm() {
        let s = SpikeParams { height: 0.0, ..Default::default() };
        assert_eq!(make_spike_vdm(16, &s).unwrap(), make_zero_vdm(16).unwrap());
    }

    #[test]
    fn spike_five_pixel_cone() {
        // uv step 0.25, radius 0.5: neighbors at t = 0.5 give 1 - 0.5
        let s = SpikeParams { center_uv: (0.5, 0.5), radius_uv: 0.5, height: 1.0, profile: SpikeProfile::Cone };
        let v = make_spike_vdm(5, &s).unwrap();
        assert_eq!(v.pixel(2, 2)[2], 1.0);
        for (x, y) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(v.pixel(x, y)[2], 0.5);
        }
    }

    #[test]
    fn spike_rejects_bad_params() {
        let base = SpikeParams::default();
        for bad in [
            SpikeParams { height: 1.5, ..base },
            SpikeParams { height: -0.1, ..base },
            SpikeParams { radius_uv: 0.0, ..base },
            SpikeParams { radius_uv: 0.6, ..base },
            SpikeParams { center_uv: (1.2, 0.5), ..base },
        ] {
            assert!(matches!(make_spike_vdm(8, &bad), Err(VdmError::InvalidParameter { .. })));
        }
    }

    #[test]
    fn world_scaling() {
        let one = VdmScale::new(1.0).unwrap();
        let two = VdmScale::new(2.0).unwrap();
        let img = |s: [f32; 3]| {
            let mut d = vec![0.0; 12];
            d[..3].copy_from_slice(&s);
            VdmImage::new(2, 2, d).unwrap()
        };
        assert_eq!(vdm_to_world(&img([0.0, 0.0, 1.0]), &one)[0], Vec3::new(0.0, 0.0, 0.5));
        assert_eq!(vdm_to_world(&img([0.0, 0.0, 0.0]), &two)[0], Vec3::ZERO);
        let w = vdm_to_world(&img([0.2, 0.0, 0.4]), &two)[0];
        assert_eq!(w, Vec3::new(0.2f32 as f64, 0.0, 0.4f32 as f64));
        assert!(VdmScale::new(0.0).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let mut d = vec![0.0; 12];
        d[7] = f32::NAN;
        assert_eq!(VdmImage::new(2, 2, d), Err(VdmError::NonFinite { x: 0, y: 1, channel: 1 }));
    }

    proptest! {
        #[test]
        fn world_is_linear(a in -4.0f32..4.0, s in proptest::collection::vec(-1.0f32..1.0, 12), side in 0.1f64..10.0) {
            let scale = VdmScale::new(side).unwrap();
            let v = VdmImage::new(2, 2, s.clone()).unwrap();
            let av = VdmImage::new(2, 2, s.iter().map(|x| x * a).collect()).unwrap();
            for (p, q) in vdm_to_world(&v, &scale).iter().zip(vdm_to_world(&av, &scale)) {
                let expect = *p * a as f64;
                prop_assert!((q - expect).max_abs() <= 1e-6 * (1.0 + expect.max_abs()));
            }
        }

        #[test]
        fn spike_is_radially_monotone(
            res in 5usize..40,
            r in 0.05f64..0.5,
            h in 0.0f64..1.0,
            gauss in any::<bool>(),
        ) {
            let profile = if gauss { SpikeProfile::Gaussian } else { SpikeProfile::Cone };
            let s = SpikeParams { center_uv: (0.5, 0.5), radius_uv: r, height: h, profile };
            let v = make_spike_vdm(res, &s).unwrap();
            prop_assert!(v.is_init_range());
            let c = libm::round(0.5 * (res - 1) as f64) / (res - 1) as f64;
            let mut samples: Vec<(f64, f32)> = (0..res * res)
                .map(|p| {
                    let (u, w) = v.pixel_uv(p % res, p / res);
                    (libm::hypot(u - c, w - c), v.pixel(p % res, p / res)[2])
                })
                .collect();
            samples.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in samples.windows(2) {
                if w[1].0 > w[0].0 + 1e-12 {
                    prop_assert!(w[1].1 <= w[0].1);
                }
            }
        }
    }
}
