//! Baking a deformed grid mesh back into a VDM raster.

use alloc::vec::Vec;

use crate::intersect::self_intersection_ratio;
use crate::mesh::GridMesh;
use crate::vdm::{VdmImage, VdmScale};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BakeMode {
    /// `(position - rest) / unit`, the form sculpting tools expect.
    #[default]
    Displacement,
    /// `position / unit`, the vertex coordinates themselves.
    AbsoluteCoordinates,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BakeStats {
    /// Largest absolute sample, in VDM units.
    pub max_abs_displacement: f64,
    pub fraction_negative_samples: f64,
    pub self_intersection_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BakeResult {
    pub vdm: VdmImage,
    pub stats: BakeStats,
}

pub fn bake(mesh: &GridMesh, scale: &VdmScale) -> BakeResult {
    bake_with(mesh, scale, BakeMode::Displacement)
}

pub fn bake_with(mesh: &GridMesh, scale: &VdmScale, mode: BakeMode) -> BakeResult {
    let unit = scale.unit_displacement();
    let mut data = Vec::with_capacity(mesh.vertex_count() * 3);
    for (p, r) in mesh.vertices().iter().zip(mesh.rest_positions()) {
        let d = match mode {
            BakeMode::Displacement => *p - *r,
            BakeMode::AbsoluteCoordinates => *p,
        };
        data.extend_from_slice(&[(d.x / unit) as f32, (d.y / unit) as f32, (d.z / unit) as f32]);
    }
    let max_abs_displacement = data.iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
    let fraction_negative_samples = data.iter().filter(|&&v| v < 0.0).count() as f64 / data.len() as f64;
    let vdm = VdmImage::new(mesh.grid_w(), mesh.grid_h(), data).expect("finite positions bake to a valid VDM");
    BakeResult {
        vdm,
        stats: BakeStats {
            max_abs_displacement,
            fraction_negative_samples,
            self_intersection_ratio: self_intersection_ratio(mesh),
        },
    }
}
