//! Core numerics for generating vector displacement map (VDM) sculpting brushes.
//!
//! A brush starts life as a VDM raster, is lifted onto a dense planar grid
//! mesh, deformed by Laplacian-preconditioned gradient descent driven by
//! image-space guidance over rasterized normal maps, and baked back into a
//! VDM raster.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, transports
//! and the CLI live in the `vdmforge` companion crate.

#![cfg_attr(not(test), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks

extern crate alloc;

pub mod bake;
pub mod camera;
pub mod cholesky;
pub mod guidance;
pub mod intersect;
pub mod laplacian;
pub mod math;
pub mod mesh;
pub mod optimizer;
pub mod precond;
pub mod render;
pub mod vdm;

pub use bake::{bake, BakeMode, BakeResult, BakeStats};
pub use camera::{sample_cameras, Camera, CameraRig};
pub use guidance::{GuidanceError, GuidanceProvider, GuidanceResponse, GuidanceView, TargetShapeGuidance};
pub use intersect::{self_intersection_ratio, SelfIntersection};
pub use laplacian::{uniform_laplacian, SparseLaplacian};
pub use math::Vec3;
pub use mesh::{build_grid_mesh, GridMesh, MeshError};
pub use optimizer::{
    optimize, MaskMode, OptimConfig, OptimizeError, OptimizeOutcome, RegionMask, SobolevOptimizer, StepRule,
};
pub use precond::{build_preconditioner, PrecondSolver};
pub use render::{backprop_to_vertices, rasterize_normals, NormalRender, NormalSpace};
pub use vdm::{make_spike_vdm, make_zero_vdm, vdm_to_world, SpikeParams, SpikeProfile, VdmImage, VdmScale};
