//! Image-space guidance: the provider contract and the analytic
//! target-shape oracle.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::camera::Camera;
use crate::mesh::GridMesh;
use crate::render::{rasterize_normals_in, NormalSpace, RenderError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GuidanceError {
    #[error("guidance timed out after {seconds} s")]
    Timeout { seconds: u64 },
    #[error("guidance unavailable: {0}")]
    Unavailable(String),
    #[error("protocol error at byte {offset}: {reason}")]
    Protocol { offset: usize, reason: String },
    #[error("target topology {target:?} does not match mesh topology {mesh:?}")]
    TopologyMismatch { target: (usize, usize), mesh: (usize, usize) },
    #[error("view {view}: {reason}")]
    Shape { view: usize, reason: String },
    #[error("view {view}: non-finite gradient at value {index}")]
    NonFinite { view: usize, index: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{0}")]
    Other(String),
}

impl GuidanceError {
    /// Transient failures the optimizer may retry.
    pub fn is_retryable(&self) -> bool {
        matches!(self, GuidanceError::Timeout { .. } | GuidanceError::Unavailable(_))
    }
}

/// One rendered view handed to a provider.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceView<'a> {
    pub camera: &'a Camera,
    pub space: NormalSpace,
    /// Row-major `height x width x 3` encoded normal image.
    pub image: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceResponse {
    /// `d loss / d pixel`, one buffer per view in request order.
    pub pixel_grads: Vec<Vec<f64>>,
    pub loss: f64,
    pub converged: bool,
}

impl GuidanceResponse {
    /// Checks the response against the request shapes.
    pub fn validate(&self, views: &[GuidanceView<'_>]) -> Result<(), GuidanceError> {
        if self.pixel_grads.len() != views.len() {
            return Err(GuidanceError::Shape {
                view: self.pixel_grads.len().min(views.len()),
                reason: alloc::format!("{} gradient images for {} views", self.pixel_grads.len(), views.len()),
            });
        }
        for (i, (g, v)) in self.pixel_grads.iter().zip(views).enumerate() {
            if g.len() != v.image.len() {
                return Err(GuidanceError::Shape {
                    view: i,
                    reason: alloc::format!("{} gradient values for {} pixels values", g.len(), v.image.len()),
                });
            }
            if let Some(index) = g.iter().position(|x| !x.is_finite()) {
                return Err(GuidanceError::NonFinite { view: i, index });
            }
        }
        Ok(())
    }
}

pub trait GuidanceProvider {
    /// Called once before the first iteration with the mesh being optimized.
    fn begin(&mut self, _mesh: &GridMesh) -> Result<(), GuidanceError> {
        Ok(())
    }

    fn evaluate(&mut self, iteration: usize, views: &[GuidanceView<'_>]) -> Result<GuidanceResponse, GuidanceError>;
}

impl<G: GuidanceProvider + ?Sized> GuidanceProvider for &mut G {
    fn begin(&mut self, mesh: &GridMesh) -> Result<(), GuidanceError> {
        (**self).begin(mesh)
    }

    fn evaluate(&mut self, iteration: usize, views: &[GuidanceView<'_>]) -> Result<GuidanceResponse, GuidanceError> {
        (**self).evaluate(iteration, views)
    }
}

impl<G: GuidanceProvider + ?Sized> GuidanceProvider for alloc::boxed::Box<G> {
    fn begin(&mut self, mesh: &GridMesh) -> Result<(), GuidanceError> {
        (**self).begin(mesh)
    }

    fn evaluate(&mut self, iteration: usize, views: &[GuidanceView<'_>]) -> Result<GuidanceResponse, GuidanceError> {
        (**self).evaluate(iteration, views)
    }
}

/// Renders a fixed target mesh from each requested camera and returns the
/// gradient of `0.5 * |current - target|^2`, i.e. the pixel residual.
#[derive(Debug, Clone)]
pub struct TargetShapeGuidance {
    target: GridMesh,
}

impl TargetShapeGuidance {
    pub fn new(target: GridMesh) -> Self {
        Self { target }
    }

    pub fn target(&self) -> &GridMesh {
        &self.target
    }

    /// Summed squared residual and the residual itself for a single view.
    /// The residual is the gradient of half the reported loss.
    pub fn residual(&self, view: &GuidanceView<'_>) -> Result<(f64, Vec<f64>), GuidanceError> {
        let target = rasterize_normals_in(&self.target, view.camera, view.space)?;
        if target.image.len() != view.image.len() {
            return Err(GuidanceError::Shape {
                view: 0,
                reason: alloc::format!("image has {} values, camera implies {}", view.image.len(), target.image.len()),
            });
        }
        let residual: Vec<f64> = view.image.iter().zip(&target.image).map(|(x, t)| x - t).collect();
        let loss = residual.iter().map(|r| r * r).sum::<f64>();
        Ok((loss, residual))
    }
}

impl GuidanceProvider for TargetShapeGuidance {
    fn begin(&mut self, mesh: &GridMesh) -> Result<(), GuidanceError> {
        if !self.target.same_topology(mesh) {
            return Err(GuidanceError::TopologyMismatch {
                target: (self.target.grid_w(), self.target.grid_h()),
                mesh: (mesh.grid_w(), mesh.grid_h()),
            });
        }
        Ok(())
    }

    fn evaluate(&mut self, _iteration: usize, views: &[GuidanceView<'_>]) -> Result<GuidanceResponse, GuidanceError> {
        let mut pixel_grads = Vec::with_capacity(views.len());
        let mut loss = 0.0;
        for (i, view) in views.iter().enumerate() {
            let (l, r) = self.residual(view).map_err(|e| match e {
                GuidanceError::Shape { reason, .. } => GuidanceError::Shape { view: i, reason },
                other => other,
            })?;
            loss += l;
            pixel_grads.push(r);
        }
        Ok(GuidanceResponse { pixel_grads, loss, converged: false })
    }
}
