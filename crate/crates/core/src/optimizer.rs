//! Laplacian-preconditioned mesh deformation loop.
//!
//! Each iteration samples cameras, renders normal maps, asks the guidance
//! provider for pixel gradients, pulls them back to vertices, smooths them
//! with `(I + lambda L)^{-1}` and takes a masked step.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::ops::ControlFlow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{sample_cameras, CameraRig};
use crate::guidance::{GuidanceError, GuidanceProvider, GuidanceView};
use crate::laplacian::uniform_laplacian;
use crate::math::Vec3;
use crate::mesh::GridMesh;
use crate::precond::{PrecondError, PrecondSolver};
use crate::render::{backprop_accumulate, rasterize_normals_in, NormalRender, NormalSpace, RenderError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Surface detail: the mask acts as a warm-up over the first half.
    Surface,
    /// Geometric structure: the mask holds for the whole run.
    Structure,
}

impl MaskMode {
    pub fn default_active_fraction(self) -> f64 {
        match self {
            MaskMode::Surface => 0.5,
            MaskMode::Structure => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid optimizer setting `{name}`: {reason}")]
    Invalid { name: &'static str, reason: &'static str },
    #[error("mask has {actual} weights, mesh has {expected} vertices")]
    MaskSize { expected: usize, actual: usize },
}

/// Per-vertex update gate in `[0, 1]`, enforced for the leading
/// `active_fraction` of the iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    weights: Vec<f64>,
    mode: MaskMode,
    active_fraction: f64,
}

impl RegionMask {
    pub fn new(weights: Vec<f64>, mode: MaskMode, active_fraction: f64) -> Result<Self, ConfigError> {
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(ConfigError::Invalid { name: "mask", reason: "weights must lie in [0, 1]" });
        }
        if !(0.0..=1.0).contains(&active_fraction) {
            return Err(ConfigError::Invalid { name: "active_fraction", reason: "must lie in [0, 1]" });
        }
        Ok(Self { weights, mode, active_fraction })
    }

    /// Mask with the mode's default schedule.
    pub fn with_mode(weights: Vec<f64>, mode: MaskMode) -> Result<Self, ConfigError> {
        Self::new(weights, mode, mode.default_active_fraction())
    }

    /// Bilinearly resamples a `raster_w x raster_h` raster (aligned with the
    /// VDM, same uv convention) onto a `grid_w x grid_h` vertex lattice.
    pub fn from_raster(
        raster: &[f64],
        raster_w: usize,
        raster_h: usize,
        grid_w: usize,
        grid_h: usize,
        mode: MaskMode,
        active_fraction: f64,
    ) -> Result<Self, ConfigError> {
        if raster.len() != raster_w * raster_h || raster_w < 2 || raster_h < 2 {
            return Err(ConfigError::MaskSize { expected: raster_w * raster_h, actual: raster.len() });
        }
        let sample = |u: f64, v: f64| {
            let fx = u * (raster_w - 1) as f64;
            let fy = v * (raster_h - 1) as f64;
            let x0 = (libm::floor(fx) as usize).min(raster_w - 2);
            let y0 = (libm::floor(fy) as usize).min(raster_h - 2);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let at = |x: usize, y: usize| raster[y * raster_w + x];
            let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
            let bot = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
            (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0)
        };
        let mut weights = Vec::with_capacity(grid_w * grid_h);
        for j in 0..grid_h {
            for i in 0..grid_w {
                weights.push(sample(i as f64 / (grid_w - 1) as f64, j as f64 / (grid_h - 1) as f64));
            }
        }
        Self::new(weights, mode, active_fraction)
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    #[inline]
    pub fn active_fraction(&self) -> f64 {
        self.active_fraction
    }

    pub fn is_active(&self, iteration: usize, max_iterations: usize) -> bool {
        (iteration as f64) < self.active_fraction * max_iterations as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// `v -= eta * g`.
    Plain,
    /// Bias-corrected first/second moment scaling of the preconditioned
    /// gradient, per vertex coordinate.
    AdaptiveMoment { beta1: f64, beta2: f64, eps: f64 },
    /// Same moments, but every coordinate is divided by the largest
    /// second-moment root, which keeps the smoothed update's direction.
    UniformMoment { beta1: f64, beta2: f64, eps: f64 },
}

impl StepRule {
    pub const fn adaptive() -> Self {
        StepRule::AdaptiveMoment { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub const fn uniform() -> Self {
        StepRule::UniformMoment { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Stop when the mean loss over the latest `window` iterations improves on
/// the previous window by less than `threshold` (relative).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauStop {
    pub window: usize,
    pub threshold: f64,
}

impl Default for PlateauStop {
    fn default() -> Self {
        Self { window: 200, threshold: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lambda: f64,
    pub step_size: f64,
    pub max_iterations: usize,
    pub views_per_iteration: usize,
    pub render_resolution: usize,
    pub seed: u64,
    pub step_rule: StepRule,
    pub plateau: Option<PlateauStop>,
    pub normal_space: NormalSpace,
    /// Orbit radius in units of the plane side.
    pub camera_distance: f64,
    pub fov_y: f64,
    /// Keep a copy of the positions every this many iterations.
    pub snapshot_every: Option<usize>,
    /// Attempts per iteration for retryable guidance failures.
    pub guidance_attempts: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lambda: 15.0,
            step_size: 1e-2,
            max_iterations: 300,
            views_per_iteration: 4,
            render_resolution: 128,
            seed: 0,
            step_rule: StepRule::uniform(),
            plateau: None,
            normal_space: NormalSpace::World,
            camera_distance: 2.0,
            fov_y: PI / 4.0,
            snapshot_every: None,
            guidance_attempts: 3,
        }
    }
}

impl OptimConfig {
    /// 10,000 iterations at 512x512 renders.
    pub fn paper_scale() -> Self {
        Self { max_iterations: 10_000, render_resolution: 512, step_size: 1e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.issues().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Every invalid field, in declaration order.
    pub fn issues(&self) -> Vec<ConfigError> {
        let mut out = Vec::new();
        let mut bad = |name, reason| out.push(ConfigError::Invalid { name, reason });
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bad("lambda", "must be finite and non-negative");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            bad("step_size", "must be positive");
        }
        if self.views_per_iteration < 1 {
            bad("views_per_iteration", "must be at least 1");
        }
        if self.render_resolution < 1 {
            bad("render_resolution", "must be at least 1");
        }
        if !(self.camera_distance > 0.0) {
            bad("camera_distance", "must be positive");
        }
        if !(self.fov_y > 0.0 && self.fov_y < PI) {
            bad("fov_y", "must lie in (0, pi)");
        }
        if self.guidance_attempts < 1 {
            bad("guidance_attempts", "must be at least 1");
        }
        if let StepRule::AdaptiveMoment { beta1, beta2, eps } | StepRule::UniformMoment { beta1, beta2, eps } =
            self.step_rule
        {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                bad("step_rule", "betas must lie in [0, 1) and eps must be positive");
            }
        }
        if let Some(p) = self.plateau {
            if p.window == 0 || !(p.threshold >= 0.0) {
                bad("plateau", "window must be positive and threshold non-negative");
            }
        }
        out
    }

    pub fn camera_rig(&self, plane_side: f64) -> CameraRig {
        CameraRig {
            radius: self.camera_distance * plane_side,
            fov_y: self.fov_y,
            target: Vec3::ZERO,
            resolution: self.render_resolution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("iteration {iteration}: non-finite gradient at vertex {vertex}")]
    NonFinite { iteration: usize, vertex: usize },
    #[error("iteration {iteration} is past max_iterations {max}")]
    PastEnd { iteration: usize, max: usize },
    #[error(transparent)]
    Precond(#[from] PrecondError),
}

/// Holds the factorized preconditioner and step-rule state for one mesh.
#[derive(Debug, Clone)]
pub struct SobolevOptimizer {
    solver: PrecondSolver,
    config: OptimConfig,
    mask: Option<RegionMask>,
    first_moment: Vec<Vec3>,
    second_moment: Vec<Vec3>,
    steps_taken: usize,
}

impl SobolevOptimizer {
    pub fn new(mesh: &GridMesh, config: OptimConfig, mask: Option<RegionMask>) -> Result<Self, OptimizeErrorKind> {
        config.validate()?;
        if let Some(m) = &mask {
            if m.weights.len() != mesh.vertex_count() {
                return Err(ConfigError::MaskSize { expected: mesh.vertex_count(), actual: m.weights.len() }.into());
            }
        }
        let solver = PrecondSolver::new(&uniform_laplacian(mesh), config.lambda)?;
        Ok(Self::with_solver(solver, config, mask))
    }

    /// Reuses an existing factorization.
    pub fn with_solver(solver: PrecondSolver, config: OptimConfig, mask: Option<RegionMask>) -> Self {
        let n = solver.dim();
        Self {
            solver,
            config,
            mask,
            first_moment: vec![Vec3::ZERO; n],
            second_moment: vec![Vec3::ZERO; n],
            steps_taken: 0,
        }
    }

    pub fn solver(&self) -> &PrecondSolver {
        &self.solver
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn mask(&self) -> Option<&RegionMask> {
        self.mask.as_ref()
    }

    fn advance_moments(&mut self, update: &[Vec3], beta1: f64, beta2: f64) -> (f64, f64) {
        self.steps_taken += 1;
        let t = self.steps_taken as f64;
        for ((u, m), s) in update.iter().zip(&mut self.first_moment).zip(&mut self.second_moment) {
            *m = *m * beta1 + *u * (1.0 - beta1);
            *s = *s * beta2 + u.mul_elem(*u) * (1.0 - beta2);
        }
        (1.0 - libm::pow(beta1, t), 1.0 - libm::pow(beta2, t))
    }

    /// One update `v <- v - eta * M (.) rule((I + lambda L)^{-1} grad)`.
    /// The mask gates the final update, so zero-weight vertices do not move.
    pub fn step(&mut self, mesh: &mut GridMesh, raw_grad: &[Vec3], iteration: usize) -> Result<(), StepError> {
        if iteration >= self.config.max_iterations {
            return Err(StepError::PastEnd { iteration, max: self.config.max_iterations });
        }
        if let Some(vertex) = raw_grad.iter().position(|g| !g.is_finite()) {
            return Err(StepError::NonFinite { iteration, vertex });
        }
        let mut update = self.solver.precondition_gradient(raw_grad)?;
        match self.config.step_rule {
            StepRule::Plain => {}
            StepRule::AdaptiveMoment { beta1, beta2, eps } => {
                let (c1, c2) = self.advance_moments(&update, beta1, beta2);
                for ((u, m), s) in update.iter_mut().zip(&self.first_moment).zip(&self.second_moment) {
                    let mh = *m / c1;
                    let root = |v: f64| libm::sqrt(v / c2) + eps;
                    *u = Vec3::new(mh.x / root(s.x), mh.y / root(s.y), mh.z / root(s.z));
                }
            }
            StepRule::UniformMoment { beta1, beta2, eps } => {
                let (c1, c2) = self.advance_moments(&update, beta1, beta2);
                let peak = self.second_moment.iter().fold(0.0f64, |a, s| a.max(s.x).max(s.y).max(s.z));
                let denom = c1 * (libm::sqrt(peak / c2) + eps);
                for (u, m) in update.iter_mut().zip(&self.first_moment) {
                    *u = *m / denom;
                }
            }
        }
        if let Some(vertex) = update.iter().position(|g| !g.is_finite()) {
            return Err(StepError::NonFinite { iteration, vertex });
        }
        let eta = self.config.step_size;
        let active = self.mask.as_ref().filter(|m| m.is_active(iteration, self.config.max_iterations));
        let verts = mesh.vertices_mut();
        match active {
            Some(mask) => {
                for ((v, u), &w) in verts.iter_mut().zip(&update).zip(&mask.weights) {
                    if w != 0.0 {
                        *v -= *u * (eta * w);
                    }
                }
            }
            None => {
                for (v, u) in verts.iter_mut().zip(&update) {
                    *v -= *u * eta;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    Converged,
    Plateau,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub mesh: GridMesh,
    pub history: Vec<IterationRecord>,
    pub snapshots: Vec<(usize, Vec<Vec3>)>,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeErrorKind {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Precond(#[from] PrecondError),
    #[error("iteration {iteration}: guidance failed after {attempts} attempt(s): {source}")]
    Guidance { iteration: usize, attempts: usize, source: GuidanceError },
    #[error("iteration {iteration}: render failed: {source}")]
    Render { iteration: usize, source: RenderError },
    #[error(transparent)]
    Step(#[from] StepError),
}

/// Aborted run; `partial` holds everything up to the last completed step.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind}")]
pub struct OptimizeError {
    pub kind: OptimizeErrorKind,
    pub partial: Box<OptimizeOutcome>,
}

/// Hooks into the loop for progress reporting, timing and cancellation.
pub trait Observer {
    /// Monotonic milliseconds; the default clock is always zero.
    fn now_ms(&mut self) -> f64 {
        0.0
    }

    /// Called after every step; returning `Break` cancels the run.
    fn on_iteration(
        &mut self,
        _record: &IterationRecord,
        _mesh: &GridMesh,
        _renders: &[NormalRender],
    ) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Runs the deformation loop from `mesh` for `config.max_iterations`
/// iterations, or until the guidance reports convergence, the plateau rule
/// fires or the observer cancels.
pub fn optimize<G: GuidanceProvider + ?Sized>(
    mesh: GridMesh,
    guidance: &mut G,
    config: &OptimConfig,
    mask: Option<RegionMask>,
    observer: &mut dyn Observer,
) -> Result<OptimizeOutcome, OptimizeError> {
    let mut out = OptimizeOutcome { mesh, history: Vec::new(), snapshots: Vec::new(), stop: StopReason::Completed };
    if config.max_iterations == 0 {
        return Ok(out);
    }
    macro_rules! bail {
        ($kind:expr, $out:expr) => {
            return Err(OptimizeError { kind: $kind.into(), partial: Box::new($out) })
        };
    }
    let mut opt = match SobolevOptimizer::new(&out.mesh, config.clone(), mask) {
        Ok(o) => o,
        Err(e) => bail!(e, out),
    };
    if let Err(e) = guidance.begin(&out.mesh) {
        bail!(OptimizeErrorKind::Guidance { iteration: 0, attempts: 1, source: e }, out);
    }
    let rig = config.camera_rig(out.mesh.scale().plane_side());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grad = vec![Vec3::ZERO; out.mesh.vertex_count()];

    for iteration in 0..config.max_iterations {
        let t0 = observer.now_ms();
        let cameras = sample_cameras(&mut rng, config.views_per_iteration, &rig);
        let mut renders = Vec::with_capacity(cameras.len());
        for cam in &cameras {
            match rasterize_normals_in(&out.mesh, cam, config.normal_space) {
                Ok(r) => renders.push(r),
                Err(source) => bail!(OptimizeErrorKind::Render { iteration, source }, out),
            }
        }
        let views: Vec<GuidanceView<'_>> =
            renders.iter().map(|r| GuidanceView { camera: &r.camera, space: r.space, image: &r.image }).collect();

        let mut attempt = 0;
        let response = loop {
            attempt += 1;
            let result = guidance.evaluate(iteration, &views).and_then(|r| r.validate(&views).map(|_| r));
            match result {
                Ok(r) => break r,
                Err(e) if e.is_retryable() && attempt < config.guidance_attempts => {
                    log::warn!("iteration {iteration}: guidance attempt {attempt} failed: {e}");
                }
                Err(source) => bail!(OptimizeErrorKind::Guidance { iteration, attempts: attempt, source }, out),
            }
        };

        grad.iter_mut().for_each(|g| *g = Vec3::ZERO);
        for (r, g) in renders.iter().zip(&response.pixel_grads) {
            if let Err(source) = backprop_accumulate(r, g, &out.mesh, &mut grad) {
                bail!(OptimizeErrorKind::Render { iteration, source }, out);
            }
        }
        let grad_norm = libm::sqrt(grad.iter().map(|g| g.norm_squared()).sum::<f64>());
        if let Err(e) = opt.step(&mut out.mesh, &grad, iteration) {
            bail!(e, out);
        }

        let record = IterationRecord { iteration, loss: response.loss, grad_norm, wall_ms: observer.now_ms() - t0 };
        out.history.push(record);
        if let Some(every) = config.snapshot_every {
            if every > 0 && (iteration + 1) % every == 0 {
                out.snapshots.push((iteration, out.mesh.vertices().to_vec()));
            }
        }
        if observer.on_iteration(&record, &out.mesh, &renders).is_break() {
            out.stop = StopReason::Cancelled;
            break;
        }
        if response.converged {
            out.stop = StopReason::Converged;
            break;
        }
        if let Some(p) = config.plateau {
            if plateaued(&out.history, p) {
                out.stop = StopReason::Plateau;
                break;
            }
        }
    }
    Ok(out)
}

fn plateaued(history: &[IterationRecord], p: PlateauStop) -> bool {
    let n = history.len();
    if n < 2 * p.window {
        return false;
    }
    let mean = |s: &[IterationRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    let prev = mean(&history[n - 2 * p.window..n - p.window]);
    let cur = mean(&history[n - p.window..]);
    prev > 0.0 && (prev - cur) / prev < p.threshold
}
