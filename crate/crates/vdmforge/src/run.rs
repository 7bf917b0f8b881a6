//! `generate`: initialize, optimize, bake and write the output bundle.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;
use vdmforge_core::bake::bake_with;
use vdmforge_core::mesh::build_grid_mesh;
use vdmforge_core::optimizer::{IterationRecord, Observer, StopReason};
use vdmforge_core::vdm::{make_spike_vdm, make_zero_vdm, VdmImage};
use vdmforge_core::{
    optimize, BakeStats, GridMesh, GuidanceProvider, NormalRender, OptimConfig, RegionMask, TargetShapeGuidance,
};

use crate::client::{ExternalGuidance, DEFAULT_TIMEOUT};
use crate::config::{ext, GuidanceSpec, InitSpec, Issue, RunConfig};
use crate::{exr_io, obj, png_io};

pub const BRUSH_EXR: &str = "brush.exr";
pub const MESH_OBJ: &str = "mesh.obj";
pub const METRICS_JSON: &str = "metrics.json";
pub const HISTORY_JSONL: &str = "history.jsonl";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config:\n{}", .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Issue>),
    #[error("{0}")]
    Input(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    /// The optimization aborted; the bundle holds the last state reached.
    #[error("optimization failed: {message}")]
    Optimize { message: String, summary: Box<RunSummary> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Done,
    Cancelled,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossSummary {
    pub initial: Option<f64>,
    #[serde(rename = "final")]
    pub last: Option<f64>,
    pub min: Option<f64>,
    /// Mean over the last tenth of the recorded iterations.
    pub mean_tail: Option<f64>,
}

impl LossSummary {
    pub fn from_history(history: &[IterationRecord]) -> Self {
        let losses: Vec<f64> = history.iter().map(|r| r.loss).collect();
        let tail = &losses[losses.len() - (losses.len() / 10).max(1).min(losses.len())..];
        Self {
            initial: losses.first().copied(),
            last: losses.last().copied(),
            min: losses.iter().copied().reduce(f64::min),
            mean_tail: (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsJson {
    pub max_abs_displacement: f64,
    pub fraction_negative_samples: f64,
    pub self_intersection_ratio: f64,
}

impl From<BakeStats> for StatsJson {
    fn from(s: BakeStats) -> Self {
        Self {
            max_abs_displacement: s.max_abs_displacement,
            fraction_negative_samples: s.fraction_negative_samples,
            self_intersection_ratio: s.self_intersection_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub status: RunStatus,
    pub stop_reason: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub iterations: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub grid: [usize; 2],
    pub plane_side: f64,
    pub loss: LossSummary,
    pub stats: StatsJson,
    pub wall_ms: f64,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub artifacts: Vec<String>,
    pub metrics: Metrics,
    pub mesh: GridMesh,
    pub vdm: VdmImage,
    pub history: Vec<IterationRecord>,
}

/// Hooks for callers that watch or cancel a run.
pub trait RunMonitor {
    fn cancelled(&self) -> bool {
        false
    }

    /// Called after every iteration with the first view of that iteration.
    fn progress(&mut self, _record: &IterationRecord, _max_iterations: usize, _render: Option<&NormalRender>) {}
}

pub struct Quiet;

impl RunMonitor for Quiet {}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.into(), source }
}

/// EXR as a full VDM, PNG as a Z-only heightfield.
pub fn load_vdm(path: &Path) -> Result<VdmImage, RunError> {
    let fail = |e: &dyn std::fmt::Display| RunError::Input(format!("{}: {e}", path.display()));
    match ext(path).as_deref() {
        Some("exr") => exr_io::load_exr(path).map_err(|e| fail(&e)),
        Some("png") => png_io::load_gray(path).and_then(|g| png_io::gray_to_vdm(&g)).map_err(|e| fail(&e)),
        _ => Err(fail(&"expected an .exr or .png file")),
    }
}

/// Single-channel weights from a PNG (first channel) or EXR (R channel).
pub fn load_weights(path: &Path) -> Result<(usize, usize, Vec<f64>), RunError> {
    let fail = |e: &dyn std::fmt::Display| RunError::Input(format!("{}: {e}", path.display()));
    match ext(path).as_deref() {
        Some("png") => png_io::load_gray(path).map(|g| (g.width, g.height, g.values)).map_err(|e| fail(&e)),
        Some("exr") => {
            let v = exr_io::load_exr(path).map_err(|e| fail(&e))?;
            let r = v.data().chunks(3).map(|p| p[0] as f64).collect();
            Ok((v.width(), v.height(), r))
        }
        _ => Err(fail(&"expected an .exr or .png file")),
    }
}

pub fn initial_vdm(config: &RunConfig) -> Result<VdmImage, RunError> {
    let res = config.grid_resolution();
    let fail = |e: &dyn std::fmt::Display| RunError::Input(format!("init: {e}"));
    match &config.init {
        InitSpec::Zero {} => make_zero_vdm(res).map_err(|e| fail(&e)),
        InitSpec::Spike { .. } => make_spike_vdm(res, &config.init.spike_params().unwrap()).map_err(|e| fail(&e)),
        InitSpec::File { path } => {
            let v = load_vdm(path)?;
            if let Some(r) = config.resolution {
                if (v.width(), v.height()) != (r, r) {
                    return Err(RunError::Input(format!(
                        "init file is {}x{} but resolution is {r}",
                        v.width(),
                        v.height()
                    )));
                }
            }
            Ok(v)
        }
    }
}

fn region_mask(config: &RunConfig, mesh: &GridMesh) -> Result<Option<RegionMask>, RunError> {
    let Some(spec) = &config.mask else { return Ok(None) };
    let (w, h, values) = load_weights(&spec.path)?;
    let mode: vdmforge_core::MaskMode = spec.mode.into();
    let frac = spec.active_fraction.unwrap_or_else(|| mode.default_active_fraction());
    RegionMask::from_raster(&values, w, h, mesh.grid_w(), mesh.grid_h(), mode, frac)
        .map(Some)
        .map_err(|e| RunError::Input(format!("mask: {e}")))
}

fn guidance(config: &RunConfig, mesh: &GridMesh) -> Result<Box<dyn GuidanceProvider>, RunError> {
    match &config.guidance {
        GuidanceSpec::Oracle { target } => {
            let t = load_vdm(target)?;
            if (t.width(), t.height()) != (mesh.grid_w(), mesh.grid_h()) {
                return Err(RunError::Input(format!(
                    "oracle target is {}x{} but the mesh grid is {}x{}",
                    t.width(),
                    t.height(),
                    mesh.grid_w(),
                    mesh.grid_h()
                )));
            }
            Ok(Box::new(TargetShapeGuidance::new(build_grid_mesh(&t, &mesh.scale()))))
        }
        GuidanceSpec::External { endpoint, prompt, timeout_s } => {
            let ep = endpoint.parse().map_err(RunError::Input)?;
            let timeout = timeout_s.map(Duration::from_secs_f64).unwrap_or(DEFAULT_TIMEOUT);
            let mut g = ExternalGuidance::new(ep).with_timeout(timeout);
            if let Some(p) = prompt {
                g = g.with_prompt(p.clone());
            }
            Ok(Box::new(g))
        }
    }
}

struct RunObserver<'a> {
    start: Instant,
    history: BufWriter<File>,
    history_path: PathBuf,
    write_error: Option<std::io::Error>,
    max_iterations: usize,
    monitor: &'a mut dyn RunMonitor,
}

#[derive(Serialize)]
struct HistoryLine {
    iteration: usize,
    loss: f64,
    grad_norm: f64,
    wall_ms: f64,
}

impl Observer for RunObserver<'_> {
    fn now_ms(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }

    fn on_iteration(&mut self, r: &IterationRecord, _mesh: &GridMesh, renders: &[NormalRender]) -> ControlFlow<()> {
        let line = HistoryLine { iteration: r.iteration, loss: r.loss, grad_norm: r.grad_norm, wall_ms: r.wall_ms };
        if self.write_error.is_none() {
            let res = serde_json::to_writer(&mut self.history, &line)
                .map_err(std::io::Error::from)
                .and_then(|_| self.history.write_all(b"\n"));
            if let Err(e) = res {
                self.write_error = Some(e);
                return ControlFlow::Break(());
            }
        }
        self.monitor.progress(r, self.max_iterations, renders.first());
        if self.monitor.cancelled() {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }
}

pub fn run_generate(config: &RunConfig) -> Result<RunSummary, RunError> {
    run_generate_with(config, &mut Quiet)
}

pub fn run_generate_with(config: &RunConfig, monitor: &mut dyn RunMonitor) -> Result<RunSummary, RunError> {
    config.validate().map_err(RunError::Invalid)?;
    let scale = config.scale().expect("validated plane side");
    let optim: OptimConfig = config.optim_config();

    let init = initial_vdm(config)?;
    let mesh = build_grid_mesh(&init, &scale);
    let mask = region_mask(config, &mesh)?;
    let mut guide = guidance(config, &mesh)?;

    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let history_path = out.join(HISTORY_JSONL);
    let file = File::create(&history_path).map_err(io_err(&history_path))?;
    let mut obs = RunObserver {
        start: Instant::now(),
        history: BufWriter::new(file),
        history_path,
        write_error: None,
        max_iterations: optim.max_iterations,
        monitor,
    };

    log::info!(
        "optimizing {}x{} grid for {} iterations ({} views at {}px)",
        mesh.grid_w(),
        mesh.grid_h(),
        optim.max_iterations,
        optim.views_per_iteration,
        optim.render_resolution
    );
    let result = optimize(mesh, guide.as_mut(), &optim, mask, &mut obs);
    obs.history.flush().map_err(io_err(&obs.history_path))?;
    if let Some(e) = obs.write_error.take() {
        return Err(RunError::Io { path: obs.history_path, source: e });
    }
    let wall_ms = obs.now_ms();

    let (outcome, status, error) = match result {
        Ok(o) => {
            let status = if o.stop == StopReason::Cancelled { RunStatus::Cancelled } else { RunStatus::Done };
            (o, status, None)
        }
        Err(e) => {
            let message = e.kind.to_string();
            (*e.partial, RunStatus::Failed, Some(message))
        }
    };
    let baked = bake_with(&outcome.mesh, &scale, config.bake_mode.into());

    let brush = out.join(BRUSH_EXR);
    exr_io::save_exr(&baked.vdm, &brush).map_err(|e| RunError::Input(e.to_string()))?;
    let mesh_path = out.join(MESH_OBJ);
    obj::save_obj(&outcome.mesh, &mesh_path).map_err(|e| RunError::Input(e.to_string()))?;

    let metrics = Metrics {
        status,
        stop_reason: (status != RunStatus::Failed).then_some(match outcome.stop {
            StopReason::Completed => "completed",
            StopReason::Converged => "converged",
            StopReason::Plateau => "plateau",
            StopReason::Cancelled => "cancelled",
        }),
        error: error.clone(),
        iterations: outcome.history.len(),
        max_iterations: optim.max_iterations,
        seed: optim.seed,
        grid: [outcome.mesh.grid_w(), outcome.mesh.grid_h()],
        plane_side: scale.plane_side(),
        loss: LossSummary::from_history(&outcome.history),
        stats: baked.stats.into(),
        wall_ms,
        config: config.clone(),
    };
    let metrics_path = out.join(METRICS_JSON);
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    std::fs::write(&metrics_path, text).map_err(io_err(&metrics_path))?;

    let summary = RunSummary {
        output_dir: out.clone(),
        artifacts: [BRUSH_EXR, MESH_OBJ, METRICS_JSON, HISTORY_JSONL].map(String::from).to_vec(),
        metrics,
        mesh: outcome.mesh,
        vdm: baked.vdm,
        history: outcome.history,
    };
    match error {
        Some(message) => Err(RunError::Optimize { message, summary: Box::new(summary) }),
        None => Ok(summary),
    }
}
