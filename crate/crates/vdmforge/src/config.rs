//! Run configuration: the JSON document accepted by `vdmforge generate` and
//! `POST /jobs`. The published schema lives in `schema/run_config.schema.json`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vdmforge_core::optimizer::{ConfigError, PlateauStop};
use vdmforge_core::vdm::{SpikeParams, SpikeProfile, VdmScale};
use vdmforge_core::{BakeMode, MaskMode, NormalSpace, OptimConfig, StepRule};

use crate::client::Endpoint;

pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");
pub const ENDPOINT_ENV: &str = "VDMFORGE_GUIDANCE_ENDPOINT";

pub const DESK_RESOLUTION: usize = 64;
pub const PAPER_RESOLUTION: usize = 512;
pub const ORACLE_STEP_SIZE: f64 = 1e-2;
pub const EXTERNAL_STEP_SIZE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Cone,
    Gaussian,
}

impl From<Profile> for SpikeProfile {
    fn from(p: Profile) -> Self {
        match p {
            Profile::Cone => SpikeProfile::Cone,
            Profile::Gaussian => SpikeProfile::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitSpec {
    Zero {},
    Spike {
        #[serde(default = "default_center")]
        center_uv: [f64; 2],
        #[serde(default = "default_radius")]
        radius_uv: f64,
        #[serde(default = "default_height")]
        height: f64,
        #[serde(default = "default_profile")]
        profile: Profile,
    },
    /// EXR VDM, or PNG heightfield read into the Z channel.
    File {
        path: PathBuf,
    },
}

fn default_center() -> [f64; 2] {
    [0.5, 0.5]
}
fn default_radius() -> f64 {
    0.25
}
fn default_height() -> f64 {
    1.0
}
fn default_profile() -> Profile {
    Profile::Cone
}

impl InitSpec {
    pub fn spike_params(&self) -> Option<SpikeParams> {
        match *self {
            InitSpec::Spike { center_uv, radius_uv, height, profile } => Some(SpikeParams {
                center_uv: (center_uv[0], center_uv[1]),
                radius_uv,
                height,
                profile: profile.into(),
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskModeSpec {
    #[default]
    Surface,
    Structure,
}

impl From<MaskModeSpec> for MaskMode {
    fn from(m: MaskModeSpec) -> Self {
        match m {
            MaskModeSpec::Surface => MaskMode::Surface,
            MaskModeSpec::Structure => MaskMode::Structure,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    /// PNG or EXR raster; the first channel is the weight.
    pub path: PathBuf,
    #[serde(default)]
    pub mode: MaskModeSpec,
    /// Fraction of iterations the mask is enforced; defaults by mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GuidanceSpec {
    /// Analytic target-shape oracle toward the mesh built from `target`.
    Oracle { target: PathBuf },
    External {
        endpoint: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prompt: Option<serde_json::Value>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_s: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRuleSpec {
    Plain,
    AdaptiveMoment,
    UniformMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BakeModeSpec {
    #[default]
    Displacement,
    AbsoluteCoordinates,
}

impl From<BakeModeSpec> for BakeMode {
    fn from(m: BakeModeSpec) -> Self {
        match m {
            BakeModeSpec::Displacement => BakeMode::Displacement,
            BakeModeSpec::AbsoluteCoordinates => BakeMode::AbsoluteCoordinates,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceSpec {
    World,
    Camera,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauSpec {
    pub window: usize,
    pub threshold: f64,
}

/// Every field is optional; unset fields take the defaults for the
/// guidance kind.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views_per_iteration: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render_resolution: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_rule: Option<StepRuleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plateau: Option<PlateauSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_space: Option<SpaceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_attempts: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Grid vertices per side for zero and spike initializations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
    #[serde(default = "default_side")]
    pub plane_side: f64,
    pub init: InitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskSpec>,
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub bake_mode: BakeModeSpec,
}

fn default_side() -> f64 {
    1.0
}

/// One validation problem, addressed by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub field: String,
    pub message: String,
}

impl Issue {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let InitSpec::File { path } = &mut self.init {
            fix(path);
        }
        if let Some(m) = &mut self.mask {
            fix(&mut m.path);
        }
        if let GuidanceSpec::Oracle { target } = &mut self.guidance {
            fix(target);
        }
        fix(&mut self.output_dir);
    }

    /// Replaces an external endpoint with `VDMFORGE_GUIDANCE_ENDPOINT` when set.
    pub fn apply_env(&mut self) {
        if let (Ok(ep), GuidanceSpec::External { endpoint, .. }) = (std::env::var(ENDPOINT_ENV), &mut self.guidance) {
            if !ep.trim().is_empty() {
                log::info!("guidance endpoint overridden by {ENDPOINT_ENV}: {ep}");
                *endpoint = ep;
            }
        }
    }

    /// Desk-scale defaults swapped for 512 grids, 512 renders and 10,000
    /// iterations.
    pub fn apply_paper_scale(&mut self) {
        if !matches!(self.init, InitSpec::File { .. }) {
            self.resolution = Some(PAPER_RESOLUTION);
        }
        let paper = OptimConfig::paper_scale();
        self.optimizer.max_iterations = Some(paper.max_iterations);
        self.optimizer.render_resolution = Some(paper.render_resolution);
    }

    pub fn grid_resolution(&self) -> usize {
        self.resolution.unwrap_or(DESK_RESOLUTION)
    }

    pub fn scale(&self) -> Option<VdmScale> {
        VdmScale::new(self.plane_side).ok()
    }

    pub fn optim_config(&self) -> OptimConfig {
        let o = &self.optimizer;
        let d = OptimConfig::default();
        let default_eta = match self.guidance {
            GuidanceSpec::Oracle { .. } => ORACLE_STEP_SIZE,
            GuidanceSpec::External { .. } => EXTERNAL_STEP_SIZE,
        };
        let (b1, b2, eps) = (o.beta1.unwrap_or(0.9), o.beta2.unwrap_or(0.999), o.eps.unwrap_or(1e-8));
        let step_rule = match o.step_rule.unwrap_or(StepRuleSpec::UniformMoment) {
            StepRuleSpec::Plain => StepRule::Plain,
            StepRuleSpec::AdaptiveMoment => StepRule::AdaptiveMoment { beta1: b1, beta2: b2, eps },
            StepRuleSpec::UniformMoment => StepRule::UniformMoment { beta1: b1, beta2: b2, eps },
        };
        OptimConfig {
            lambda: o.lambda.unwrap_or(d.lambda),
            step_size: o.step_size.unwrap_or(default_eta),
            max_iterations: o.max_iterations.unwrap_or(d.max_iterations),
            views_per_iteration: o.views_per_iteration.unwrap_or(d.views_per_iteration),
            render_resolution: o.render_resolution.unwrap_or(d.render_resolution),
            seed: o.seed.unwrap_or(d.seed),
            step_rule,
            plateau: o.plateau.map(|p| PlateauStop { window: p.window, threshold: p.threshold }),
            normal_space: match o.normal_space {
                Some(SpaceSpec::Camera) => NormalSpace::Camera,
                _ => NormalSpace::World,
            },
            camera_distance: o.camera_distance.unwrap_or(d.camera_distance),
            fov_y: o.fov_y.unwrap_or(d.fov_y),
            snapshot_every: o.snapshot_every,
            guidance_attempts: o.guidance_attempts.unwrap_or(d.guidance_attempts),
        }
    }

    pub fn endpoint(&self) -> Option<Result<Endpoint, String>> {
        match &self.guidance {
            GuidanceSpec::External { endpoint, .. } => Some(endpoint.parse()),
            GuidanceSpec::Oracle { .. } => None,
        }
    }

    /// Every problem with the config, not just the first.
    pub fn validate(&self) -> Result<(), Vec<Issue>> {
        let mut out = Vec::new();
        let file = |out: &mut Vec<Issue>, field: &str, p: &Path| {
            if !p.is_file() {
                out.push(Issue::new(field, format!("file not found: {}", p.display())));
            } else if !matches!(ext(p).as_deref(), Some("exr" | "png")) {
                out.push(Issue::new(field, format!("expected an .exr or .png file: {}", p.display())));
            }
        };
        if let Some(r) = self.resolution {
            if r < 2 {
                out.push(Issue::new("resolution", "must be at least 2"));
            }
        }
        if !(self.plane_side.is_finite() && self.plane_side > 0.0) {
            out.push(Issue::new("plane_side", "must be positive and finite"));
        }
        match &self.init {
            InitSpec::Zero {} => {}
            InitSpec::Spike { .. } => {
                if let Err(e) = self.init.spike_params().unwrap().validate() {
                    out.push(Issue::new("init", e.to_string()));
                }
            }
            InitSpec::File { path } => file(&mut out, "init.path", path),
        }
        if let Some(m) = &self.mask {
            file(&mut out, "mask.path", &m.path);
            if let Some(f) = m.active_fraction {
                if !(0.0..=1.0).contains(&f) {
                    out.push(Issue::new("mask.active_fraction", "must lie in [0, 1]"));
                }
            }
        }
        match &self.guidance {
            GuidanceSpec::Oracle { target } => file(&mut out, "guidance.target", target),
            GuidanceSpec::External { endpoint, timeout_s, .. } => {
                if let Err(e) = endpoint.parse::<Endpoint>() {
                    out.push(Issue::new("guidance.endpoint", e));
                }
                if let Some(t) = timeout_s {
                    if !(t.is_finite() && *t > 0.0) {
                        out.push(Issue::new("guidance.timeout_s", "must be positive"));
                    }
                }
            }
        }
        for e in self.optim_config().issues() {
            let ConfigError::Invalid { name, reason } = e else { continue };
            let name = match name {
                "step_rule" => "beta1/beta2/eps",
                n => n,
            };
            out.push(Issue::new(format!("optimizer.{name}"), reason));
        }
        if self.output_dir.as_os_str().is_empty() {
            out.push(Issue::new("output_dir", "must not be empty"));
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

pub(crate) fn ext(p: &Path) -> Option<String> {
    p.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}
