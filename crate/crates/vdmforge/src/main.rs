use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vdmforge::config::{BakeModeSpec, RunConfig, SCHEMA};
use vdmforge::run::{load_vdm, run_generate, RunError, StatsJson};
use vdmforge::server::{serve_connection, serve_tcp, MOCK_CAPABILITIES};
use vdmforge::service::{self, ServiceConfig};
use vdmforge::{exr_io, obj};
use vdmforge_core::bake::bake_with;
use vdmforge_core::vdm::make_gaussian_bump_vdm;
use vdmforge_core::{
    build_grid_mesh, make_spike_vdm, make_zero_vdm, BakeMode, SpikeParams, SpikeProfile, TargetShapeGuidance, VdmScale,
};

#[derive(Parser)]
#[command(name = "vdmforge", version, about = "Vector displacement brush generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one optimization and write brush.exr, mesh.obj, metrics.json and history.jsonl.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// 512 grid, 512 renders, 10,000 iterations.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long)]
        iterations: Option<usize>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bake a grid mesh written by `generate` into an EXR VDM.
    Bake {
        #[arg(long)]
        obj: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Store vertex coordinates instead of displacements from the rest plane.
        #[arg(long)]
        absolute_coordinates: bool,
    },
    /// Print bake statistics of a grid mesh as JSON.
    Metrics {
        #[arg(long)]
        obj: PathBuf,
    },
    /// Run the job service and serve the UI.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value = "vdmforge-data")]
        data_dir: PathBuf,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        max_concurrent_jobs: usize,
    },
    /// Serve target-shape guidance over the frame protocol.
    GuidanceMock {
        /// Target VDM (EXR or PNG).
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        plane_side: f64,
        #[arg(long, conflicts_with = "stdio")]
        addr: Option<String>,
        /// Speak the protocol on stdin/stdout.
        #[arg(long)]
        stdio: bool,
    },
    /// Print the run config JSON schema.
    Schema,
    /// Write a synthetic VDM.
    MakeVdm {
        #[arg(long, value_enum)]
        kind: VdmKind,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0.5)]
        center_u: f64,
        #[arg(long, default_value_t = 0.5)]
        center_v: f64,
        /// Spike radius or bump sigma, in uv.
        #[arg(long, default_value_t = 0.15)]
        radius: f64,
        #[arg(long, default_value_t = 0.6)]
        height: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VdmKind {
    Zero,
    Cone,
    Gaussian,
    Bump,
}

enum Failure {
    Usage(String),
    Other(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Other(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Generate { config, seed, paper_scale, iterations, out } => {
            generate(&config, seed, paper_scale, iterations, out)
        }
        Command::Bake { obj, out, absolute_coordinates } => {
            let mesh = obj::load_obj(&obj)?;
            let mode = if absolute_coordinates { BakeMode::AbsoluteCoordinates } else { BakeMode::Displacement };
            let baked = bake_with(&mesh, &mesh.scale(), mode);
            exr_io::save_exr(&baked.vdm, &out)?;
            println!("{}", serde_json::to_string_pretty(&StatsJson::from(baked.stats))?);
            Ok(())
        }
        Command::Metrics { obj } => {
            let mesh = obj::load_obj(&obj)?;
            let baked = bake_with(&mesh, &mesh.scale(), BakeMode::Displacement);
            println!("{}", serde_json::to_string_pretty(&StatsJson::from(baked.stats))?);
            Ok(())
        }
        Command::Serve { addr, data_dir, ui_dir, max_concurrent_jobs } => {
            let mut cfg = ServiceConfig::new(data_dir);
            cfg.ui_dir = ui_dir;
            cfg.max_concurrent_jobs = max_concurrent_jobs;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(&addr, cfg))?;
            Ok(())
        }
        Command::GuidanceMock { target, plane_side, addr, stdio } => {
            let scale = VdmScale::new(plane_side).map_err(|e| Failure::Usage(e.to_string()))?;
            let vdm = load_vdm(&target)?;
            let mut provider = TargetShapeGuidance::new(build_grid_mesh(&vdm, &scale));
            if stdio {
                serve_connection(&mut provider, std::io::stdin().lock(), std::io::stdout().lock(), MOCK_CAPABILITIES)?;
            } else {
                let listener = std::net::TcpListener::bind(addr.as_deref().unwrap_or("127.0.0.1:9100"))?;
                log::info!("guidance mock on tcp://{}", listener.local_addr()?);
                serve_tcp(listener, &mut provider, MOCK_CAPABILITIES)?;
            }
            Ok(())
        }
        Command::Schema => {
            println!("{SCHEMA}");
            Ok(())
        }
        Command::MakeVdm { kind, resolution, center_u, center_v, radius, height, out } => {
            let center_uv = (center_u, center_v);
            let vdm = match kind {
                VdmKind::Zero => make_zero_vdm(resolution),
                VdmKind::Cone | VdmKind::Gaussian => {
                    let profile =
                        if matches!(kind, VdmKind::Cone) { SpikeProfile::Cone } else { SpikeProfile::Gaussian };
                    make_spike_vdm(resolution, &SpikeParams { center_uv, radius_uv: radius, height, profile })
                }
                VdmKind::Bump => make_gaussian_bump_vdm(resolution, center_uv, radius, height),
            }
            .map_err(|e| Failure::Usage(e.to_string()))?;
            exr_io::save_exr(&vdm, &out)?;
            Ok(())
        }
    }
}

fn generate(
    path: &Path,
    seed: Option<u64>,
    paper_scale: bool,
    iterations: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(path).map_err(Failure::Usage)?;
    cfg.apply_env();
    if paper_scale {
        cfg.apply_paper_scale();
    }
    if let Some(s) = seed {
        cfg.optimizer.seed = Some(s);
    }
    if let Some(n) = iterations {
        cfg.optimizer.max_iterations = Some(n);
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if matches!(cfg.bake_mode, BakeModeSpec::AbsoluteCoordinates) {
        log::warn!("baking absolute coordinates; sculpting tools expect displacements");
    }
    match run_generate(&cfg) {
        Ok(summary) => {
            let m = &summary.metrics;
            log::info!(
                "{:?} after {} iterations, loss {:?} -> {:?}, self-intersection {:.4}",
                m.status,
                m.iterations,
                m.loss.initial,
                m.loss.last,
                m.stats.self_intersection_ratio
            );
            println!("{}", summary.output_dir.display());
            Ok(())
        }
        Err(RunError::Invalid(issues)) => {
            Err(Failure::Usage(issues.iter().map(|i| format!("\n  {i}")).collect::<String>().trim_start().into()))
        }
        Err(e) => Err(e.into()),
    }
}
