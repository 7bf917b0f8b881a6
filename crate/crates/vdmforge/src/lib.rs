//! File formats, guidance transport, the generate pipeline and the job
//! service around [`vdmforge_core`].

pub mod client;
pub mod config;
pub mod exr_io;
pub mod frame;
pub mod obj;
pub mod png_io;
pub mod run;
pub mod server;
pub mod service;

pub use vdmforge_core as core;

pub use client::{Endpoint, ExternalGuidance};
pub use config::RunConfig;
pub use run::{run_generate, RunError, RunSummary};
