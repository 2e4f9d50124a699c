//! Operational layer for the two-phase tool agent: layered configuration,
//! HTTP clients for remote services, the retrieval service, and the file
//! based stages that take a query set to rewards, advantages, objective
//! values and a metric report.

pub mod clients;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod service;

pub use clients::ClientError;
pub use config::{ConfigError, RunConfig};
pub use pipeline::{run, run_to_disk, Artifacts, PipelineError, RunOutput};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VALIDATION: i32 = 2;
    pub const ENDPOINT: i32 = 3;
}

/// Exit code for an error: endpoint failures anywhere in the source chain
/// map to [`exit::ENDPOINT`], everything else to [`exit::VALIDATION`].
pub fn exit_code(err: &(dyn std::error::Error + 'static)) -> i32 {
    let mut next = Some(err);
    while let Some(e) = next {
        if e.is::<ClientError>() {
            return exit::ENDPOINT;
        }
        next = e.source();
    }
    exit::VALIDATION
}
