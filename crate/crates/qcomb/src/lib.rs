//! File formats, configuration and the `qcomb` command-line pipeline on top
//! of `qcomb-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use config::PipelineConfig;
pub use error::CliError;

/// Caps the global rayon pool at `QCOMB_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    if let Ok(s) = std::env::var("QCOMB_THREADS") {
        let n: usize = s
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Validation(format!("QCOMB_THREADS must be a positive integer, got {s:?}")))?;
        // A pool built earlier in the process stays in place.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
