//! Training, evaluation, checkpoints and the long-form experiment for the
//! S4 and Transformer decoders in `s4dec-core`.

use std::path::Path;

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod longform;
pub mod train;

pub use checkpoint::{average_checkpoints, average_files, Checkpoint};
pub use config::RunConfig;
pub use eval::evaluate;
pub use longform::run_longform_experiment;
pub use train::train;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] s4dec_core::error::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint manifests disagree: {0}")]
    ManifestMismatch(String),
    #[error("checkpoint does not fit: {0}")]
    Mismatch(String),
    #[error("bad dataset: {0}")]
    Data(String),
    #[error("non-finite training loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64, loss: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}
