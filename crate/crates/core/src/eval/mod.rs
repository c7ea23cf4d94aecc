//! Metrics and experiment orchestration.

pub mod crossval;
pub mod metrics;
pub mod suite;
pub mod sweep;
pub mod table;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crossval::{run_cross_validation, CvOptions, CvResult};
pub use metrics::{accuracy, auroc, f1_score, Level, MetricReport, ModelTag};
pub use suite::{evaluate_suite, train_suite, ModelSuite, SuiteConfig};
pub use sweep::{run_vat_sweep, Condition, SweepConfig, SweepOptions, SweepResult};
pub use table::CvTable;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Identifies the inputs that produced an artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
}

impl Default for Provenance {
    fn default() -> Self {
        Self {
            config_hash: "unhashed".to_string(),
            seeds: Vec::new(),
            code_version: CODE_VERSION.to_string(),
        }
    }
}

/// Thread pool running at most `workers` jobs at once (0 = one per core).
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))
}
