//! Synthetic benchmark harness for the incremental few-shot segmentation
//! engine in `ifss-core`: taxonomy generation, session schedules, metrics,
//! experiment and ablation runners, and text file formats.

pub mod config;
pub mod experiment;
pub mod formats;
pub mod metrics;
pub mod schedule;
pub mod taxonomy;

use ifss_core::membank::ClassId;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error("taxonomy: {0}")]
    Taxonomy(String),
    #[error("class {class_id}: no valid sample after {attempts} attempts")]
    Render { class_id: ClassId, attempts: u64 },
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: ifss_core::Error,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BenchError {
    /// Process exit code: 2 for configuration problems, 3 for numeric
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 2,
            BenchError::Numeric(_) => 3,
            BenchError::Core {
                source: ifss_core::Error::NonFinite(_),
                ..
            } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// Attaches context to engine errors.
pub(crate) trait Context<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for ifss_core::Result<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| BenchError::Core { context: f(), source })
    }
}

/// Derives an independent seed from a base seed and a path of labels
/// (splitmix64 finaliser folded over the labels).
pub fn mix_seed(seed: u64, labels: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    labels.iter().fold(splitmix(seed), |acc, &l| splitmix(acc ^ splitmix(l)))
}
