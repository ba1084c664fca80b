use std::path::PathBuf;

use crate::kernel::KernelFamily;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("workload family {workload} does not match config family {config}")]
    FamilyMismatch {
        workload: KernelFamily,
        config: &'static str,
    },
    #[error("invalid workload: {0}")]
    InvalidWorkload(String),
    #[error("workload maps to an empty grid (every group is empty)")]
    EmptyGrid,
    #[error("attention grid {g} is not divisible by {n_heads} heads")]
    HeadMisaligned { g: u64, n_heads: u64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
    #[error("invalid hardware: {0}")]
    InvalidHardware(String),
    #[error("no feasible (macro, micro) pair")]
    NoFeasiblePair,
    #[error("measurement failed for {tuple}: {reason}")]
    Measurement { tuple: String, reason: String },
    #[error("profiling aborted: {failed} of {total} measurements failed")]
    ProfileAborted { failed: usize, total: usize },
    #[error("no profile records to fit")]
    EmptyDataset,
    #[error("no table can serve macro {macro_id}: {reason}")]
    MissingTableData { macro_id: u32, reason: String },
    #[error("empty query set")]
    EmptyQuerySet,
    #[error("{what}: unsupported schema version (expected {expected}, found {found})")]
    SchemaVersion {
        what: &'static str,
        expected: u32,
        found: String,
    },
    #[error("{what}: invalid field `{field}`: {reason}")]
    Field {
        what: &'static str,
        field: String,
        reason: String,
    },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn field(
        what: &'static str,
        field: impl Into<String>,
        reason: impl Into<String>,
    ) -> Self {
        Error::Field {
            what,
            field: field.into(),
            reason: reason.into(),
        }
    }
}
