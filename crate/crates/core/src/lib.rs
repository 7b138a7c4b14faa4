//! Membership-inference auditing over per-token log-probability records.
//!
//! Records ([`record`]) decouple model inference from scoring. Six
//! logit-based attacks ([`attacks`]) turn a record into a membership score,
//! [`metrics`] and [`evaluate`] measure member/non-member separability per
//! modality and split pair, and [`report`] lays out T-only vs V+T deltas.
//! [`synth`] generates ground-truth records from a small bigram model so the
//! whole chain can be checked end to end.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod attacks;
pub mod evaluate;
pub mod experiment;
pub mod metrics;
pub mod record;
pub mod report;
pub mod scores;
pub mod synth;

pub use attacks::{AttackConfig, AttackMethod, AttackScore, Orientation};
pub use metrics::{LabeledScore, RocResult};
pub use record::{ModalityMode, RecordSet, SampleRecord, SplitTag, TokenObservation};

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Record(#[from] record::RecordError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing report cell: model `{model_id}`, method `{method}`, modality {modality}, pair {split_pair}")]
    MissingCell {
        model_id: String,
        method: String,
        modality: ModalityMode,
        split_pair: String,
    },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 2 for usage and configuration problems, 1 for
    /// everything that fails at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
