//! Synthetic datasets, one-step inner training and the meta-gradient
//! distiller built on PPO.

mod dataset;
mod inner;
mod ppmo;

pub use dataset::{
    initialize_dataset, DatasetError, DatasetProvenance, EncoderState, EnvDescriptor,
    SyntheticDataset, DATASET_FORMAT_VERSION, INITIAL_INNER_LR,
};
pub use inner::{inner_train, meta_gradient, outer_policy_loss, EncodedPolicy, InnerRecord, MetaGradient};
pub use ppmo::{
    distill, distill_with_encoder, identity_encoder, ppmo_meta_epoch, run_distillation, split_setup,
    Convergence, DistillConfig, DistillOutcome, DistillReport, DistillState, MetaEpochStats,
    MetaSetup, ETA_FLOOR,
};

use thiserror::Error;

use crate::diff::DiffError;
use crate::env::EnvError;
use crate::ppo::PpoError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("numerical failure: {0}")]
    Numerical(#[from] DiffError),
    #[error("numerical failure in meta-epoch {epoch}: {detail}")]
    EpochFailed { epoch: usize, detail: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl From<PpoError> for DistillError {
    fn from(e: PpoError) -> Self {
        match e {
            PpoError::Numerical(d) => DistillError::Numerical(d),
            PpoError::Env(e) => DistillError::Env(e),
            PpoError::Diverged { epoch, detail } => DistillError::EpochFailed { epoch, detail },
            PpoError::InvalidHyperparams(m) => DistillError::InvalidConfig(m),
        }
    }
}

impl DistillError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, DistillError::Numerical(_) | DistillError::EpochFailed { .. })
    }
}

/// Fewest synthetic instances that can separate `c` action classes:
/// `ceil(c / 2) + 1`.
pub fn kmin(c: usize) -> Result<usize, DistillError> {
    if c == 0 {
        return Err(DistillError::InvalidConfig("action-class count must be >= 1".into()));
    }
    Ok(c.div_ceil(2) + 1)
}
