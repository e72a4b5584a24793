//! Orchestration of the three-stage recipe: data generation, CTC alignment,
//! stage training, N-best building, evaluation and scale tuning.

mod checks;
mod config;
mod eval;
mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use checks::{
    ctc_oracle, decoder_oracle, fullsum_oracle, mbr_algebra_oracle, run_gradcheck, run_oracle_check, GradcheckSummary,
    OracleSummary,
};
pub use config::{Config, Grid, Paths, SelectBy, CONFIG_HEADER};
pub use eval::{decode_split, evaluate, tune_scales, EvalReport, TuneResult, UttResult};
pub use train::{
    align, build_nbest, frame_batches, gen_data, load_model, mbr_scales, run_stage, EpochMetrics, Stage,
    StageReport,
};

use crate::ctc::CtcError;
use crate::dataio::DataError;
use crate::decoder::DecodeError;
use crate::lm::LmError;
use crate::losses::LossError;
use crate::mbr::MbrError;
use crate::model::checkpoint::CheckpointError;
use crate::model::ctc_net::CtcNetError;
use crate::model::ModelError;
use crate::optim::OptimError;
use crate::topology::TopologyError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing {artifact}: {path}")]
    Missing { artifact: &'static str, path: PathBuf },
    #[error("stage order: {0}")]
    Order(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    CtcNet(#[from] CtcNetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mbr(#[from] MbrError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

impl PipelineError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Missing { .. } => "missing_artifact",
            Self::Order(_) => "stage_order",
            Self::CheckFailed(_) => "check_failed",
            Self::Io { .. } => "io",
            Self::Data(_) => "data",
            Self::Model(_) => "model",
            Self::Checkpoint { .. } => "checkpoint",
            Self::Ctc(_) | Self::CtcNet(_) => "ctc",
            Self::Loss(_) => "loss",
            Self::Mbr(_) => "mbr",
            Self::Lm(_) => "lm",
            Self::Optim(_) => "optim",
            Self::Decode(_) => "decode",
            Self::Topology(_) => "topology",
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

pub(crate) fn require(artifact: &'static str, path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing { artifact, path: path.to_path_buf() })
    }
}
