//! Supervised and reinforcement training for the compiler stack.

pub mod data;
pub mod gradcheck;
pub mod grpo;
pub mod sft;

use thiserror::Error;

pub use data::{build_bank, generate_sft_data, DataGenConfig, SftSample};
pub use gradcheck::{gradcheck, GradcheckReport, VecParam};
pub use grpo::{grpo_advantages, grpo_loss, run_grpo, BanditEnv, GrpoConfig, GrpoLogRow, Rollout, RolloutEnv};
pub use sft::{run_sft, sft_loss, sft_loss_detached, PreparedSample, SftConfig, SftLogRow, SftModel, SftParts};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("harness: {0}")]
    Harness(#[from] crate::harness::HarnessError),
    #[error("environment: {0}")]
    Env(#[from] crate::env::EnvError),
    #[error("memory: {0}")]
    Memory(#[from] crate::memory::MemoryError),
    #[error("executor: {0}")]
    Executor(#[from] crate::executor::ExecutorError),
    #[error("soft memory: {0}")]
    SoftMem(#[from] crate::softmem::SoftMemError),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown house `{0}`")]
    UnknownHouse(String),
}
