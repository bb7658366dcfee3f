//! State-conditioned memory compilation for text-world agents.

pub mod brief;
pub mod compiler;
pub mod env;
pub mod executor;
pub mod harness;
pub mod linalg;
pub mod memory;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod softmem;
pub mod text;
pub mod training;

pub use linalg::Mat;
pub use scalar::Scalar;

pub type ExecutorParamsF32 = executor::ExecutorParams<f32>;
pub type ExecutorParamsF64 = executor::ExecutorParams<f64>;
pub type SoftMemParamsF32 = softmem::SoftMemParams<f32>;
pub type SoftMemParamsF64 = softmem::SoftMemParams<f64>;
pub type LearnedCompilerF32 = compiler::learned::LearnedCompiler<f32>;
pub type LearnedCompilerF64 = compiler::learned::LearnedCompiler<f64>;
pub type SftModelF32 = training::SftModel<f32>;
pub type SftModelF64 = training::SftModel<f64>;
