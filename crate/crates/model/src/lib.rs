//! Toy conditional seam generator: point-cloud condition encoders, an
//! hourglass causal decoder over seam tokens, next-token training, sampling and
//! direct preference optimization.

pub mod config;
pub mod dpo;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod sample;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use model::{encode_condition, init_params, sequence_logprob, Condition};
pub use params::ParamStore;
