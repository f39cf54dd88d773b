pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod models;
pub mod noise_policy;
pub mod optim;
pub mod quantizer;
pub mod rng;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use experiment::ExperimentConfig;
pub use models::{Model, ModelSpec};
pub use noise_policy::NoisePolicy;
pub use quantizer::QuantizerState;
pub use rng::RandomSource;
pub use tensor::Tensor;
