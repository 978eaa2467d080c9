//! Conditional sequence VAE over trajectories, trained with the plain ELBO or
//! with mutual-information regularizers that shape the latent space so that a
//! composite skill's embedding is the sum of its subskill embeddings.

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod latent_math;
pub mod model;
pub mod noise;
pub mod objectives;
pub mod optim;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use latent_math::DiagGaussian;
pub use model::{GeneratedTrajectory, ModelBundle, ModelConfig, Trajectory};
pub use noise::NoiseSource;
pub use tensor::Tensor;
pub use objectives::{CompositionSpec, LossComponents, Objective, ObjectiveConfig};
pub use synthdata::Dataset;
pub use training::{MetricsRow, TrainConfig};
