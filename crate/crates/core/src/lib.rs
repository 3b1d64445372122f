pub mod attention;
pub mod autograd;
pub mod conditioning;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod geometry;
pub mod nn;
pub mod projection;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = denoiser::Model<f32>;
pub type Model64 = denoiser::Model<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
