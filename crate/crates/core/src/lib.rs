//! Moving dim-small target detection with deformable temporal alignment and
//! attention-guided feature refinement.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training and
//! inference, `f64` for gradient verification); concrete aliases are provided
//! below.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod head;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod refine;
pub mod scalar;
pub mod tensor;
pub mod tda;
pub mod tensor_core;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
