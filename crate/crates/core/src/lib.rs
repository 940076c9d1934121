//! Multi-clustering equivariant variational autoencoder.
//!
//! The core is generic over the floating-point type; the aliases below fix it
//! to `f64`, the precision used for training and for every shipped test.

pub mod data;
pub mod error;
pub mod graphcore;
pub mod lie;
pub mod model;
pub mod objective;
pub mod rng;
pub mod scalar;
pub mod stn;
pub mod trainer;

pub use error::Error;
pub use scalar::Scalar;

pub type Tensor64 = graphcore::Tensor<f64>;
pub type Tensor32 = graphcore::Tensor<f32>;
pub type Graph64 = graphcore::Graph<f64>;
pub type ParameterStore64 = graphcore::ParameterStore<f64>;
pub type GroupElement64 = lie::GroupElement<f64>;
pub type AlgebraCoefficients64 = lie::AlgebraCoefficients<f64>;
pub type Mcevae64 = model::Mcevae<f64>;
pub type Mcevae32 = model::Mcevae<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
