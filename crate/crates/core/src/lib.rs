pub mod action_opt;
pub mod baselines;
pub mod critics;
pub mod env;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod policies;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the learning stack.
pub type Real = f64;
pub type Mlp = numerics::Mlp<Real>;
pub type Params = numerics::Params<Real>;
pub type Adam = numerics::Adam<Real>;
pub type Tensor = numerics::Tensor<Real>;
