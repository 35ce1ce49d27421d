//! Debiased product bundling: a popularity-free teacher that scores items
//! from bundle co-membership alone, distilled into a multimodal student.
//!
//! Numerical code is generic over [`numerics::Scalar`]; training runs in
//! `f32` and gradient checks replay the same graphs in `f64`.

pub mod corpus;
pub mod diet;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod feedback;
pub mod numerics;

pub use error::{Error, Result};

/// Working precision of training and inference.
pub type Real = f32;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Params32 = numerics::ParamTable<f32>;
pub type Params64 = numerics::ParamTable<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type Tape64 = numerics::Tape<f64>;
