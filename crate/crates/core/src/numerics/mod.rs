//! Dense matrices, reverse-mode differentiation, initialization, and Adam.

pub mod adam;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use init::{xavier_init, xavier_uniform};
pub use params::ParamTable;
pub use rng::{derive_seed, SplitMix64, Stage};
pub use scalar::Scalar;
pub use tape::{concat_cols, concat_rows, Tape, Var};
pub use tensor::Tensor;
