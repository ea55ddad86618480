//! Deterministic `f64` tensor kernel: forward ops, a reverse-mode tape,
//! finite-difference checking and Adam.

mod adam;
pub mod gradcheck;
pub mod ops;
mod rng;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, Parameter};
pub use ops::{
    conv1d_forward, dense_forward, global_mean_pool, relu, softmax, softmax_cross_entropy,
};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
