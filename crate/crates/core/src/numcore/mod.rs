//! Deterministic numeric kernel: dense vectors and matrices, stable softmax,
//! cosine kernel, a GRU cell with hand-derived gradients, Adam, and a
//! central-difference gradient checker.

mod adam;
mod gradcheck;
mod gru;
mod linalg;
mod params;
mod prng;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{backprop_check, GradCheckReport, Objective};
pub use gru::{gru_step, GateInputs, Gru, GruTape};
pub use linalg::{
    argmax, cosine, dot, log_softmax, norm, sigmoid, softmax, softmax_in_place, DenseMatrix,
    DenseVector, COSINE_ZERO_NORM,
};
pub use params::{Param, ParamId, ParamStore};
pub use prng::Prng;
pub(crate) use linalg::cosine_unchecked;
