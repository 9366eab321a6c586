//! Labeled memory networks for online adaptation of a frozen classifier.
//!
//! A batch-trained primary classification network ([`pcn`]) produces an
//! embedding `h_t` and class scores `r_t`. A label-partitioned kernel memory
//! ([`memory`]) acts as a second-stage online learner that is written only
//! when the combined prediction misses a margin, and a combiner
//! ([`combiner`]) mixes the two score vectors with a fixed or per-label
//! recurrent gate. [`online`] runs the predict/observe protocol, [`data`]
//! provides loaders and synthetic tasks, and [`eval`] computes
//! log-perplexity, MRR and second-occurrence accuracy.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases below
//! fix the `f64` instantiation used by the CLI, checkpoints and experiments.

pub mod combiner;
pub mod data;
pub mod error;
pub mod eval;
pub mod memory;
pub mod numcore;
pub mod online;
pub mod pcn;
pub mod scalar;
pub mod selfcheck;

pub use error::{LmnError, Result};
pub use scalar::Scalar;

/// Dense vector of `f64`.
pub type Vector = numcore::DenseVector<f64>;
/// Row-major dense matrix of `f64`.
pub type Matrix = numcore::DenseMatrix<f64>;
/// Parameter store of `f64` tensors.
pub type Params = numcore::ParamStore<f64>;
/// Primary classification network over `f64`.
pub type Pcn = pcn::PcnModel<f64>;
/// Labeled memory over `f64`.
pub type Memory = memory::LabeledMemory<f64>;
/// Recurrent combiner over `f64`.
pub type Combiner = combiner::RnnCombiner<f64>;
/// Online session over `f64`.
pub type OnlineSession<'a> = online::Session<'a, f64>;
