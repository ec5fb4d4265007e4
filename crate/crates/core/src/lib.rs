//! Desk-scale multilingual CTC encoder with language-routed expert banks.
//!
//! The crate is organized around a small tape-based autodiff engine
//! ([`tape`], [`kernels`]) that the encoder ([`model`]), LID router
//! ([`router`]), and CTC objective ([`ctc`]) are built on. [`synth`]
//! generates a deterministic multilingual corpus with a controllable
//! domain shift, [`train`] runs joint CTC+LID training and router-only
//! fine-tuning, and [`commands`] wires everything into reproducible
//! experiment runs.
//!
//! Core math is generic over the scalar type; the aliases below pin the
//! model stack to f64.

pub mod adam;
pub mod checkpoint;
pub mod commands;
pub mod ctc;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod router;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision tensor used by the model stack.
pub type Tensor = tensor::TensorBase<f64>;
/// Default-precision computation tape.
pub type Tape = tape::Tape<f64>;
/// Default-precision optimizer.
pub type Adam = adam::Adam<f64>;
