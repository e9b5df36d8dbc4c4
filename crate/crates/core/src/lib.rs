//! Electromagnetic side-channel activity classification at desk scale.
//!
//! The crate covers the full experiment pipeline: raw IQ trace files and
//! their manifests ([`trace_io`]), STFT feature extraction ([`spectral`]),
//! labeled dataset assembly and normalization ([`dataset`]), a from-scratch
//! dense classifier with backpropagation ([`mlp`]), layer-freezing transfer
//! learning ([`transfer`]), evaluation and cross-device/cross-session
//! portability matrices ([`eval`]), and a deterministic synthetic trace
//! generator that stands in for physical capture ([`synth`]).
//!
//! Everything is seeded: rerunning any operation with the same inputs and
//! seed reproduces its outputs byte for byte.

pub mod dataset;
pub mod error;
pub mod eval;
pub(crate) mod linalg;
pub mod mlp;
pub mod seeding;
pub mod spectral;
pub mod synth;
pub mod trace_io;
pub mod transfer;

pub use error::{Error, Result};
