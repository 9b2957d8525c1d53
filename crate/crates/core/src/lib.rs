//! Asynchronous distributed EM with a γ-gated manager, a linear
//! mixed-effects plugin, a single-process ECME baseline, data generators and
//! run diagnostics.

pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod exact;
pub mod io;
pub mod linalg;
pub mod lmm;
pub mod model;
pub mod runtime;

pub use error::{Error, Result};
