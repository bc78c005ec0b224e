//! Learning multi-index models under Gaussian marginals by iterative subspace
//! recovery, plus the synthetic instances and diagnostics used to exercise it.

pub mod diagnostics;
pub mod discretization;
pub mod error;
pub mod harness;
pub mod hermite;
pub mod io;
pub mod learner;
pub mod subspace;
pub mod synthetic;

pub use error::{MimError, Result};
