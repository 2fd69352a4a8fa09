//! Collaborative prediction of language-model benchmark scores.
//!
//! The crate treats published benchmark results as a sparse `models x tasks`
//! score matrix and fills in the missing cells with collaborative filtering:
//! matrix factorization ([`mf`]) and a neural collaborative filter ([`ncf`])
//! that can also consume descriptive factors of models and tasks. A
//! per-family sigmoidal scaling curve ([`scaling`]) serves as the baseline.
//! [`metrics`], [`attribution`] and [`analysis`] provide the evaluation and
//! analysis experiments; [`cli`] wires everything into a command-line tool.

pub mod analysis;
pub mod attribution;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod mf;
pub mod ncf;
pub mod scaling;

pub use error::{Error, Result};
