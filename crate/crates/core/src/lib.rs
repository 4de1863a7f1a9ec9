//! Sentence-level quality estimation for machine translation.
//!
//! The pipeline has two learned stages and an optional third:
//!
//! 1. a **predictor**, trained as a bidirectional word-prediction model on
//!    parallel text, which turns every target token into a quality
//!    estimation feature vector (QEFV);
//! 2. an **estimator**, a BiLSTM over those vectors, regressed onto
//!    sentence-level quality scores;
//! 3. an **ensemble** that stacks several predictor-estimator systems with
//!    ridge regression or second-order gradient-boosted trees.
//!
//! Everything is implemented from scratch on 64-bit dense tensors with
//! hand-written gradients; see the `book/` directory for a guided tour.

pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod nn;
pub mod predictor;
pub mod synthetic;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/predictor.md")]
    mod predictor {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/estimator.md")]
    mod estimator {}
    #[doc = include_str!("../../../book/src/ensemble.md")]
    mod ensemble {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
