//! A desk-scale laboratory for PAC-Bayesian few-shot meta-learning.
//!
//! The crate implements, end to end, the chain from generalization bounds to
//! trainable objectives:
//!
//! * meta-level PAC-Bayes bounds and their term-by-term accounting
//!   ([`bounds`]),
//! * the Dirac/MAP meta-gradient family that recovers multi-task
//!   pretraining, Reptile, and MAML as special cases ([`meta`]),
//! * the PACOH and PACMAML objectives with an analytic Gaussian-process
//!   base learner ([`gp`]) and Monte-Carlo gradient estimators for
//!   non-conjugate losses ([`mc`]),
//! * synthetic task environments ([`env`]) and an experiment harness with
//!   grid search, cross-validation, and bound sweeps ([`harness`]).
//!
//! All gradients flow through a scalar reverse-mode tape ([`autodiff`]);
//! all randomness flows from one seed through counter-based substreams
//! ([`rng`]). Every experiment is bit-reproducible from its config file.
//!
//! The companion mdbook under `book/` walks through the concepts with
//! runnable snippets; those snippets are compiled and executed as doctests
//! of this crate (see the `book_doctests` module), so the guide cannot
//! drift from the code.

pub mod autodiff;
pub mod bounds;
pub mod env;
pub mod error;
pub mod gp;
pub mod harness;
pub mod mc;
pub mod meta;
pub mod rng;

pub use error::{Error, Result};

/// Book chapters compiled as doctests. Each module's documentation is the
/// literal chapter source, so every fenced Rust snippet in the guide is
/// checked by `cargo test --doc`.
#[cfg(doctest)]
mod book_doctests {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/environments.md")]
    mod environments {}
    #[doc = include_str!("../../../book/src/gp.md")]
    mod gp {}
    #[doc = include_str!("../../../book/src/bounds.md")]
    mod bounds {}
    #[doc = include_str!("../../../book/src/meta_learners.md")]
    mod meta_learners {}
    #[doc = include_str!("../../../book/src/mc_gradients.md")]
    mod mc_gradients {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
