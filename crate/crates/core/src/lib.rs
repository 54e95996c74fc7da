//! Simulator and block-activation optimizer for zeroth-order federated
//! fine-tuning with heterogeneous per-client block activation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod rng;
pub mod verify;
pub mod vram;
pub mod workloads;
pub mod zo;

pub use error::{Error, Result};

/// The guide's chapters, compiled so their snippets run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/seeds.md")]
    mod seeds {}
    #[doc = include_str!("../../../book/src/estimator.md")]
    mod estimator {}
    #[doc = include_str!("../../../book/src/vram.md")]
    mod vram {}
    #[doc = include_str!("../../../book/src/activation.md")]
    mod activation {}
    #[doc = include_str!("../../../book/src/allocator.md")]
    mod allocator {}
    #[doc = include_str!("../../../book/src/federation.md")]
    mod federation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
