//! Frequency-domain sequential recommendation.
//!
//! This crate is the allocation-only core: a real FFT and band layout
//! utilities, a tensor-level reverse-mode autodiff tape, the dual-branch
//! filtering model with user-adaptive filters, its losses and optimizer,
//! interaction-log preprocessing, and full-ranking evaluation. It does no
//! IO; file formats and the command-line tool live in the `muffin` crate.
#![no_std]
#![warn(rust_2018_idioms, unused_qualifications, missing_copy_implementations)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
