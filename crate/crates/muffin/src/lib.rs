//! File formats, parallel evaluation, experiment runners and the
//! command-line tool around [`muffin_core`].
#![warn(rust_2018_idioms, unused_qualifications)]

pub mod cache;
pub mod checkpoint;
pub mod cli;
mod codec;
pub mod config;
pub mod dataset;
mod error;
pub mod inspect;
pub mod parallel;
pub mod run;
pub mod tsv;

pub use error::{Error, Result};
