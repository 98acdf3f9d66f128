//! Measurement harness for similarity guided sampling: synthetic clips,
//! active-bin histograms, gradient checks, FLOP reports, toy training and
//! the `SGT1` tensor file format.

pub mod cli;
pub mod demo;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod synth;
pub mod train;

pub use error::{HarnessError, Result};
