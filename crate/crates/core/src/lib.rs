//! Core of the quantum-attention routing agent.
//!
//! Everything in this crate is pure computation over `alloc` collections:
//! the split-delivery routing environment, a small statevector simulator
//! for the 4-qubit key/query attention circuit, a reverse-mode autodiff
//! tape with Adam, the encoder/decoder policy, the REINFORCE trainer, and
//! hardware run planning. File formats, configuration and the CLI live in
//! the `qroute` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod env;
mod error;
pub mod hwplan;
pub(crate) mod math;
pub mod policy;
pub mod qsim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
