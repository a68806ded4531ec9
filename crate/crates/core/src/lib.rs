//! Core of a variable-bit-rate neural image codec with mask-decay model
//! compression.
//!
//! The crate is organised around a small dense-tensor autograd engine
//! ([`tensor`], [`autograd`]), the codec network itself ([`model`], [`codec`]),
//! a bit-exact range coder with discretized probability models ([`coder`],
//! [`prior`]), the mask-decay pruning machinery ([`mask`]), the scalable
//! encoder bank ([`scalable`]), and the training / evaluation support
//! ([`train`], [`optim`], [`metrics`]).
//!
//! Everything here is `no_std` + `alloc` compatible; file handling, image
//! formats and the command line live in the companion `evc-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![warn(rust_2018_idioms)]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod coder;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod prior;
pub mod rng;
pub mod scalable;
pub mod tensor;
pub mod train;

pub use error::{CodecError, Error};
pub use tensor::{Scalar, Shape, Tensor};
