//! Learns compact binary codes for users and items from a ratings matrix and
//! retrieves by Hamming distance.
//!
//! Two variational encoders (one per side of the matrix) map rating rows to
//! Gaussian posteriors; a stack of planar flows reshapes each posterior toward
//! a per-dimension mixture of Gaussians centered at ±1 so that the sign of the
//! transformed latent is an informative bit. Training alternates user and item
//! phases of Adam on a Poisson reconstruction of the ratings, the two KL
//! terms, and an LSH-derived cluster-consistency penalty that keeps
//! hash-neighbors close in both the real and binary spaces.
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats, timing, and
//! the command-line interface live in the companion `hcfrec` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod consistency;
pub mod flow;
pub mod hashing;
pub mod ingest;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod trainer;

pub use ingest::{RatingMatrix, RatingsFormat, SplitDataset};
pub use trainer::{Hyperparams, ModelState, TrainMode, TrainOutput};
