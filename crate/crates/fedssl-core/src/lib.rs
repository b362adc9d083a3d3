//! Deterministic building blocks for simulating federated learning with
//! partially labeled clients.
//!
//! The crate is organized around four layers:
//!
//! - [`nn`]: a small dense softmax classifier with manual backpropagation,
//!   cross-entropy / KL losses, and plain or proximal SGD steps.
//! - [`data`]: synthetic blob generation, Dirichlet partitioning across
//!   clients, labeled/unlabeled splitting with label quarantine, and weak /
//!   strong augmentation.
//! - [`ssl`]: the semi-supervised machinery — confidence scoring of the
//!   global and local models, binary selection, thresholded pseudo-labeling,
//!   and the confidence-ratio-weighted consistency term.
//! - [`fed`]: the round protocol — client sampling, the two-phase local
//!   update, baseline self-training variants, and weighted aggregation.
//!
//! Everything is `no_std` + `alloc`: all randomness flows through explicitly
//! derived [`rng`] streams, float math goes through `libm`, and every
//! reduction uses a fixed summation order, so a (config, seed) pair produces
//! bit-identical results across runs and client scheduling orders.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod fed;
pub mod nn;
pub mod rng;
pub mod ssl;
