//! Confidential partitioned inference with reversible masked outsourcing.
//!
//! An enclave holds prompts, masks and the KV cache; a provider holds the
//! projection weights. Every weight-dependent product is computed by the
//! provider on additively masked inputs and restored exactly by the enclave,
//! so the partitioned pipeline reproduces the single-party one bit for bit.

pub mod attack;
pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod linalg;
pub mod masking;
pub mod model;
pub mod prg;
pub mod privacy;
pub mod protocol;
pub mod ring;
pub mod stats;

pub use error::{Error, Result};
