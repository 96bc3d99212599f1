//! Factorization-machine CTR models with learned generated features.
//!
//! Five variants share one parameter layout: `fm`, `ffm`, and the leaf
//! variants `la_fm`, `ls_fm`, `lp_fm`, which pass each embedding through small
//! per-field generator networks. Leaf models fold back into a plain FM table
//! for serving.

pub mod data;
pub mod error;
pub mod export;
pub mod fgnet;
pub mod kv;
pub mod metrics;
pub mod numerics;
pub mod parallel;
pub mod params;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
pub use parallel::Parallelism;
pub use params::{build_parameters, ModelConfig, ParameterSet, Variant};
