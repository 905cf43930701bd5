//! Desk-scale spatial reasoning lab: synthetic scenes, encoders, a tiny
//! language model with rationale-token prefixes and regression heads, the
//! two-stage trainer and the evaluation bench.

pub mod arms;
pub mod config;
pub mod dataset;
pub mod drh;
pub mod drm;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod lm;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod qa;
pub mod registry;
pub mod render;
pub mod report;
pub mod scene;
pub mod stats;
pub mod trainer;
pub mod vocab;

pub use config::LabConfig;
pub use error::{GeodeError, Result};

/// Deterministic seed derived from a base seed and a salt (splitmix64 finalizer).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
