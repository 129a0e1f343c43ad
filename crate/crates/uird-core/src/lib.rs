//! Unsupervised identification and replay-based detection for ECG beat streams.
//!
//! The crate covers the full loop:
//!
//! - [`signal`]: WFDB format-212 ingestion, FIR filtering, Pan-Tompkins
//!   R-peak detection, beat segmentation and standardization.
//! - [`nn`]: a small reverse-mode differentiable engine (1-D conv stacks,
//!   batch norm, dense layers, Adam) with finite-difference verification.
//! - [`madegan`]: the memory-augmented adversarial autoencoder used to flag
//!   never-seen beat classes by reconstruction error.
//! - [`smote`]: per-class SMOTE generators that synthesize pseudo-replay
//!   data so historical recordings never need to be stored.
//! - [`classifier`]: the multi-class CNN beat classifier retrained per task.
//! - [`baselines`]: EWC, joint-training and detector-only comparison runs.
//! - [`pipeline`]: the closed loop that gates on novelty, synthesizes
//!   replay, retrains and recalibrates.
//! - [`metrics`]: precision/recall/F reports and comparison tables.
//! - [`synth`]: deterministic synthetic data so every experiment runs
//!   without external downloads.

pub mod baselines;
pub mod classifier;
pub mod error;
pub mod madegan;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod signal;
pub mod smote;
pub mod synth;

pub use error::{Error, Result};

/// Splitmix64-style stream derivation: one master seed plus a context tag
/// yields an independent, reproducible sub-seed. Adding a new tagged stream
/// never perturbs existing ones.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = master ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
        h ^= h >> 29;
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
