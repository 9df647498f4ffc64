//! Desk-scale one-step video restoration.
//!
//! The crate provides a small autodiff tensor library, adaptive window
//! geometry, a windowed RoPE transformer backbone, flow-matching sampling,
//! progressive distillation, adversarial post-training with the RpGAN /
//! approximate-R1/R2 / feature-matching loss suite, procedural data with a
//! degradation pipeline, and full-reference quality metrics.

pub mod apt;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod flow;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod restore;
pub mod teacher;
pub mod train;
pub mod window;

pub use error::{Error, Result};

// Training allocates and frees many mid-sized buffers per step; the system
// allocator hands those pages back and faults them in again.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
