//! Triplet knowledge distillation at desk scale.
//!
//! A student and a larger teacher train together while a frozen anchor,
//! the previous generation's student, holds both near a known-good
//! function. The crate contains everything needed to run and measure that
//! setup end to end:
//!
//! - [`tensor`]: `f32` tensors with reverse-mode differentiation.
//! - [`nn`]: width-scaled MLP and small CNN classifiers.
//! - [`distill`]: cross-entropy, tempered KL and the six-weight objectives.
//! - [`trainer`]: every supervision wiring, SGD, and the generation curriculum.
//! - [`metrics`]: accuracy, behavior similarity, calibration, variance and bias.
//! - [`data`]: a Gaussian-mixture task with exact posterior, IDX and CSV loaders.
//! - [`cli`]: configs, checkpoints and the `trikd` commands.

pub mod cli;
pub mod data;
pub mod distill;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod trainer;
