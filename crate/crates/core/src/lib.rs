//! Class-level machine unlearning by decision-boundary shifting.
//!
//! The crate removes one class from a trained fully-connected classifier
//! with two boundary-shifting methods:
//!
//! - **Boundary Shrink** perturbs each forgetting sample along the sign of
//!   its input gradient, labels the sample with the class the original model
//!   assigns to that perturbed point (never the forgetting class), and
//!   finetunes on the relabeled samples.
//! - **Boundary Expanding** adds a zero-initialised shadow output, finetunes
//!   the forgetting samples onto it, then prunes it.
//!
//! Retrain, Finetune, Random Labels and Negative Gradient baselines are
//! included, along with accuracy, entropy-threshold membership inference,
//! output-entropy, decision-region and timing evaluation, and an experiment
//! harness with a bit-exact checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod unlearn;

pub use data::{Example, ForgetSplit, LabeledDataset, SplitAccess};
pub use error::{Error, Result};
pub use nn::{Classifier, OptimizerConfig};
pub use tensor::Tensor;
pub use unlearn::{Method, UnlearnResult};
