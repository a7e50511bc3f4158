//! Transform-augmented convolutions (TAConv) and everything needed to
//! evaluate their robustness: a fixed Gaussian–Hermite filter basis, six
//! filter-space perturbation transforms, layers that take a trainable
//! per-pixel max over transformed-kernel branches, image-space perturbation
//! generators, a BIM adversarial attack, severity calibration that equalizes
//! accuracy drops across perturbation kinds, and a training/evaluation
//! harness with a CLI.

pub mod basis;
pub mod calibrate;
pub mod cli;
pub mod error;
pub mod harness;
pub mod layers;
pub mod perturb;
pub mod rng;
pub mod tensor;
pub mod transforms;
pub mod util;

pub use error::{Error, Result};
