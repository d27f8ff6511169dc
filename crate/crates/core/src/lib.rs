//! Implicit-field multi-class volumetric reconstruction.
//!
//! A strided 3D CNN encodes a low-resolution volume into a feature pyramid;
//! features are sampled at continuous coordinates with trilinear
//! interpolation, concatenated with the coordinate itself and decoded by a
//! two-layer MLP into per-point class probabilities. Training samples random
//! points, inference evaluates a uniform lattice of any resolution.
//!
//! The crate also contains the procedural pulmonary phantoms used as data,
//! structure-masked Dice metrics, a dense fully-convolutional baseline and
//! the file formats shared with the command-line driver.

pub mod baseline;
pub mod error;
pub mod experiment;
pub mod impulse;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
