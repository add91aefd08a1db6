//! Finite-volume solver for multi-species drift-diffusion with nonlocal
//! interactions through singular or smooth radial kernels.
//!
//! The pieces, bottom up: [`grid`] geometry, [`kernels`] and their
//! hat-basis convolution tensors, [`conv`] for FFT-accelerated field
//! evaluation, [`field`] for the per-species drift potentials, [`scheme`]
//! for the positivity-preserving implicit step, [`diagnostics`] for energy
//! and error measurement, and [`config`]/[`experiment`]/[`output`] for the
//! batch runner driven by the `ionfv` binary.

pub mod config;
pub mod conv;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod field;
pub mod grid;
pub mod kernels;
pub mod linalg;
pub mod output;
pub mod quadrature;
pub mod scheme;

pub use error::{Error, Result};
pub use grid::{Grid, Grid1D, Grid2D};
pub use kernels::{KernelFamily, KernelSpec};
