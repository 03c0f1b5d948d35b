//! Firmly nonexpansive convolutional operators, and solvers built on them.
//!
//! The crate has three layers:
//!
//! - **Structure**: block-circulant filter banks ([`algebra`]) and the
//!   Riemannian geometry of their orthogonality constraints ([`manifold`]).
//!   A bank whose tall orientation sits on the Stiefel manifold gives a
//!   building block `x -> T' sigma(T x + b)` that is firmly nonexpansive by
//!   construction, independent of training quality.
//! - **Operators**: compositions of such blocks ([`network`]) are averaged
//!   operators; scaling in and out of a lifted space turns them into signal
//!   and image denoisers with a certified averagedness constant, and
//!   [`training`] fits them to data while staying on (or provably near) the
//!   constraint set.
//! - **Solvers**: forward-backward and ADMM plug-and-play iterations
//!   ([`pnp`]) that provably converge when handed an averaged denoiser,
//!   plus the diagnostics that check averagedness empirically.
//!
//! [`data`] generates the piecewise-constant and blur test problems and
//! handles file formats; [`cli`] exposes the whole pipeline as subcommands.

pub mod algebra;
pub mod cli;
pub mod data;
pub mod dense;
pub mod dft;
pub mod error;
pub mod manifold;
pub mod network;
pub mod pnp;
pub mod rng;
pub mod serial;
pub mod training;

pub use cli::run_cli;
pub use error::{Error, Result};
