//! Conditional denoising-diffusion solver for planar inverse kinematics.
//!
//! Given a 2D target, the crate generates the joint angles whose
//! unit-length chain tip reaches that target: a transformer denoiser is
//! trained to reverse a Gaussian noising process over the angle vector,
//! conditioned on the target position. Everything is self-contained:
//! a small reverse-mode autodiff tape, closed-form planar kinematics,
//! dataset tooling, an MLP regression baseline, and SVG visualizations
//! of the noising and denoising processes.

pub mod autograd;
pub mod baselines;
pub mod denoiser;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod diffusion;
pub mod kinematics;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use dataset::Dataset;
pub use diffusion::{NoiseSchedule, Parameterization};
pub use kinematics::{ChainSpec, JointAngles, Point2};
pub use tensor::{Array, Rng, Shape};
