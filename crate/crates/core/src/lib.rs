//! Generative flow and diffusion models on quotient spaces.
//!
//! This crate implements sampling dynamics that respect a continuous symmetry
//! group acting on the data space: global SO(3) rotations of CoM-free point
//! clouds and SO(2) rotations of the plane. Velocity and score fields are
//! projected onto the horizontal (orbit-orthogonal) subspace, and the
//! stochastic sampler carries the orbit-volume correction that makes the
//! projected process agree with the true quotient-space diffusion.
//!
//! Module map:
//! - [`geometry`]: spaces, clouds, tangents, projections, curvature;
//! - [`schedule`]: interpolant coefficients and score/velocity conversions;
//! - [`denoiser`]: denoiser trait, an analytic Gaussian denoiser and a small MLP;
//! - [`objectives`]: alignment and the training losses, plus the training loop;
//! - [`samplers`]: ODE, SDE and their quotient variants with diagnostics;
//! - [`metrics`]: independent oracles used to cross-check everything else;
//! - [`config`], [`report`]: run configuration and reproducible run artifacts.

pub mod config;
pub mod denoiser;
pub mod draws;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod metrics;
pub mod objectives;
pub mod report;
pub mod samplers;
pub mod schedule;
pub mod svg;

pub use error::{Error, Result};
