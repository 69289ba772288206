//! Feedforward-network training on closed-loop motion data.
//!
//! A mass with Stribeck-type friction tracks a fourth-order point-to-point
//! reference under discrete PD-like feedback. A small neural network is
//! trained to supply the feedforward input from the sampled output and its
//! backward differences. Because the recorded input and output are related
//! through the feedback loop, plain least-squares fitting of the network is
//! biased by measurement noise; projecting the residual onto instruments
//! built from the (noise-free) reference removes that bias locally. This
//! crate provides the simulation, both training criteria, closed-form local
//! estimates for comparing them, Monte-Carlo noise sweeps, and deterministic
//! SVG plots of the results.

pub mod analysis;
pub mod config;
pub mod error;
pub mod lti;
pub mod nn;
pub mod plant;
pub mod plot;
pub mod signals;
pub mod train;

pub use error::{Error, Result};
