//! Block-wise JKO training of invertible neural-ODE normalizing flows.
//!
//! Each block of the flow is a residual vector field `f(x, t)` integrated
//! with fixed-step RK4 over its own time interval. Blocks are trained one at
//! a time by minimizing a proximal (JKO) objective: the KL divergence to a
//! target `p_Z ∝ exp(-V)` plus a squared-displacement penalty scaled by the
//! block's step size. The crate also carries the trajectory reparameterization
//! and refinement procedures, exact log-likelihoods, and kernel MMD two-sample
//! evaluation.
//!
//! The crate is `no_std` with `alloc`. The default `std` feature switches the
//! float math to std and enables runtime CPU feature detection in the matrix
//! kernels; without it the crate builds on `libm`. File formats and the
//! command line live in the companion `jkoflow` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![warn(missing_debug_implementations)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod datasets;
pub mod error;
pub mod flow;
mod math;
pub mod matrix;
pub mod mmd;
pub mod net;
pub mod objective;
pub mod ode;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
pub use flow::FlowNetwork;
pub use matrix::Mat;
pub use net::{ArchSpec, ParamVector, ResidualVectorField};
pub use objective::Potential;
pub use ode::{BlockInterval, DivergenceMode, IntegratorConfig};
pub use trainer::{DataProvider, TrainConfig};
