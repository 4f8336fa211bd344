//! Moment propagation, local linearisation, variational inference and
//! posterior geometry tools for small Bayesian neural networks.

pub mod compensated;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod gmm;
pub mod hmc;
pub mod io;
pub mod likelihood;
pub mod linear;
pub mod local;
pub mod mfvi;
pub mod model;
pub mod posterior;
pub mod rng;
pub mod stats;
pub mod sweep;
pub mod transport;
pub mod uat;

pub use error::{Error, Result};
