//! Numerical laboratory for adversarial density estimation with random-feature
//! discriminators: gridded densities, MMD gradient flows, transport metrics
//! and seeded experiment drivers that check the analytic bounds.

pub mod error;
pub mod experiments;
pub mod flow;
pub mod grid;
pub mod kernel;
pub mod oracles;
pub mod rng;
pub mod selftest;
pub mod transport;

pub use error::{Error, Result};
