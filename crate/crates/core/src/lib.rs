//! Reflected diffusions in convex polyhedra, competing Brownian particles,
//! and Monte Carlo checks of transportation-cost-information inequalities.

pub mod bundle;
pub mod domain;
pub mod dynamics;
pub mod error;
pub mod particles;
pub mod quadrature;
pub mod reflect;
pub mod rng;
pub mod stats;
pub mod tci;
pub mod transport;

pub use error::{Error, ErrorClass, Result};
