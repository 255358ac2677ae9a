//! Simulation toolkit for planar Poisson ellipse percolation with heavy
//! tailed axis lengths, its long-range lattice counterpart, and the
//! renormalization and distance experiments built on them.

pub mod error;
pub mod estimators;
pub mod geometry;
pub mod graph;
pub mod lattice;
pub mod renorm;
pub mod rng;
pub mod sampler;
pub mod stats;

pub use error::{Error, Result};
