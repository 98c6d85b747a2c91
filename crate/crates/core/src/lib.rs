//! Secretion by a circular cell: a spatial exclusion model with an
//! inhomogeneous Neumann flux, and a point source model built from Dirac
//! sources with closed-form time-dependent intensities.
//!
//! Modules are layered bottom-up: [`geometry`] and [`fem`] provide meshes and
//! P1 finite elements, [`intensities`] and [`greens`] hold the closed-form
//! source machinery, [`models`] combines them into solvers, [`metrics`]
//! compares solutions and [`experiments`] drives configuration, sweeps and
//! the command line.

pub mod error;
pub mod experiments;
pub mod fem;
pub mod geometry;
pub mod greens;
pub mod intensities;
pub mod metrics;
pub mod models;

pub use error::{Error, Result};

/// Two-dimensional vector used for points and directions.
pub type Vec2 = nalgebra::Vector2<f64>;
