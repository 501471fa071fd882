//! Randomly perturbed Poincaré maps of stable limit cycles.
//!
//! The crate is organised bottom-up:
//!
//! * [`sde`] integrates deterministic and Itô stochastic vector fields on a
//!   fixed grid and detects section crossings.
//! * [`cycle`] locates an attracting periodic orbit by Newton shooting,
//!   rescales it to period one, builds a periodic orthonormal moving frame and
//!   assembles the coefficients of the linearized random return map
//!   (`A`, `B` and the joint covariance of the Gaussian forcing).
//! * [`norms`] builds a vector norm in which `A` is a strict contraction.
//! * [`rpm`] iterates the linearized map, the general affine random
//!   recursion `y ← A(I + σξB)y + δGη`, and the full stochastic return map.
//! * [`stats`] turns exit times into hazard curves, geometric tail fits and
//!   noise-scaling regressions.
//! * [`neuro`] provides three conductance-based neuron models together with
//!   spike and burst segmentation.
//! * [`io`] holds the versioned JSON artifact format and CSV writers.

pub mod cycle;
pub mod error;
pub mod io;
pub mod linalg;
pub mod models;
pub mod neuro;
pub mod norms;
pub mod rpm;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
