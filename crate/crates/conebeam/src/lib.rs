//! Sparse-view cone-beam CT reconstruction toolkit.
//!
//! The centerpiece is a learnt half-quadratic-splitting loop
//! ([`solvers::hqs_reconstruct`]) that alternates a trained 2D slice denoiser
//! with a conjugate-gradient data-consistency solve, next to the analytic FDK
//! baseline ([`analytic::fdk_reconstruct`]) and a quadratically regularized
//! least-squares baseline. All operators work in f64 with a matched
//! forward/adjoint projector pair.

pub mod analytic;
pub mod denoise;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod solvers;
pub mod types;

pub use error::{Error, Result};
pub use geometry::{make_circular_geometry, subsample_views, ConeBeamGeometry, GeometrySpec};
pub use types::{ProjectionStack, Volume3D};
