//! Differentiable radiosity-style light transport between Gaussian surfels,
//! with radiance stored as spherical-harmonics coefficients.

pub mod adjoint;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod optim;
pub mod params;
pub mod render;
pub mod scene;
pub mod sh;
pub mod solvers;
pub mod transport;

pub use error::{Error, Result};
pub use scene::{Light, LightKind, Scene, Surfel};
pub use sh::{ColorSh, Direction, Material, ShVector, Vec3};
pub use solvers::{SolveState, SolverConfig, SolverKind};
