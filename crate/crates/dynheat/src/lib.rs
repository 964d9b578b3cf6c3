//! Numerical laboratory for hierarchical control of heat equations with
//! dynamic boundary conditions: follower Nash-equilibrium solves, leader
//! null-control synthesis by penalized duality minimization, and a weighted
//! observability experiment suite.

pub mod carleman;
pub mod coeffexpr;
pub mod error;
pub mod geometry;
pub mod hum;
pub mod linalg;
pub mod nash;
pub mod pdecore;
pub mod report;
pub mod scalar;
pub mod semilinear;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for concrete use.
pub type Real = f64;

pub type Mesh = geometry::Mesh<Real>;
pub type PairField = geometry::PairField<Real>;
pub type RegionSet = geometry::RegionSet<Real>;
pub type TimeGrid = pdecore::TimeGrid<Real>;
pub type Trajectory = pdecore::Trajectory<Real>;
pub type CoefficientTables = coeffexpr::CoefficientTables<Real>;
pub type StepMatrices = pdecore::StepMatrices<Real>;
