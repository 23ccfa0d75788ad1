//! Numerical building blocks shared by the model, the aggregator and the
//! data generator.

pub mod gaussian;
pub mod linalg;
pub mod pg;
pub mod quadrature;

pub use gaussian::{kl_diag, mmd_rbf, rbf_cross_expectation, w2_diag, DiagGaussian};
pub use linalg::{chol_solve, SpdFactor, SpdMatrix};
pub use pg::{log_cosh, pg_mean, sigmoid};
pub use quadrature::{trapezoid_grid, GaussHermite, QuadratureGrid};
