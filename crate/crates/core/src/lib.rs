//! Parallel transport for graded superconnections.
//!
//! A superconnection `D = d - A_0 - A_1 - ... - A_m` on a trivial graded bundle over a
//! coordinate chart is described by endomorphism-valued forms with symbolic
//! coefficients. This crate integrates its transport along path families, cubes and
//! smooth simplices, and checks the algebraic identities that characterize flatness.

pub mod error;
pub mod expr;
pub mod forms;
pub mod graded;
pub mod quad;
pub mod superconn;
pub mod transport;
pub mod catalog;
pub mod cobar;
pub mod simplex;
pub mod scenario;

pub use error::{Error, ExprError, Result};
pub use expr::{Chart, ScalarExpr, Tape};
pub use forms::{cube_wedge, fiber_integrate, CubeForm, EndForm, ExprMatrix, SmoothMap};
pub use graded::{GradedDims, GradedEndo};
pub use quad::QuadSpec;
pub use superconn::{flatness_residuals, gauge_transform, is_flat, FlatnessReport, SampleGrid, Superconnection};
pub use transport::{transport_phi, transport_psi, PathFamily, TransportField};
pub use simplex::{psi_simplex, twisting_residual, Simplex};
pub use cobar::{bar_d, BarWord, FormalSum, Letter};
pub use scenario::{run, CheckRecord, RunError, RunOptions, Scenario, Suite};
