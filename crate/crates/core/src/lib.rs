//! Numerical toolkit for space-time periodic homogenization of porous-medium
//! and fast-diffusion equations
//!
//! ```text
//! ∂t u = div( a(x/ε, t/ε^r) ∇ |u|^{p-1} u ) + f,
//! ```
//!
//! with coefficients oscillating at spatial period `ε` and temporal period
//! `ε^r`.
//!
//! The crate is organized bottom-up:
//!
//! * [`fields`]: periodic coefficient fields, cell and macroscopic grids.
//! * [`cellsolve`]: the regime-dependent cell problems (elliptic per time
//!   slice, time-averaged elliptic, time-periodic parabolic).
//! * [`effmat`]: homogenized matrices, critical-regime tables, ellipticity
//!   and skew-symmetry reports.
//! * [`pdesolve`]: backward Euler / Newton solvers for the oscillating and the
//!   homogenized problem, discrete `H^{-1}` norm, energy functionals.
//! * [`harness`]: ε-sequence convergence studies and corrector defects.
//! * [`io`]: the `oscidiff-*` text formats and CSV output.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cellsolve;
pub mod effmat;
pub mod error;
pub mod fields;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod pdesolve;
pub mod stencil;
pub mod tensor;

pub use cellsolve::{CellParameter, CellSolution, Regime};
pub use effmat::EffectiveTensor;
pub use error::{Error, Result};
pub use fields::{CellGrid, MacroGrid, PeriodicMatrixField};
pub use harness::ConvergenceReport;
pub use pdesolve::SpaceTimeField;
pub use tensor::Tensor;

/// Relative residual tolerance of every linear cell solve.
pub const SOLVER_TOL: f64 = 1e-10;
/// Defect tolerance of the period-map fixed point.
pub const PERIODIC_TOL: f64 = 1e-10;
/// Maximum number of period-map sweeps.
pub const MAX_PERIOD_SWEEPS: usize = 500;
/// Relative tolerance of the per-step Newton iteration.
pub const NEWTON_TOL: f64 = 1e-9;
/// Lower clamp of `|v|` inside the Newton derivative of `v ↦ |v|^{1/p-1} v`.
pub const DELTA_REG: f64 = 1e-10;
