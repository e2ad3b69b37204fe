//! Low-rank separated (CP-format) solver for linearly-solvable stochastic
//! optimal control on tensor-product grids.

extern crate blas_src;

pub mod als;
pub mod config;
pub mod expr;
pub mod grid_fd;
pub mod hjb;
pub mod io;
pub mod policy_sim;
pub mod sep_tensor;

pub use als::{als_reduce, als_solve, residual, AlsOptions, AlsReport, TerminationReason};
pub use grid_fd::{Grid, GridDim, StencilSpec};
pub use hjb::{
    solve_first_exit, step_finite_horizon, BoundarySpec, DesirabilityField, HjbProblem,
    SolveOptions,
};
pub use policy_sim::{simulate, PolicyField, Trajectory};
pub use sep_tensor::{SepOperator, SepVector};
