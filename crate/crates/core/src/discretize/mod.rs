//! Grids, finite-difference diffusion operators and SPD solvers.

mod grid;
mod operator;
mod solve;

pub use grid::{build_grid, Grid, ScalarField, MIN_NODES_PER_AXIS};
pub use operator::{assemble_diffusion, Conductivity, CsrMatrix, DiffusionOperator};
pub use solve::{solve_dense, solve_spd, BandCholesky, CgOutcome, LinearOperator, ShiftedOperator, DENSE_LIMIT};
