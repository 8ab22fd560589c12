//! Numerical building blocks: dense QP, Riccati recursion, scalar least squares.

mod dare;
mod nls;
mod qp;

pub use dare::{riccati_residual, solve_dare, solve_dare_2x2, DareSolution};
pub use nls::{fit_scalar_nls, NlsFit, DEFAULT_GRID_POINTS};
pub use qp::{solve_qp, KktResiduals, QpProblem, QpSettings, QpSolution, QpSolver, QpStatus};
