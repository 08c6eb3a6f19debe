//! Finite-difference solver for normalized degenerate Bellman equations
//! and optimal stopping problems, with a Monte Carlo oracle and a
//! verification harness.

pub mod expr;
pub mod grid;
pub mod mc;
pub mod problem;
pub mod registry;
pub mod solver;
pub mod verify;

pub use grid::{LatticeGrid, SolutionField};
pub use problem::{ControlledProblem, ProblemDoc};
pub use solver::{Mode, SolverConfig};
