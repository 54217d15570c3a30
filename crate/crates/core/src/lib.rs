//! Krotov successive-improvement solver for the continuous-time bilinear
//! quadratic regulator with constrained controls.

pub mod config;
pub mod error;
pub mod integrate;
pub mod krotov;
pub mod minimizer;
pub mod model;
pub mod run;
pub mod savs_bench;

pub use error::{Error, Result};
pub use integrate::{ValueCoefficients, Feedback};
pub use krotov::{solve, SolveOptions, SolveReport, Termination};
pub use model::{AdmissibleSet, BilinearDynamics, BilinearProblem, CoefficientProvider, Process, QuadraticCost, TimeGrid, Trajectory};
