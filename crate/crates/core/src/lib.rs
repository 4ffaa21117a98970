//! Learn the top-L ordered singular (or eigen) functions of a linear
//! operator by stochastic gradient descent on a nested low-rank
//! approximation objective, with parametric function models and exact
//! small-matrix oracles for verification.

pub mod error;
pub mod eval;
pub mod linalg;
pub mod models;
pub mod nestedlora;
pub mod operators;
pub mod problems;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, FunctionBatch, SvdResult};
