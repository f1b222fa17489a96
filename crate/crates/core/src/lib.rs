//! Distributionally robust geometric programs with joint chance constraints, solved by
//! neurodynamic flows.

pub mod bench;
pub mod car;
pub mod duplex;
pub mod error;
pub mod gp;
pub mod io;
pub mod matrix;
pub mod neuro;
pub mod ode;
pub mod reformulate;
pub mod report;
pub mod robustness;

pub use error::{DrgpError, Result};
