pub mod cli;
pub mod config;
pub mod conformal;
pub mod controller;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod model;
pub mod propagation;
pub mod qp;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::linalg::mat;
    use crate::model::LtiSystem;

    /// Linearized pendulum used throughout the tests.
    pub fn pendulum() -> LtiSystem {
        LtiSystem::new(
            mat(&[&[1.0, 0.1], &[0.75, 0.95]]),
            mat(&[&[0.0], &[0.1]]),
            mat(&[&[1.0, 0.0]]),
            mat(&[&[0.0]]),
            mat(&[&[-10.0, -4.0]]),
            mat(&[&[0.7], &[1.2]]),
        )
        .unwrap()
    }
}
