//! Adaptive robust risk-sensitive control of a linear-Gaussian system whose
//! noise covariance is learned online.

pub mod cli;
pub mod estimation;
pub mod evaluate;
pub mod model;
pub mod numerics;
pub mod solver;
pub mod surrogate;
