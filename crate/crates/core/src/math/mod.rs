//! Numerical primitives: univariate normal functions, adaptive quadrature
//! and low-dimensional multivariate-normal rectangle probabilities.

pub mod mvn;
pub mod normal;
pub mod quad;
