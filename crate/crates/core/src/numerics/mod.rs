//! Dense linear algebra, symmetric eigendecomposition and seeded random streams.

mod eigen;
mod matrix;
mod rng;
mod stats;

pub use eigen::{sym_eig, EigenResult};
pub use matrix::{dot, norm2, DenseMatrix};
pub use rng::{derive_rng_stream, RngStream};
pub use stats::{column_standardize, correlation_matrix, mean, quantile, sample_variance};
