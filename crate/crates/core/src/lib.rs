//! Supervised distributional reduction: joint clustering and dimensionality
//! reduction through semi-relaxed fused Gromov-Wasserstein transport.

pub mod datasets;
pub mod driver;
pub mod embedding;
pub mod error;
pub mod gp;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod oos;
pub mod rng;
pub mod transport;

pub use error::{Error, ErrorKind, Result};
pub use linalg::{Matrix, Vector};
