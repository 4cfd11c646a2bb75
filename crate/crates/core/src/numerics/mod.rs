//! Dense linear-algebra kernels: matrix arithmetic, symmetric
//! eigendecomposition, SVD, and the SPD inverse square root that whitening
//! is built on.

mod decomp;
mod matrix;

pub use decomp::{inv_sqrt_spd, svd, sym_eig, EigDecomposition};
pub use matrix::Matrix;
