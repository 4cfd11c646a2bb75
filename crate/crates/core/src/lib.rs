//! Cross-modal retrieval through deep canonically correlated embeddings.
//!
//! Two view-specific convolutional encoders are trained jointly to maximize
//! the total canonical correlation of their outputs; a CCA model fitted on the
//! trained features maps both views into a shared space where retrieval is a
//! cosine-distance ranking. The crate also ships the synthetic paired-view
//! data generators, a deterministic trainer, binary artifact formats, and the
//! retrieval evaluation metrics (R@k, median rank), all behind the `dcca` CLI.

pub mod cca;
pub mod cli;
pub mod datagen;
pub mod dcca;
pub mod encoders;
pub mod error;
pub mod io;
pub mod numerics;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use cca::{fit_cca, CcaModel};
pub use dcca::{dcca_loss, DccaLossResult};
pub use error::{Error, Result};
pub use numerics::Matrix;
pub use tensor::Tensor;
