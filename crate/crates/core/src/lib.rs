//! Transferable adversarial perturbations centralized in dominant frequency
//! regions.
//!
//! Perturbations produced by gradient attacks are decomposed into YCbCr DCT
//! coefficient blocks, masked by per-channel binary 8×8 quantization
//! matrices, and reconstructed. The masks are derived by percentile rounding
//! of real-valued logits that are themselves updated by Adam ascent on the
//! source model's loss every attack iteration.
//!
//! Module map:
//! - [`frequency`]: color transform, DCT, blockify, masking and the adjoint
//!   of the whole linear pipeline.
//! - [`quantization`]: logits, percentile rounding, straight-through
//!   gradients and the per-iteration Adam update.
//! - [`models`]: small classifiers with hand-written gradients, the
//!   synthetic dataset, training and weight files.
//! - [`attack`]: BIM/MI/DI/TI/SI-NI/VMI and the centralized loop.
//! - [`defense`]: JPEG quantization and bit-depth reduction.
//! - [`eval`]: fooling rates, ablation masks, experiments, sweeps, reports.

pub mod attack;
pub mod defense;
pub mod error;
pub mod eval;
pub mod frequency;
pub mod models;
pub mod quantization;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ColorSpace, ImageTensor, Real};
