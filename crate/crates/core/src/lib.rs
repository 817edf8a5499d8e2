//! Dual-branch hyperspectral / multispectral image fusion.
//!
//! The crate carries its own small reverse-mode autodiff ([`autograd`]) and
//! builds on it an invertible wavelet/coupling spectral branch, a
//! prior-guided low-rank-attention spatial branch, the composite training
//! loss, quality metrics, a Wald-style degradation pipeline and a trainer.

pub mod ablation;
pub mod audit;
pub mod autograd;
pub mod coupling;
pub mod data;
pub mod error;
pub mod fam_lora;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod prior;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use autograd::{Gradients, Tape, Var};
pub use error::{PifError, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{DType, Float, Tensor};
