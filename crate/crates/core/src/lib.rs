//! Modality-aware mutual learning for multi-modal volumetric segmentation.
//!
//! Each modality is embedded by its own encoder-decoder ([`backbone`]); a
//! modality-aware attention block ([`fusion`]) weights and sums those
//! embeddings; training minimises a per-modality ("intra") segmentation loss
//! plus a loss on the fused prediction ([`objective`]). Because every modality
//! keeps its own head, a trained model still segments when only one modality
//! is available ([`engine::predict_single`]).

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod backbone;
pub mod data;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod preprocess;
pub mod real;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
pub use volume::{Mask, ModalityId, MultiModalCase, ProbMap, Volume};
