//! Code-mix query translation toolkit.
//!
//! A from-scratch transformer encoder-decoder trained with supervised plus
//! denoising objectives, two-stage pseudo-label training, sequence-level
//! distillation into a quantized student, CRF code-mix language detection,
//! hybrid transliteration, BLEU and cross-attention analysis.

pub mod augment;
pub mod distill;
pub mod error;
pub mod eval;
pub mod langid;
pub mod numerics;
pub mod seq2seq;
pub mod text;
pub mod train;
pub mod translit;

pub use error::{Error, Result};
