//! BLEU and cross-attention analysis.

mod bleu;
mod xattn;

pub use bleu::{bleu_corpus, BleuReport, MAX_ORDER};
pub use xattn::{
    ae_pairs, ae_xattn_experiment, identity_distance, min_head_distance, xattn_identity_error,
    xattn_identity_errors, XAttnErrorCurve,
};
