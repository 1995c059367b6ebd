//! Transformer encoder-decoder, decoding and checkpoints.

mod checkpoint;
mod config;
mod decode;
mod model;


pub use checkpoint::{
    load_checkpoint, load_weights, model_from_container, model_to_container, save_checkpoint,
    Container, StoredTensor, TensorData,
};
pub(crate) use checkpoint::{config_from_meta, config_meta};
pub use config::Seq2SeqConfig;
pub use decode::{
    beam_search, beam_with, greedy_decode, greedy_with, translate_all, translate_text, Hypothesis,
    StepScorer, Translator, DEFAULT_BEAM, DEFAULT_MAX_LEN,
};
pub(crate) use decode::NetScorer;
pub use model::{label_smoothed_ce, AttentionCapture, SeqPair, Seq2SeqModel};
pub(crate) use model::{Bindings, Bound, Layout};
