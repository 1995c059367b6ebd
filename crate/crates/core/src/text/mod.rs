//! Vocabulary, tokenization, parallel corpus IO and the synthetic
//! code-mix benchmark.

mod corpus;
mod synth;
mod vocab;

pub use corpus::{load_parallel_tsv, write_parallel_tsv, Corpus, ParallelExample, Provenance};
pub use synth::{
    drop_interior_char, gen_synthetic_corpus, interior_drop_variants, Lexicon, SampleParams,
    SynthCorpus, SynthTask, SynthTaskSpec, STREAM_CLEAN, STREAM_LEXICON, STREAM_TEST,
    STREAM_TRAIN,
};
pub use vocab::{tokenize, TokenMode, Vocab, BOS, EOS, MASK, N_SPECIAL, PAD, SPECIAL_TOKENS, UNK};
