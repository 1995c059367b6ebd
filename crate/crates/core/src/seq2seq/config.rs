use crate::error::{Error, Result};
use crate::text::Vocab;

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Positions available to each of the encoder and decoder.
    pub max_len: usize,
    pub dropout: f64,
    pub init_std: f64,
    pub vocab: Vocab,
}

impl Seq2SeqConfig {
    pub fn new(vocab: Vocab) -> Self {
        Self {
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_len: 34,
            dropout: 0.1,
            init_std: 0.02,
            vocab,
        }
    }

    pub fn with_layers(mut self, enc: usize, dec: usize) -> Self {
        self.n_enc_layers = enc;
        self.n_dec_layers = dec;
        self
    }

    pub fn with_width(mut self, d_model: usize, n_heads: usize, d_ff: usize) -> Self {
        self.d_model = d_model;
        self.n_heads = n_heads;
        self.d_ff = d_ff;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_len < 3 {
            return Err(Error::InvalidArgument("d_ff > 0 and max_len >= 3 required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {}", self.dropout)));
        }
        if self.init_std <= 0.0 || !self.init_std.is_finite() {
            return Err(Error::InvalidArgument(format!("init_std {}", self.init_std)));
        }
        Ok(())
    }

    /// Scalar settings as `key=value` pairs (the vocabulary is stored
    /// separately).
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("n_enc_layers".into(), self.n_enc_layers.to_string()),
            ("n_dec_layers".into(), self.n_dec_layers.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("init_std".into(), self.init_std.to_string()),
        ]
    }

    /// Overrides fields from `key=value` pairs; unknown keys are errors.
    pub fn apply_pair(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::InvalidArgument(format!("model.{key} = {value:?}"));
        let us = || value.parse::<usize>().map_err(|_| bad());
        let fl = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "n_enc_layers" => self.n_enc_layers = us()?,
            "n_dec_layers" => self.n_dec_layers = us()?,
            "d_model" => self.d_model = us()?,
            "n_heads" => self.n_heads = us()?,
            "d_ff" => self.d_ff = us()?,
            "max_len" => self.max_len = us()?,
            "dropout" => self.dropout = fl()?,
            "init_std" => self.init_std = fl()?,
            _ => return Err(Error::InvalidArgument(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }
}
