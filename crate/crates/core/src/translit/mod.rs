//! Hybrid transliteration: dictionary lookup with a character-level
//! seq2seq fallback decoded greedily.


use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{AdamW, Rng};
use crate::seq2seq::{greedy_decode, Seq2SeqConfig, Seq2SeqModel, SeqPair};
use crate::text::{TokenMode, Vocab, EOS, N_SPECIAL};
use crate::train::{run_epoch, StepLoss};

/// Word → transliteration map with lowercase keys.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TranslitDict {
    map: BTreeMap<String, String>,
}

impl TranslitDict {
    /// Rejects empty entries and keys that collide after lowercasing.
    pub fn from_pairs<I, K, V>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            let key = k.as_ref().trim().to_lowercase();
            let val: String = v.into();
            if key.is_empty() || val.trim().is_empty() {
                return Err(Error::InvalidArgument("empty dictionary key or value".into()));
            }
            if map.insert(key.clone(), val.trim().to_string()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate dictionary key `{key}`")));
            }
        }
        Ok(Self { map })
    }

    /// Parses `word<TAB>transliteration` lines; blank lines are skipped.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, i + 1, "expected word<TAB>transliteration"))?;
            let key = k.trim().to_lowercase();
            if key.is_empty() || v.trim().is_empty() {
                return Err(Error::parse(path, i + 1, "empty key or value"));
            }
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::parse(path, i + 1, format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn get(&self, word: &str) -> Option<&str> {
        self.map.get(&word.to_lowercase()).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Character-level encoder-decoder: 2+2 layers, 4 heads, width 128.
#[derive(Clone, Debug)]
pub struct CharSeq2Seq {
    pub model: Seq2SeqModel<f32>,
}

pub fn translit_model_config(vocab: Vocab, max_len: usize) -> Seq2SeqConfig {
    let mut c = Seq2SeqConfig::new(vocab).with_layers(2, 2).with_width(128, 4, 512);
    c.max_len = max_len;
    c
}

impl CharSeq2Seq {
    pub fn new(model: Seq2SeqModel<f32>) -> Result<Self> {
        if model.vocab().mode() != TokenMode::Char {
            return Err(Error::InvalidArgument("transliteration model needs a char vocabulary".into()));
        }
        Ok(Self { model })
    }

    /// Greedy transliteration of one word; special tokens are dropped.
    pub fn transliterate_word(&self, word: &str) -> Result<String> {
        let mut src = self.model.vocab().encode(&word.to_lowercase());
        src.push(EOS);
        let max = self.model.config().max_len;
        if src.len() > max {
            return Err(Error::SequenceTooLong { len: src.len(), max });
        }
        let ids = greedy_decode(&self.model, &src, max)?;
        let kept: Vec<usize> = ids.into_iter().filter(|&i| i >= N_SPECIAL).collect();
        Ok(self.model.vocab().decode(&kept))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transliteration {
    pub text: String,
    /// Words that went through the model.
    pub model_calls: usize,
}

/// Dictionary hit → its mapping; otherwise the model's greedy output.
/// Words are joined by single spaces.
pub fn hybrid_transliterate(
    text: &str,
    dict: &TranslitDict,
    model: Option<&CharSeq2Seq>,
) -> Result<Transliteration> {
    let mut out = Vec::new();
    let mut model_calls = 0;
    for w in text.split_whitespace() {
        if let Some(t) = dict.get(w) {
            out.push(t.to_string());
            continue;
        }
        let m = model.ok_or_else(|| {
            Error::InvalidArgument(format!("`{w}` is not in the dictionary and no model was given"))
        })?;
        model_calls += 1;
        out.push(m.transliterate_word(w)?);
    }
    Ok(Transliteration {
        text: out.join(" "),
        model_calls,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslitTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for TranslitTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 5e-4,
            batch_size: 16,
            label_smoothing: 0.1,
            weight_decay: 0.01,
            dropout: 0.1,
            max_len: 34,
        }
    }
}

/// Trains a fresh char model on `(word, transliteration)` pairs with the
/// shared epoch loop; supervised loss only.
pub fn train_translit(pairs: &[(String, String)], cfg: &TranslitTrainConfig, rng: &mut Rng) -> Result<CharSeq2Seq> {
    if pairs.is_empty() {
        return Err(Error::Empty("transliteration pairs".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("{cfg:?}")));
    }
    let lowered: Vec<(String, String)> = pairs.iter().map(|(s, t)| (s.to_lowercase(), t.clone())).collect();
    let vocab = Vocab::build(
        lowered.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]),
        TokenMode::Char,
        1,
    )?;
    let mut mcfg = translit_model_config(vocab.clone(), cfg.max_len);
    mcfg.dropout = cfg.dropout;
    let mut model = Seq2SeqModel::init(mcfg, &mut rng.fork(0))?;
    let data: Vec<SeqPair> = lowered
        .iter()
        .map(|(s, t)| {
            let p = SeqPair::from_text(&vocab, s, t);
            let len = p.src.len().max(p.tgt.len());
            if len > cfg.max_len {
                Err(Error::SequenceTooLong { len, max: cfg.max_len })
            } else {
                Ok(p)
            }
        })
        .collect::<Result<_>>()?;
    let mut order = rng.fork(1);
    let mut dropout = rng.fork(2);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    for epoch in 1..=cfg.epochs {
        run_epoch(&mut model, &mut opt, data.len(), cfg.batch_size, &mut order, epoch, |m, tape, vars, idx| {
            let batch: Vec<&SeqPair> = idx.iter().map(|&i| &data[i]).collect();
            let l = m.batch_loss(tape, vars, &batch, cfg.label_smoothing, Some(&mut dropout))?;
            Ok(StepLoss {
                total: l,
                supervised: l,
                aug: None,
                kd: None,
            })
        })?;
    }
    CharSeq2Seq::new(model)
}
