use std::collections::BTreeMap;

use super::{split_query, LabeledQuery, QueryLanguage};
use crate::error::{Error, Result};
use crate::numerics::{AdamW, Rng, Tape, Tensor};

const UNK: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub init_std: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs: 10,
            lr: 1e-2,
            batch_size: 32,
            init_std: 0.1,
        }
    }
}

/// Query classifier: mean of learned word embeddings, then a linear
/// softmax over the three query languages.
#[derive(Clone, Debug, PartialEq)]
pub struct AvgEmbeddingClassifier {
    words: BTreeMap<String, usize>,
    /// `[embeddings [V, d], weight [d, 3], bias [3]]`.
    params: Vec<Tensor<f32>>,
}

impl AvgEmbeddingClassifier {
    fn ids(&self, words: &[&str]) -> Vec<usize> {
        words
            .iter()
            .map(|w| self.words.get(&w.to_lowercase()).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.params[0].shape()[1]
    }

    /// Class scores; word order does not affect the result.
    pub fn scores(&self, query: &str) -> Result<[f64; 3]> {
        let mut ids = self.ids(&split_query(query)?);
        ids.sort_unstable();
        let d = self.dim();
        let emb = self.params[0].data();
        let mut mean = vec![0.0f64; d];
        for &i in &ids {
            for (m, &e) in mean.iter_mut().zip(&emb[i * d..(i + 1) * d]) {
                *m += e as f64;
            }
        }
        for m in &mut mean {
            *m /= ids.len() as f64;
        }
        let (w, b) = (self.params[1].data(), self.params[2].data());
        Ok(std::array::from_fn(|c| {
            b[c] as f64 + mean.iter().enumerate().map(|(j, m)| m * w[j * 3 + c] as f64).sum::<f64>()
        }))
    }

    /// Highest-scoring language; ties go to the earlier class.
    pub fn classify(&self, query: &str) -> Result<QueryLanguage> {
        let s = self.scores(query)?;
        let mut best = 0;
        for c in 1..3 {
            if s[c] > s[best] {
                best = c;
            }
        }
        Ok(QueryLanguage::ALL[best])
    }
}

pub fn train_baseline(corpus: &[LabeledQuery], cfg: &BaselineConfig, rng: &mut Rng) -> Result<AvgEmbeddingClassifier> {
    if corpus.is_empty() {
        return Err(Error::Empty("baseline training corpus".into()));
    }
    if cfg.dim == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("{cfg:?}")));
    }
    let mut words = BTreeMap::new();
    for q in corpus {
        for t in &q.tokens {
            words.insert(t.word.to_lowercase(), 0);
        }
    }
    for (i, v) in words.values_mut().enumerate() {
        *v = i + 1;
    }
    let d = cfg.dim;
    let mut normal = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.normal(0.0, cfg.init_std) as f32).collect() };
    let params = vec![
        Tensor::new(vec![words.len() + 1, d], normal((words.len() + 1) * d))?,
        Tensor::new(vec![d, 3], normal(d * 3))?,
        Tensor::zeros(&[3]),
    ];
    let mut model = AvgEmbeddingClassifier { words, params };
    let data: Vec<(Vec<usize>, usize)> = corpus
        .iter()
        .map(|q| Ok((model.ids(&q.words()), q.query_language()?.index())))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(cfg.lr, 0.0);
    for _ in 0..cfg.epochs {
        let order = rng.permutation(data.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars: Vec<_> = model.params.iter().map(|p| tape.param(p)).collect();
            let mut rows = Vec::new();
            let mut offsets = vec![0];
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                rows.extend_from_slice(&data[i].0);
                offsets.push(rows.len());
                targets.push(data[i].1);
            }
            let x = tape.gather(vars[0], &rows);
            let mean = tape.segment_mean(x, &offsets);
            let h = tape.matmul(mean, vars[1], false);
            let logits = tape.add_bias(h, vars[2]);
            let loss = tape.smoothed_ce(logits, &targets, 0.0, usize::MAX)?;
            let mut g = tape.backward(loss)?;
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .zip(&model.params)
                .map(|(&v, p)| g.take(v).unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect();
            opt.step(&mut model.params, &grads)?;
        }
    }
    Ok(model)
}
