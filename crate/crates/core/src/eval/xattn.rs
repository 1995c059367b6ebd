use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::seq2seq::{Seq2SeqConfig, Seq2SeqModel, SeqPair};
use crate::text::Corpus;
use crate::train::{train_stage1_with, TrainingConfig};

/// `‖C − I‖_F` for a square matrix.
pub fn identity_distance(c: &Tensor<f32>) -> Result<f64> {
    let s = c.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape(format!(
            "cross-attention matrix {s:?} is not square"
        )));
    }
    let n = s[0];
    let mut acc = 0.0f64;
    for r in 0..n {
        for k in 0..n {
            let target = if r == k { 1.0 } else { 0.0 };
            let d = c.data()[r * n + k] as f64 - target;
            acc += d * d;
        }
    }
    Ok(acc.sqrt())
}

/// Minimum over heads of the distance to identity.
pub fn min_head_distance(heads: &[Tensor<f32>]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for h in heads {
        best = best.min(identity_distance(h)?);
    }
    if heads.is_empty() {
        return Err(Error::Empty("attention heads".into()));
    }
    Ok(best)
}

/// Mean over examples of the per-example min-over-heads identity distance
/// of decoder `layer`'s cross-attention.
pub fn xattn_identity_error(model: &Seq2SeqModel<f32>, batch: &[SeqPair], layer: usize) -> Result<f64> {
    Ok(xattn_identity_errors(model, batch)?[layer])
}

/// [`xattn_identity_error`] for every decoder layer at once.
pub fn xattn_identity_errors(model: &Seq2SeqModel<f32>, batch: &[SeqPair]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Empty("cross-attention batch".into()));
    }
    let layers = model.config().n_dec_layers;
    let mut sums = vec![0.0; layers];
    for chunk in batch.chunks(64) {
        let refs: Vec<&SeqPair> = chunk.iter().collect();
        let (_, cap) = model.forward_batch(&refs, true)?;
        let cap = cap.expect("capture requested");
        for (l, sum) in sums.iter_mut().enumerate() {
            for e in 0..chunk.len() {
                *sum += min_head_distance(&cap.layers[l][e])?;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s / batch.len() as f64).collect())
}

/// Identity error per decoder layer, measured before training (epoch 0)
/// and after each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct XAttnErrorCurve {
    /// `errors[layer][epoch]`
    pub errors: Vec<Vec<f64>>,
}

impl XAttnErrorCurve {
    pub fn n_layers(&self) -> usize {
        self.errors.len()
    }

    pub fn n_epochs(&self) -> usize {
        self.errors.first().map_or(0, |e| e.len().saturating_sub(1))
    }

    pub fn at(&self, layer: usize, epoch: usize) -> f64 {
        self.errors[layer][epoch]
    }

    /// Element-wise mean of several curves of equal shape.
    pub fn mean(curves: &[XAttnErrorCurve]) -> Result<Self> {
        let first = curves.first().ok_or_else(|| Error::Empty("curves".into()))?;
        let mut errors = first.errors.clone();
        for c in &curves[1..] {
            if c.errors.len() != errors.len() {
                return Err(Error::Shape("curves differ in layer count".into()));
            }
            for (acc, row) in errors.iter_mut().zip(&c.errors) {
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
            }
        }
        let n = curves.len() as f64;
        for row in &mut errors {
            for a in row {
                *a /= n;
            }
        }
        Ok(Self { errors })
    }

    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for (l, row) in self.errors.iter().enumerate() {
            for (e, v) in row.iter().enumerate() {
                s.push_str(&format!("layer={} epoch={e} error={v:.6}\n", l + 1));
            }
        }
        s
    }
}

/// AE validation pairs: each target sentence as both input and output.
pub fn ae_pairs(corpus: &Corpus, model: &Seq2SeqModel<f32>) -> Vec<SeqPair> {
    corpus
        .iter()
        .map(|e| SeqPair::from_text(model.vocab(), &e.target, &e.target))
        .collect()
}

/// Trains with AE as the only augmentation for `train_cfg.stage1.epochs`
/// epochs and tracks the cross-attention identity error on `val`.
pub fn ae_xattn_experiment(
    model_cfg: &Seq2SeqConfig,
    train_cfg: &TrainingConfig,
    train: &Corpus,
    val: &Corpus,
    seed: u64,
) -> Result<XAttnErrorCurve> {
    let mut cfg = train_cfg.clone();
    cfg.stage1.kinds = vec![crate::augment::AugKind::AutoEncoder];
    let root = Rng::new(seed);
    let mut model = Seq2SeqModel::init(model_cfg.clone(), &mut root.fork(0))?;
    let pairs = ae_pairs(val, &model);
    let mut errors: Vec<Vec<f64>> = xattn_identity_errors(&model, &pairs)?
        .into_iter()
        .map(|e| vec![e])
        .collect();
    train_stage1_with(&mut model, train, &cfg, &mut root.fork(1), &mut |m, _| {
        for (row, e) in errors.iter_mut().zip(xattn_identity_errors(m, &pairs)?) {
            row.push(e);
        }
        Ok(())
    })?;
    Ok(XAttnErrorCurve { errors })
}
