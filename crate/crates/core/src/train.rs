//! Two-stage training: noisy pseudo-labelled pre-training with
//! augmentation, then early-stopped fine-tuning on clean data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::augment::{combined_loss_var, sample_augmented_batch, AugKind, LossWeights};
use crate::error::{Error, Result};
use crate::numerics::{AdamW, Rng, Tape, Tensor, Var};
use crate::seq2seq::{Seq2SeqConfig, Seq2SeqModel, SeqPair};
use crate::text::{Corpus, Provenance, Vocab};

/// Learning rates used for fine-tuning large pretrained checkpoints; kept
/// for reference and selectable through the config file.
pub const PRETRAINED_STAGE1_LR: f64 = 5e-6;
pub const PRETRAINED_STAGE2_LR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub kinds: Vec<AugKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub lr: f64,
    pub batch_size: usize,
    pub kinds: Vec<AugKind>,
    pub patience: usize,
    pub val_fraction: f64,
    pub max_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub lambda: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Config {
                epochs: 5,
                lr: 3e-4,
                batch_size: 64,
                kinds: vec![AugKind::DropChar, AugKind::AutoEncoder, AugKind::Mask],
            },
            stage2: Stage2Config {
                lr: 3e-4,
                batch_size: 64,
                kinds: vec![AugKind::DropChar, AugKind::AutoEncoder],
                patience: 3,
                val_fraction: 0.1,
                max_epochs: 50,
            },
            lambda: 0.5,
            label_smoothing: 0.1,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("config line {}: expected key=value", i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let s2 = &self.stage2;
        if !(s2.val_fraction > 0.0 && s2.val_fraction < 1.0) {
            return bad(format!("stage2.val_fraction {}", s2.val_fraction));
        }
        if s2.patience == 0 {
            return bad("stage2.patience must be at least 1".into());
        }
        if self.stage1.batch_size == 0 || s2.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        for lr in [self.stage1.lr, s2.lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("learning rate {lr}"));
            }
        }
        LossWeights::new(self.lambda)?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {}", self.label_smoothing));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        [
            ("seed", self.seed.to_string()),
            ("lambda", self.lambda.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("stage1.epochs", s1.epochs.to_string()),
            ("stage1.lr", s1.lr.to_string()),
            ("stage1.batch_size", s1.batch_size.to_string()),
            ("stage1.kinds", AugKind::list_to_string(&s1.kinds)),
            ("stage2.lr", s2.lr.to_string()),
            ("stage2.batch_size", s2.batch_size.to_string()),
            ("stage2.kinds", AugKind::list_to_string(&s2.kinds)),
            ("stage2.patience", s2.patience.to_string()),
            ("stage2.val_fraction", s2.val_fraction.to_string()),
            ("stage2.max_epochs", s2.max_epochs.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn apply_pair(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::InvalidArgument(format!("{key} = {value:?}"));
        let us = || value.parse::<usize>().map_err(|_| bad());
        let fl = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "lambda" => self.lambda = fl()?,
            "label_smoothing" => self.label_smoothing = fl()?,
            "weight_decay" => self.weight_decay = fl()?,
            "stage1.epochs" => self.stage1.epochs = us()?,
            "stage1.lr" => self.stage1.lr = fl()?,
            "stage1.batch_size" => self.stage1.batch_size = us()?,
            "stage1.kinds" => self.stage1.kinds = AugKind::parse_list(value)?,
            "stage2.lr" => self.stage2.lr = fl()?,
            "stage2.batch_size" => self.stage2.batch_size = us()?,
            "stage2.kinds" => self.stage2.kinds = AugKind::parse_list(value)?,
            "stage2.patience" => self.stage2.patience = us()?,
            "stage2.val_fraction" => self.stage2.val_fraction = fl()?,
            "stage2.max_epochs" => self.stage2.max_epochs = us()?,
            _ => return Err(Error::InvalidArgument(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse_kv(text)? {
            c.apply_pair(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    /// 0 is the pre-training evaluation in stage 2.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub supervised_loss: Option<f64>,
    pub aug_loss: BTreeMap<AugKind, f64>,
    pub kd_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!("stage={} epoch={}", self.stage, self.epoch);
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.6}"));
        let _ = write!(
            s,
            " train_loss={} supervised_loss={} val_loss={}",
            opt(self.train_loss),
            opt(self.supervised_loss),
            opt(self.val_loss)
        );
        for (k, v) in &self.aug_loss {
            let _ = write!(s, " aug.{}={v:.6}", k.as_str());
        }
        if let Some(v) = self.kd_loss {
            let _ = write!(s, " kd_loss={v:.6}");
        }
        let _ = write!(s, " time_s={:.3}", self.seconds);
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub lr: f64,
    pub reference_lr: f64,
    /// Stage 2 only: epoch whose weights were returned.
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn to_lines(&self) -> String {
        let mut s = format!("lr={} reference_lr={}", self.lr, self.reference_lr);
        if let Some(b) = self.best_epoch {
            let _ = write!(s, " best_epoch={b}");
        }
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&e.to_line());
            s.push('\n');
        }
        s
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.val_loss).collect()
    }

    pub fn last_train_loss(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.train_loss)
    }
}

/// Encodes a corpus for the model, rejecting sequences the positional
/// tables cannot hold.
pub fn encode_corpus(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> Result<Vec<SeqPair>> {
    corpus
        .iter()
        .map(|e| {
            let p = SeqPair::from_text(vocab, &e.source, &e.target);
            let len = p.src.len().max(p.tgt.len());
            if len > max_len {
                Err(Error::SequenceTooLong { len, max: max_len })
            } else {
                Ok(p)
            }
        })
        .collect()
}

/// Word vocabulary for translation over every given corpus, closed under
/// DropChar so augmented inputs never fall back to UNK.
pub fn translation_vocab(corpora: &[&Corpus]) -> Result<Vocab> {
    crate::augment::dropchar_closure_vocab(corpora.iter().flat_map(|c| c.texts()), 1)
}

/// Per-step losses reported back to the epoch loop.
pub struct StepLoss {
    pub total: Var,
    pub supervised: Var,
    pub aug: Option<(AugKind, Var)>,
    pub kd: Option<Var>,
}

/// Per-epoch means of the logged loss terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMeans {
    pub total: f64,
    pub supervised: f64,
    pub aug: BTreeMap<AugKind, f64>,
    pub kd: Option<f64>,
}

#[derive(Default)]
struct EpochStats {
    total: f64,
    supervised: f64,
    aug: BTreeMap<AugKind, (f64, usize)>,
    kd: (f64, usize),
    steps: usize,
}

/// One pass over `n` examples in a shuffled order, one optimizer step per
/// batch. A non-finite loss or gradient aborts before the update, leaving
/// the last good weights in place.
pub fn run_epoch<F>(
    model: &mut Seq2SeqModel<f32>,
    opt: &mut AdamW<f32>,
    n: usize,
    batch_size: usize,
    order_rng: &mut Rng,
    epoch: usize,
    mut step: F,
) -> Result<EpochMeans>
where
    F: FnMut(&Seq2SeqModel<f32>, &mut Tape<f32>, &[Var], &[usize]) -> Result<StepLoss>,
{
    let order = order_rng.permutation(n);
    let mut stats = EpochStats::default();
    for (si, idx) in order.chunks(batch_size).enumerate() {
        let mut tape = Tape::new();
        let vars = model.bind_params(&mut tape);
        let diverged = || Error::Diverged {
            epoch,
            step: si,
        };
        let loss = step(model, &mut tape, &vars, idx).map_err(|e| match e {
            Error::NonFinite(_) => diverged(),
            other => other,
        })?;
        let total = tape.scalar(loss.total) as f64;
        if !total.is_finite() {
            return Err(diverged());
        }
        let mut grads = tape.backward(loss.total).map_err(|_| diverged())?;
        let g: Vec<Vec<f32>> = vars
            .iter()
            .zip(model.params())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        opt.step(model.params_mut(), &g)?;
        stats.total += total;
        stats.supervised += tape.scalar(loss.supervised) as f64;
        if let Some((k, v)) = loss.aug {
            let e = stats.aug.entry(k).or_insert((0.0, 0));
            e.0 += tape.scalar(v) as f64;
            e.1 += 1;
        }
        if let Some(v) = loss.kd {
            stats.kd.0 += tape.scalar(v) as f64;
            stats.kd.1 += 1;
        }
        stats.steps += 1;
    }
    let s = stats.steps.max(1) as f64;
    Ok(EpochMeans {
        total: stats.total / s,
        supervised: stats.supervised / s,
        aug: stats.aug.into_iter().map(|(k, (v, c))| (k, v / c as f64)).collect(),
        kd: (stats.kd.1 > 0).then(|| stats.kd.0 / stats.kd.1 as f64),
    })
}

/// Independent streams for one training stage.
pub(crate) struct Streams {
    pub(crate) order: Rng,
    pub(crate) sup_dropout: Rng,
    pub(crate) aug_sample: Rng,
    pub(crate) aug_dropout: Rng,
    pub(crate) split: Rng,
}

impl Streams {
    pub(crate) fn new(rng: &mut Rng) -> Self {
        let base = Rng::new(rng.next_u64());
        Self {
            order: base.fork(1),
            sup_dropout: base.fork(2),
            aug_sample: base.fork(3),
            aug_dropout: base.fork(4),
            split: base.fork(5),
        }
    }
}

/// Supervised loss on `batch` and, when `kinds` is non-empty, the loss on
/// one augmented batch of the same size drawn from `aug_corpus`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sup_aug_losses(
    m: &Seq2SeqModel<f32>,
    tape: &mut Tape<f32>,
    vars: &[Var],
    batch: &[&SeqPair],
    aug_corpus: &Corpus,
    kinds: &[AugKind],
    ls: f64,
    st: &mut Streams,
) -> Result<(Var, Option<(AugKind, Var)>)> {
    let sup = m.batch_loss(tape, vars, batch, ls, Some(&mut st.sup_dropout))?;
    if kinds.is_empty() {
        return Ok((sup, None));
    }
    let max_len = m.config().max_len;
    let ab = sample_augmented_batch(aug_corpus, kinds, batch.len(), m.vocab(), &mut st.aug_sample)?;
    let mut ap = ab.pairs();
    for p in &mut ap {
        p.src.truncate(max_len);
        p.tgt.truncate(max_len);
    }
    let aref: Vec<&SeqPair> = ap.iter().collect();
    let aug = m.batch_loss(tape, vars, &aref, ls, Some(&mut st.aug_dropout))?;
    Ok((sup, Some((ab.kind, aug))))
}

#[allow(clippy::too_many_arguments)]
fn augmented_epoch(
    model: &mut Seq2SeqModel<f32>,
    opt: &mut AdamW<f32>,
    pairs: &[SeqPair],
    aug_corpus: &Corpus,
    kinds: &[AugKind],
    batch_size: usize,
    cfg: &TrainingConfig,
    st: &mut Streams,
    epoch: usize,
) -> Result<EpochMeans> {
    let weights = LossWeights::new(cfg.lambda)?;
    let ls = cfg.label_smoothing;
    let mut order = st.order.clone();
    let means = run_epoch(model, opt, pairs.len(), batch_size, &mut order, epoch, |m, tape, vars, idx| {
        let batch: Vec<&SeqPair> = idx.iter().map(|&i| &pairs[i]).collect();
        let (sup, aug) = sup_aug_losses(m, tape, vars, &batch, aug_corpus, kinds, ls, st)?;
        Ok(StepLoss {
            total: match aug {
                Some((_, a)) => combined_loss_var(tape, sup, a, weights),
                None => sup,
            },
            supervised: sup,
            aug,
            kd: None,
        })
    });
    st.order = order;
    means
}

pub(crate) fn require_provenance(corpus: &Corpus, want: Provenance) -> Result<()> {
    if let Some(e) = corpus.iter().find(|e| e.provenance != want) {
        return Err(Error::InvalidArgument(format!(
            "expected {want:?} examples, found {:?}",
            e.provenance
        )));
    }
    Ok(())
}

/// Fixed-length stage on noisy pseudo-labels; one augmented batch per
/// supervised batch, mixed by λ.
pub fn train_stage1(
    model: &mut Seq2SeqModel<f32>,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    train_stage1_with(model, corpus, cfg, rng, &mut |_, _| Ok(()))
}

/// [`train_stage1`] with a hook run after every epoch.
pub fn train_stage1_with(
    model: &mut Seq2SeqModel<f32>,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    rng: &mut Rng,
    on_epoch: &mut dyn FnMut(&Seq2SeqModel<f32>, usize) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    require_provenance(corpus, Provenance::NoisyPseudo)?;
    if corpus.is_empty() {
        return Err(Error::Empty("stage-1 corpus".into()));
    }
    let pairs = encode_corpus(corpus, model.vocab(), model.config().max_len)?;
    let mut st = Streams::new(rng);
    let mut opt = AdamW::new(cfg.stage1.lr, cfg.weight_decay);
    let mut report = TrainReport {
        lr: cfg.stage1.lr,
        reference_lr: PRETRAINED_STAGE1_LR,
        ..Default::default()
    };
    for epoch in 1..=cfg.stage1.epochs {
        let t0 = Instant::now();
        let means = augmented_epoch(
            model,
            &mut opt,
            &pairs,
            corpus,
            &cfg.stage1.kinds,
            cfg.stage1.batch_size,
            cfg,
            &mut st,
            epoch,
        )?;
        report.epochs.push(EpochRecord {
            stage: 1,
            epoch,
            train_loss: Some(means.total),
            supervised_loss: Some(means.supervised),
            aug_loss: means.aug,
            kd_loss: means.kd,
            val_loss: None,
            seconds: t0.elapsed().as_secs_f64(),
        });
        on_epoch(model, epoch)?;
    }
    Ok(report)
}

/// Token-weighted mean label-smoothed loss without dropout.
pub fn validation_loss(model: &Seq2SeqModel<f32>, pairs: &[SeqPair], label_smoothing: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in pairs.chunks(64) {
        let refs: Vec<&SeqPair> = chunk.iter().collect();
        let n: usize = chunk.iter().map(|p| p.tgt.len()).sum();
        total += model.eval_loss(&refs, label_smoothing)? * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Empty("validation set".into()));
    }
    Ok(total / tokens as f64)
}

/// Fine-tunes on clean data with a fresh optimizer, evaluating a held-out
/// split before training and after every epoch. Stops after `patience`
/// epochs without improvement and restores the best weights.
pub fn train_stage2(
    model: &mut Seq2SeqModel<f32>,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    cfg.validate()?;
    require_provenance(corpus, Provenance::CleanManual)?;
    if corpus.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "stage 2 needs at least 10 examples, got {}",
            corpus.len()
        )));
    }
    let mut st = Streams::new(rng);
    let (train, val) = corpus.split(cfg.stage2.val_fraction, &mut st.split);
    let max_len = model.config().max_len;
    let train_pairs = encode_corpus(&train, model.vocab(), max_len)?;
    let val_pairs = encode_corpus(&val, model.vocab(), max_len)?;
    let ls = cfg.label_smoothing;
    let mut opt = AdamW::new(cfg.stage2.lr, cfg.weight_decay);
    let mut report = TrainReport {
        lr: cfg.stage2.lr,
        reference_lr: PRETRAINED_STAGE2_LR,
        ..Default::default()
    };
    let t0 = Instant::now();
    let mut best = validation_loss(model, &val_pairs, ls)?;
    let mut best_params: Vec<Tensor<f32>> = model.params().to_vec();
    let mut best_epoch = 0;
    report.epochs.push(EpochRecord {
        stage: 2,
        epoch: 0,
        train_loss: None,
        supervised_loss: None,
        aug_loss: BTreeMap::new(),
        kd_loss: None,
        val_loss: Some(best),
        seconds: t0.elapsed().as_secs_f64(),
    });
    let mut stale = 0;
    for epoch in 1..=cfg.stage2.max_epochs {
        let t0 = Instant::now();
        let means = augmented_epoch(
            model,
            &mut opt,
            &train_pairs,
            &train,
            &cfg.stage2.kinds,
            cfg.stage2.batch_size,
            cfg,
            &mut st,
            epoch,
        )?;
        let v = validation_loss(model, &val_pairs, ls)?;
        report.epochs.push(EpochRecord {
            stage: 2,
            epoch,
            train_loss: Some(means.total),
            supervised_loss: Some(means.supervised),
            aug_loss: means.aug,
            kd_loss: means.kd,
            val_loss: Some(v),
            seconds: t0.elapsed().as_secs_f64(),
        });
        if v < best {
            best = v;
            best_epoch = epoch;
            best_params = model.params().to_vec();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.stage2.patience {
                break;
            }
        }
    }
    for (dst, src) in model.params_mut().iter_mut().zip(best_params) {
        *dst = src;
    }
    report.best_epoch = Some(best_epoch);
    Ok(report)
}

/// Initialises a model from `cfg.seed` and runs stage 1 on `noisy` and
/// stage 2 on `clean`, skipping a stage whose corpus is absent.
pub fn train_pipeline(
    model_cfg: Seq2SeqConfig,
    noisy: Option<&Corpus>,
    clean: Option<&Corpus>,
    cfg: &TrainingConfig,
) -> Result<(Seq2SeqModel<f32>, Vec<TrainReport>)> {
    cfg.validate()?;
    if noisy.is_none() && clean.is_none() {
        return Err(Error::Empty("no training corpus given".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut model = Seq2SeqModel::init(model_cfg, &mut root.fork(0))?;
    let mut reports = Vec::new();
    if let Some(c) = noisy {
        reports.push(train_stage1(&mut model, c, cfg, &mut root.fork(1))?);
    }
    if let Some(c) = clean {
        reports.push(train_stage2(&mut model, c, cfg, &mut root.fork(2))?);
    }
    Ok((model, reports))
}

#[cfg(test)]
mod tests;
