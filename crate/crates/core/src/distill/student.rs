use std::time::Instant;

use crate::augment::AugKind;
use crate::distill::kd::{kd_loss_var, student_loss_var, KdKind};
use crate::error::{Error, Result};
use crate::numerics::{softmax, AdamW, Rng};
use crate::seq2seq::{beam_search, Seq2SeqConfig, Seq2SeqModel, SeqPair, Translator};
use crate::text::{Corpus, ParallelExample, Provenance, EOS, PAD};
use crate::train::{
    encode_corpus, require_provenance, run_epoch, sup_aug_losses, EpochRecord, StepLoss, Streams,
    TrainReport,
};

/// Pseudo-labelled examples plus the indices of sources the teacher could
/// not translate.
#[derive(Clone, Debug, Default)]
pub struct PseudoLabels {
    pub corpus: Corpus,
    pub failed: Vec<(usize, String)>,
}

/// Labels each source with the teacher's beam-search output. Sources whose
/// best hypothesis never emits EOS are recorded as failures.
pub fn generate_pseudo_labels<S: AsRef<str>>(
    teacher: &dyn Translator,
    sources: &[S],
    beam: usize,
    max_len: usize,
) -> PseudoLabels {
    let mut examples = Vec::with_capacity(sources.len());
    let mut failed = Vec::new();
    for (i, s) in sources.iter().enumerate() {
        let s = s.as_ref();
        let mut src = teacher.vocab().encode(s);
        src.push(EOS);
        match beam_search(teacher, &src, beam, max_len) {
            Ok(h) if !h.finished => failed.push((i, format!("no EOS within {max_len} tokens"))),
            Ok(h) => examples.push(ParallelExample {
                source: s.to_string(),
                target: teacher.vocab().decode(&h.tokens),
                provenance: Provenance::NoisyPseudo,
                clean_source: None,
            }),
            Err(e) => failed.push((i, e.to_string())),
        }
    }
    PseudoLabels {
        corpus: Corpus::new(examples),
        failed,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub kinds: Vec<AugKind>,
    pub kd: KdKind,
    pub lambda: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-4,
            batch_size: 64,
            kinds: vec![AugKind::DropChar, AugKind::AutoEncoder],
            kd: KdKind::Js,
            lambda: 0.5,
            label_smoothing: 0.1,
            weight_decay: 0.01,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "batch_size {} and lr {} must be positive",
                self.batch_size, self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidArgument(format!(
                "lambda {} / label_smoothing {} out of range",
                self.lambda, self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Teacher-forced softmax rows of `teacher` on `batch`, row-aligned with the
/// student's logits; PAD target rows are marked unused.
fn teacher_targets(teacher: &Seq2SeqModel<f32>, batch: &[&SeqPair]) -> Result<(Vec<f32>, Vec<bool>)> {
    let (logits, _) = teacher.forward_batch(batch, false)?;
    let probs = softmax(&logits, 1)?;
    let len = batch.iter().map(|p| p.tgt.len()).max().unwrap_or(0);
    let rows = batch
        .iter()
        .flat_map(|p| (0..len).map(move |t| p.tgt.get(t).is_some_and(|&id| id != PAD)))
        .collect();
    Ok((probs.into_data(), rows))
}

/// Distils `teacher` into a freshly initialised student. Each step takes a
/// clean batch (supervised + augmentation losses) and a random batch of the
/// same size from the pseudo-labelled pool for the KD loss.
pub fn train_student(
    student_cfg: Seq2SeqConfig,
    teacher: &Seq2SeqModel<f32>,
    clean: &Corpus,
    pseudo: &Corpus,
    cfg: &StudentConfig,
    rng: &mut Rng,
) -> Result<(Seq2SeqModel<f32>, TrainReport)> {
    cfg.validate()?;
    if student_cfg.vocab != *teacher.vocab() {
        return Err(Error::InvalidArgument("student and teacher vocabularies differ".into()));
    }
    require_provenance(clean, Provenance::CleanManual)?;
    if clean.is_empty() || pseudo.is_empty() {
        return Err(Error::Empty("student training pools".into()));
    }
    let mut student = Seq2SeqModel::init(student_cfg, &mut rng.fork(0))?;
    let max_len = student.config().max_len.min(teacher.config().max_len);
    let clean_pairs = encode_corpus(clean, student.vocab(), max_len)?;
    let pseudo_pairs = encode_corpus(pseudo, student.vocab(), max_len)?;
    let mut st = Streams::new(rng);
    let mut kd_sample = st.split.fork(6);
    let mut kd_dropout = st.split.fork(7);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut report = TrainReport {
        lr: cfg.lr,
        reference_lr: cfg.lr,
        ..Default::default()
    };
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order = st.order.clone();
        let means = run_epoch(
            &mut student,
            &mut opt,
            clean_pairs.len(),
            cfg.batch_size,
            &mut order,
            epoch,
            |m, tape, vars, idx| {
                let batch: Vec<&SeqPair> = idx.iter().map(|&i| &clean_pairs[i]).collect();
                let (sup, aug) = sup_aug_losses(
                    m,
                    tape,
                    vars,
                    &batch,
                    clean,
                    &cfg.kinds,
                    cfg.label_smoothing,
                    &mut st,
                )?;
                let kd_batch: Vec<&SeqPair> = (0..batch.len())
                    .map(|_| &pseudo_pairs[kd_sample.below(pseudo_pairs.len())])
                    .collect();
                let (probs, rows) = teacher_targets(teacher, &kd_batch)?;
                let (logits, _) = m.batch_logits(tape, vars, &kd_batch, Some(&mut kd_dropout))?;
                let kd = kd_loss_var(tape, cfg.kd, logits, probs, rows)?;
                let total = student_loss_var(tape, sup, aug.map(|(_, v)| v), kd, cfg.lambda);
                Ok(StepLoss {
                    total,
                    supervised: sup,
                    aug,
                    kd: Some(kd),
                })
            },
        )?;
        st.order = order;
        report.epochs.push(EpochRecord {
            stage: 3,
            epoch,
            train_loss: Some(means.total),
            supervised_loss: Some(means.supervised),
            aug_loss: means.aug,
            kd_loss: means.kd,
            val_loss: None,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok((student, report))
}

