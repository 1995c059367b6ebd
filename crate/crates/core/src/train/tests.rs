use super::*;
use crate::seq2seq::Seq2SeqConfig;
use crate::text::{gen_synthetic_corpus, ParallelExample, SynthTaskSpec};

fn small_task(n: usize, q: f64, seed: u64) -> (Corpus, Vocab) {
    let spec = SynthTaskSpec {
        lexicon_size: 12,
        code_mix_ratio: 0.2,
        noise_char_drop_prob: 0.0,
        pseudo_label_error_rate: q,
        min_words: 1,
        max_words: 3,
        test_size: 10,
        seed,
    };
    let c = gen_synthetic_corpus(&spec, n).unwrap();
    let v = translation_vocab(&[&c.train]).unwrap();
    (c.train, v)
}

fn small_model(v: Vocab, seed: u64) -> Seq2SeqModel<f32> {
    let mut cfg = Seq2SeqConfig::new(v).with_width(16, 2, 32).with_layers(1, 1);
    cfg.max_len = 8;
    Seq2SeqModel::init(cfg, &mut Rng::new(seed)).unwrap()
}

fn quick_config() -> TrainingConfig {
    let mut c = TrainingConfig::default();
    c.stage1.epochs = 2;
    c.stage1.batch_size = 16;
    c.stage1.lr = 3e-3;
    c.stage2.batch_size = 16;
    c.stage2.lr = 3e-3;
    c.stage2.max_epochs = 6;
    c
}

fn as_clean(c: &Corpus) -> Corpus {
    Corpus::new(
        c.iter()
            .map(|e| ParallelExample {
                provenance: Provenance::CleanManual,
                ..e.clone()
            })
            .collect(),
    )
}

#[test]
fn zero_lambda_ignores_augmentation() {
    let (c, v) = small_task(64, 0.1, 1);
    let mut cfg = quick_config();
    cfg.lambda = 0.0;
    let mut a = small_model(v.clone(), 2);
    let mut b = small_model(v, 2);
    train_stage1(&mut a, &c, &cfg, &mut Rng::new(3)).unwrap();
    cfg.stage1.kinds = vec![];
    train_stage1(&mut b, &c, &cfg, &mut Rng::new(3)).unwrap();
    for (x, y) in a.params().iter().zip(b.params()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn nonzero_lambda_changes_training() {
    let (c, v) = small_task(64, 0.1, 1);
    let cfg = quick_config();
    let mut a = small_model(v.clone(), 2);
    let mut b = small_model(v, 2);
    train_stage1(&mut a, &c, &cfg, &mut Rng::new(3)).unwrap();
    let mut no_aug = cfg.clone();
    no_aug.stage1.kinds = vec![];
    train_stage1(&mut b, &c, &no_aug, &mut Rng::new(3)).unwrap();
    assert_ne!(a.params()[0].data(), b.params()[0].data());
}

#[test]
fn stage1_overfits_small_corpus() {
    let (c, v) = small_task(100, 0.0, 4);
    let mut cfg = quick_config();
    cfg.stage1.epochs = 50;
    cfg.stage1.batch_size = 32;
    let mut m = small_model(v, 5);
    let r = train_stage1(&mut m, &c, &cfg, &mut Rng::new(6)).unwrap();
    assert_eq!(r.epochs.len(), 50);
    let first = r.epochs[0].train_loss.unwrap();
    let last = r.last_train_loss().unwrap();
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert!(r.epochs.iter().all(|e| e.train_loss.unwrap().is_finite()));
    assert!(r.epochs[0].aug_loss.len() >= 1);
}

#[test]
fn stage1_is_bit_reproducible() {
    let (c, v) = small_task(50, 0.1, 7);
    let cfg = quick_config();
    let mut a = small_model(v.clone(), 8);
    let mut b = small_model(v, 8);
    train_stage1(&mut a, &c, &cfg, &mut Rng::new(9)).unwrap();
    train_stage1(&mut b, &c, &cfg, &mut Rng::new(9)).unwrap();
    for (x, y) in a.params().iter().zip(b.params()) {
        let xb: Vec<u32> = x.data().iter().map(|f| f.to_bits()).collect();
        let yb: Vec<u32> = y.data().iter().map(|f| f.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

#[test]
fn stage1_rejects_clean_corpus() {
    let (c, v) = small_task(20, 0.0, 1);
    let mut m = small_model(v, 1);
    assert!(train_stage1(&mut m, &as_clean(&c), &quick_config(), &mut Rng::new(0)).is_err());
}

#[test]
fn stage2_returns_argmin_checkpoint() {
    let (noisy, v) = small_task(120, 0.0, 10);
    let clean = as_clean(&noisy);
    for (patience, lr) in [(1, 3e-3), (2, 3e-2), (3, 1e-3)] {
        let mut cfg = quick_config();
        cfg.stage2.patience = patience;
        cfg.stage2.lr = lr;
        let mut m = small_model(v.clone(), 11);
        let rng = Rng::new(12);
        let mut split_rng = rng.clone();
        let r = train_stage2(&mut m, &clean, &cfg, &mut rng.clone()).unwrap();
        let vals = r.val_losses();
        assert_eq!(vals.len(), r.epochs.len());
        let best = r.best_epoch.unwrap();
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(vals[best], min);
        assert!(vals[best] <= vals[0]);
        let stopped_early = r.epochs.len() - 1 < cfg.stage2.max_epochs;
        if stopped_early {
            assert_eq!(r.epochs.len() - 1, best + patience);
        }
        let mut st = Streams::new(&mut split_rng);
        let (_, val) = clean.split(cfg.stage2.val_fraction, &mut st.split);
        assert_eq!(val.len(), 12);
        let vp = encode_corpus(&val, m.vocab(), m.config().max_len).unwrap();
        let again = validation_loss(&m, &vp, cfg.label_smoothing).unwrap();
        assert_eq!(again, min);
    }
}

#[test]
fn stage2_requires_ten_examples() {
    let (c, v) = small_task(9, 0.0, 1);
    let mut m = small_model(v, 1);
    let err = train_stage2(&mut m, &as_clean(&c), &quick_config(), &mut Rng::new(0)).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn stage2_split_is_deterministic() {
    let (c, _) = small_task(40, 0.0, 1);
    let c = as_clean(&c);
    let cfg = quick_config();
    let mut s1 = Streams::new(&mut Rng::new(5));
    let mut s2 = Streams::new(&mut Rng::new(5));
    let a = c.split(cfg.stage2.val_fraction, &mut s1.split);
    let b = c.split(cfg.stage2.val_fraction, &mut s2.split);
    assert_eq!(a, b);
}

#[test]
fn divergence_keeps_last_good_weights() {
    let (_, v) = small_task(10, 0.0, 1);
    let mut m = small_model(v, 1);
    let before: Vec<Vec<f32>> = m.params().iter().map(|p| p.data().to_vec()).collect();
    let mut opt = AdamW::new(1e-3, 0.0);
    let err = run_epoch(&mut m, &mut opt, 4, 2, &mut Rng::new(0), 3, |_, tape, vars, _| {
        let s = tape.sum(vars[0]);
        let bad = tape.scale(s, f32::NAN);
        Ok(StepLoss {
            total: bad,
            supervised: bad,
            aug: None,
            kd: None,
        })
    })
    .unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 3, step: 0 }));
    for (p, b) in m.params().iter().zip(&before) {
        assert_eq!(p.data(), b.as_slice());
    }
}

#[test]
fn config_round_trips_through_text() {
    let mut c = TrainingConfig::default();
    c.seed = 42;
    c.stage1.kinds = vec![AugKind::Permute];
    c.stage2.patience = 7;
    let text = c.to_kv_string();
    assert_eq!(TrainingConfig::from_kv_str(&text).unwrap(), c);
    assert!(TrainingConfig::from_kv_str("nonsense=1").is_err());
    assert!(TrainingConfig::from_kv_str("stage2.val_fraction=1.0").is_err());
    assert!(TrainingConfig::from_kv_str("stage2.patience=0").is_err());
    assert!(TrainingConfig::from_kv_str("# comment\n\nlambda = 0.25\n").is_ok());
}

#[test]
fn report_lines_are_parseable() {
    let (c, v) = small_task(30, 0.1, 2);
    let mut m = small_model(v, 2);
    let r = train_stage1(&mut m, &c, &quick_config(), &mut Rng::new(1)).unwrap();
    let text = r.to_lines();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + r.epochs.len());
    assert!(lines[0].contains("reference_lr=0.000005"));
    for l in &lines[1..] {
        assert!(l.starts_with("stage=1 epoch="));
        assert!(l.split(' ').all(|kv| kv.contains('=')));
    }
}

#[test]
fn too_long_sequences_are_rejected() {
    let (c, v) = small_task(5, 0.0, 1);
    let long = Corpus::new(vec![ParallelExample::new(
        "a b c d e f g h i",
        "x",
        Provenance::NoisyPseudo,
    )]);
    let m = small_model(v, 1);
    assert!(encode_corpus(&c, m.vocab(), 8).is_ok());
    assert!(matches!(
        encode_corpus(&long, m.vocab(), 8),
        Err(Error::SequenceTooLong { .. })
    ));
}

#[test]
fn pipeline_matches_manual_stage_sequence() {
    let (noisy, v) = small_task(48, 0.1, 4);
    let clean = as_clean(&small_task(40, 0.0, 4).0);
    let mut cfg = quick_config();
    cfg.seed = 8;
    cfg.stage2.max_epochs = 2;
    let mcfg = small_model(v, 0).config().clone();
    let (model, reports) = train_pipeline(mcfg.clone(), Some(&noisy), Some(&clean), &cfg).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].epochs[0].stage, 1);
    assert_eq!(reports[1].epochs[0].stage, 2);

    let root = Rng::new(8);
    let mut manual = Seq2SeqModel::init(mcfg.clone(), &mut root.fork(0)).unwrap();
    train_stage1(&mut manual, &noisy, &cfg, &mut root.fork(1)).unwrap();
    train_stage2(&mut manual, &clean, &cfg, &mut root.fork(2)).unwrap();
    for (x, y) in model.params().iter().zip(manual.params()) {
        assert_eq!(x.data(), y.data());
    }

    let (_, only2) = train_pipeline(mcfg.clone(), None, Some(&clean), &cfg).unwrap();
    assert_eq!(only2.len(), 1);
    assert_eq!(only2[0].epochs[0].stage, 2);
    assert!(train_pipeline(mcfg, None, None, &cfg).is_err());
}
