use proptest::prelude::*;

use super::*;
use crate::numerics::{finite_diff_grad_check, AdamW, Rng, Tape, Tensor};
use crate::seq2seq::{translate_text, Seq2SeqConfig, Seq2SeqModel, SeqPair, Translator};
use crate::text::{Corpus, ParallelExample, Provenance, TokenMode, Vocab, EOS};
use crate::Error;

const LN2: f64 = std::f64::consts::LN_2;

fn dist(rows: &[&[f64]]) -> ProbDist {
    let v = rows[0].len();
    ProbDist::new(rows.len(), v, rows.concat()).unwrap()
}

fn random_dist(rng: &mut Rng, rows: usize, v: usize) -> ProbDist {
    let mut data = Vec::new();
    for _ in 0..rows {
        // Some exact zeros to exercise the 0·log 0 convention.
        let w: Vec<f64> = (0..v)
            .map(|_| if rng.bernoulli(0.2) { 0.0 } else { rng.uniform() + 1e-3 })
            .collect();
        let s: f64 = w.iter().sum::<f64>().max(1e-12);
        if s == 1e-12 {
            let mut one = vec![0.0; v];
            one[0] = 1.0;
            data.extend(one);
        } else {
            data.extend(w.iter().map(|x| x / s));
        }
    }
    ProbDist::new(rows, v, data).unwrap()
}

#[test]
fn prob_dist_validation() {
    assert!(ProbDist::new(1, 2, vec![0.5, 0.6]).is_err());
    assert!(ProbDist::new(1, 2, vec![1.5, -0.5]).is_err());
    assert!(ProbDist::new(2, 2, vec![0.5, 0.5]).is_err());
    let logits = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
    let p = ProbDist::from_logits(&logits).unwrap();
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    assert!((p.row(0)[2] - 3f64.exp() / z).abs() < 1e-7);
    assert!((p.row(1)[0] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn ce_examples() {
    let u = dist(&[&[0.25; 4]]);
    assert!((kd_loss_ce(&u, &u).unwrap() - 4f64.ln()).abs() < 1e-12);
    let t = dist(&[&[0.5, 0.3, 0.2]]);
    let h = -(0.5f64 * 0.5f64.ln() + 0.3 * 0.3f64.ln() + 0.2 * 0.2f64.ln());
    assert!((kd_loss_ce(&t, &t).unwrap() - h).abs() < 1e-12);
    let onehot = dist(&[&[0.0, 1.0, 0.0]]);
    let s = dist(&[&[0.1, 0.7, 0.2]]);
    assert!((kd_loss_ce(&onehot, &s).unwrap() + 0.7f64.ln()).abs() < 1e-12);
    assert!(matches!(kd_loss_ce(&u, &s), Err(Error::Shape(_))));
}

#[test]
fn js_examples() {
    let t = dist(&[&[1.0, 0.0]]);
    let s = dist(&[&[0.0, 1.0]]);
    assert!((kd_loss_js(&t, &s).unwrap() - 2.0 * LN2).abs() < 1e-9);
    let a = dist(&[&[0.2, 0.3, 0.5], &[0.9, 0.1, 0.0]]);
    assert!(kd_loss_js(&a, &a).unwrap().abs() < 1e-12);
    assert!(matches!(kd_loss_js(&t, &a), Err(Error::Shape(_))));
}

#[test]
fn js_bounds_and_symmetry_on_random_pairs() {
    let mut rng = Rng::new(3);
    for _ in 0..1000 {
        let v = 2 + rng.below(6);
        let t = random_dist(&mut rng, 1, v);
        let s = random_dist(&mut rng, 1, v);
        let js = kd_loss_js(&t, &s).unwrap();
        assert_eq!(js.to_bits(), kd_loss_js(&s, &t).unwrap().to_bits());
        assert!((0.0..=2.0 * LN2 + 1e-12).contains(&js), "{js}");
        let same = t.data().iter().zip(s.data()).all(|(a, b)| (a - b).abs() < 1e-9);
        assert_eq!(js < 1e-12, same);
    }
}

#[test]
fn tape_kd_losses_match_reference() {
    let mut rng = Rng::new(4);
    let (rows, v) = (5, 7);
    let logits: Vec<f64> = (0..rows * v).map(|_| rng.normal(0.0, 2.0)).collect();
    let t = random_dist(&mut rng, rows, v);
    let s = ProbDist::from_logits(&Tensor::new(vec![rows, v], logits.clone()).unwrap()).unwrap();
    let mask = vec![true, false, true, true, false];
    let keep: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
    let pick = |d: &ProbDist| {
        let data: Vec<f64> = keep.iter().flat_map(|&r| d.row(r).to_vec()).collect();
        ProbDist::new(keep.len(), v, data).unwrap()
    };
    for (kind, want) in [
        (KdKind::Ce, kd_loss_ce(&pick(&t), &pick(&s)).unwrap()),
        (KdKind::Js, kd_loss_js(&pick(&t), &pick(&s)).unwrap()),
    ] {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant_raw(vec![rows, v], logits.clone());
        let l = kd_loss_var(&mut tape, kind, x, t.data().to_vec(), mask.clone()).unwrap();
        assert!((tape.scalar(l) - want).abs() < 1e-12, "{kind:?}");
    }
}

#[test]
fn kd_gradients_match_finite_differences() {
    let mut rng = Rng::new(5);
    let (rows, v) = (4, 6);
    let t = random_dist(&mut rng, rows, v);
    for kind in [KdKind::Ce, KdKind::Js] {
        let data: Vec<f64> = (0..rows * v).map(|_| rng.normal(0.0, 1.5)).collect();
        let mut params = vec![Tensor::new(vec![rows, v], data).unwrap()];
        let teacher = t.data().to_vec();
        let report = finite_diff_grad_check(
            |tape, vars| kd_loss_var(tape, kind, vars[0], teacher.clone(), vec![true; rows]),
            &mut params,
            1e-6,
            usize::MAX,
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{kind:?}: {report:?}");
    }
}

#[test]
fn student_loss_examples() {
    assert_eq!(student_loss(2.0, 2.0, 4.0, 0.5).unwrap(), 4.0);
    assert_eq!(student_loss(1.0, 2.0, 7.0, 1.0).unwrap(), 7.0);
    assert_eq!(student_loss(1.0, 2.0, 7.0, 0.0).unwrap(), 3.0);
    assert!(matches!(student_loss(f64::NAN, 0.0, 0.0, 0.5), Err(Error::NonFinite(_))));
    assert!(student_loss(1.0, 1.0, 1.0, 1.5).is_err());
    assert_eq!(KdKind::parse("JS").unwrap(), KdKind::Js);
    assert!(KdKind::parse("kl").is_err());
}

#[test]
fn quantization_examples() {
    let z = Tensor::<f32>::zeros(&[2, 3]);
    let q = quantize_int8(&z).unwrap();
    assert_eq!(q.scale, 1.0);
    assert_eq!(q.dequantize(), z);
    let pm = Tensor::new(vec![2], vec![-1.0f32, 1.0]).unwrap();
    let q = quantize_int8(&pm).unwrap();
    assert!((q.scale as f64 - 1.0 / 127.0).abs() < 1e-9);
    assert_eq!(q.payload, vec![-127, 127]);
    assert_eq!(q.dequantize().data(), &[-1.0, 1.0]);
    let bad = Tensor::from_vec(vec![1.0f32, f32::NAN]);
    assert!(quantize_int8(&bad).is_err());
}

proptest! {
    #[test]
    fn quantization_error_bound_and_idempotence(xs in prop::collection::vec(-50.0f32..50.0, 1..64)) {
        let t = Tensor::from_vec(xs);
        let q = quantize_int8(&t).unwrap();
        let d = q.dequantize();
        for (a, b) in t.data().iter().zip(d.data()) {
            prop_assert!(((a - b).abs() as f64) <= q.scale as f64 / 2.0 * (1.0 + 1e-5));
        }
        prop_assert_eq!(quantize_int8(&d).unwrap().payload, q.payload);
    }

    #[test]
    fn js_is_bounded(seed in any::<u64>(), v in 2usize..8) {
        let mut rng = Rng::new(seed);
        let t = random_dist(&mut rng, 3, v);
        let s = random_dist(&mut rng, 3, v);
        let js = kd_loss_js(&t, &s).unwrap();
        prop_assert!((0.0..=2.0 * LN2 + 1e-12).contains(&js));
    }
}

fn toy_vocab() -> Vocab {
    Vocab::build(["a b c d e f g h"], TokenMode::Word, 1).unwrap()
}

fn toy_config(v: Vocab) -> Seq2SeqConfig {
    let mut c = Seq2SeqConfig::new(v).with_width(16, 2, 32);
    c.max_len = 8;
    c.init_std = 0.3;
    c
}

#[test]
fn quantized_model_matches_its_dequantized_twin() {
    let m = Seq2SeqModel::<f32>::init(toy_config(toy_vocab()), &mut Rng::new(8)).unwrap();
    let q = quantize_model(&m).unwrap();
    for (slot, p) in q.slots().iter().zip(m.params()) {
        match slot {
            QuantSlot::Int8(t) => {
                assert!(p.rank() >= 2);
                let d = t.dequantize();
                let err = d.data().iter().zip(p.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
                assert!(err <= t.scale / 2.0 * (1.0 + 1e-5));
            }
            QuantSlot::Dense(t) => {
                assert_eq!(p.rank(), 1);
                assert_eq!(t.data(), p.data());
            }
        }
    }
    let twin = q.dequantized();
    let src = vec![6, 7, 8, EOS];
    for prefixes in [vec![vec![]], vec![vec![9, 10], vec![11, 6]]] {
        let a = q.scorer(&src).unwrap().log_probs(&prefixes).unwrap();
        let b = twin.scorer(&src).unwrap().log_probs(&prefixes).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
    }
    assert_eq!(
        translate_text(&q, "a b c", 3, 8).unwrap(),
        translate_text(&twin, "a b c", 3, 8).unwrap()
    );
}

#[test]
fn quantized_checkpoint_round_trip() {
    let m = Seq2SeqModel::<f32>::init(toy_config(toy_vocab()), &mut Rng::new(9)).unwrap();
    let q = quantize_model(&m).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.ckpt");
    q.save(&path).unwrap();
    let back = QuantizedModel::load(&path).unwrap();
    assert_eq!(back.slots(), q.slots());
    assert_eq!(back.config(), q.config());
    crate::seq2seq::save_checkpoint(&m, &path).unwrap();
    assert!(matches!(QuantizedModel::load(&path), Err(Error::CorruptCheckpoint(_))));
}

#[test]
fn percentiles_use_nearest_rank() {
    let xs: Vec<f64> = (1..=20).rev().map(f64::from).collect();
    assert_eq!(percentile(&xs, 50.0), 10.0);
    assert_eq!(percentile(&xs, 95.0), 19.0);
    assert_eq!(percentile(&xs, 100.0), 20.0);
    assert_eq!(percentile(&[3.0], 0.0), 3.0);
}

#[test]
fn latency_report_shape() {
    let m = Seq2SeqModel::<f32>::init(toy_config(toy_vocab()), &mut Rng::new(10)).unwrap();
    let queries = vec!["a b".to_string(), "c d e".to_string()];
    assert!(bench_latency(&m, &queries, 10, 199, "m").is_err());
    assert!(bench_latency(&m, &queries, 9, 200, "m").is_err());
    assert!(bench_latency(&m, &[], 10, 200, "m").is_err());
    let r = bench_latency(&m, &queries, 10, 200, "toy").unwrap();
    assert_eq!(r.samples_ms.len(), 200);
    assert!(r.p50_ms <= r.p95_ms);
    assert!(r.to_text().starts_with("model=toy samples=200 p50_ms="));
}

fn memorizing_teacher(pairs: &[(&str, &str)]) -> Seq2SeqModel<f32> {
    let v = toy_vocab();
    let data: Vec<SeqPair> = pairs.iter().map(|(s, t)| SeqPair::from_text(&v, s, t)).collect();
    let refs: Vec<&SeqPair> = data.iter().collect();
    let mut cfg = Seq2SeqConfig::new(v).with_width(32, 4, 64);
    cfg.max_len = 8;
    cfg.dropout = 0.0;
    let mut m = Seq2SeqModel::<f32>::init(cfg, &mut Rng::new(11)).unwrap();
    let mut opt = AdamW::new(3e-3, 0.0);
    for _ in 0..300 {
        let mut tape = Tape::new();
        let vars = m.bind_params(&mut tape);
        let loss = m.batch_loss(&mut tape, &vars, &refs, 0.0, None).unwrap();
        let mut g = tape.backward(loss).unwrap();
        let grads: Vec<Vec<f32>> = vars.iter().map(|&v| g.take(v).unwrap()).collect();
        opt.step(m.params_mut(), &grads).unwrap();
    }
    m
}

#[test]
fn pseudo_labels_reproduce_memorized_targets() {
    let pairs = [
        ("a b", "c d"),
        ("b a", "d c"),
        ("e", "f g"),
        ("f g h", "h"),
        ("a", "b"),
        ("c c", "a"),
        ("d e f", "e f"),
        ("g", "a b c"),
        ("h a", "a h"),
        ("b c d", "d"),
    ];
    let teacher = memorizing_teacher(&pairs);
    let sources: Vec<&str> = pairs.iter().map(|p| p.0).collect();
    let out = generate_pseudo_labels(&teacher, &sources, 3, 8);
    assert!(out.failed.is_empty());
    assert_eq!(out.corpus.len(), pairs.len());
    for (e, (s, t)) in out.corpus.iter().zip(&pairs) {
        assert_eq!(&e.source, s);
        assert_eq!(&e.target, t);
        assert_eq!(e.provenance, Provenance::NoisyPseudo);
    }
    let again = generate_pseudo_labels(&teacher, &sources, 3, 8);
    assert_eq!(again.corpus, out.corpus);
    let none: [&str; 0] = [];
    assert!(generate_pseudo_labels(&teacher, &none, 3, 8).corpus.is_empty());
}

#[test]
fn pseudo_label_failures_are_flagged_and_skipped() {
    let teacher = Seq2SeqModel::<f32>::init(toy_config(toy_vocab()), &mut Rng::new(12)).unwrap();
    let long = "a b c d e f g h a b";
    let sources = ["a b", long, "c", "b a c"];
    let out = generate_pseudo_labels(&teacher, &sources, 2, 4);
    let mut want_failed = Vec::new();
    let mut want_targets = Vec::new();
    for (i, s) in sources.iter().enumerate() {
        let mut src = teacher.vocab().encode(s);
        src.push(EOS);
        match crate::seq2seq::beam_search(&teacher, &src, 2, 4) {
            Ok(h) if h.finished => want_targets.push(teacher.vocab().decode(&h.tokens)),
            _ => want_failed.push(i),
        }
    }
    assert!(want_failed.contains(&1));
    let failed: Vec<usize> = out.failed.iter().map(|f| f.0).collect();
    assert_eq!(failed, want_failed);
    assert_eq!(out.corpus.targets(), want_targets);
}

fn corpus(texts: &[(&str, &str)], provenance: Provenance) -> Corpus {
    Corpus::new(
        texts
            .iter()
            .map(|(s, t)| ParallelExample {
                source: s.to_string(),
                target: t.to_string(),
                provenance,
                clean_source: None,
            })
            .collect(),
    )
}

fn student_pools() -> (Corpus, Corpus) {
    let clean = corpus(
        &[("a b", "c d"), ("e f", "g h"), ("a", "b"), ("c d e", "f"), ("g", "h a")],
        Provenance::CleanManual,
    );
    let pseudo = corpus(&[("b c", "d e"), ("h", "a"), ("f g", "b")], Provenance::NoisyPseudo);
    (clean, pseudo)
}

#[test]
fn identical_teacher_gives_zero_js() {
    let mut cfg = toy_config(toy_vocab());
    cfg.dropout = 0.0;
    let rng = Rng::new(13);
    let teacher = Seq2SeqModel::<f32>::init(cfg.clone(), &mut rng.fork(0)).unwrap();
    let (clean, pseudo) = student_pools();
    let sc = StudentConfig {
        epochs: 3,
        lr: 1e-7,
        batch_size: 2,
        ..Default::default()
    };
    let (_, report) = train_student(cfg, &teacher, &clean, &pseudo, &sc, &mut rng.clone()).unwrap();
    for e in &report.epochs {
        assert!(e.kd_loss.unwrap() < 1e-6, "{}", e.to_line());
    }
}

#[test]
fn ce_and_js_differ_only_in_the_kd_term() {
    let cfg = toy_config(toy_vocab());
    let teacher = Seq2SeqModel::<f32>::init(cfg.clone(), &mut Rng::new(14)).unwrap();
    let (clean, pseudo) = student_pools();
    let run = |kd| {
        let sc = StudentConfig {
            epochs: 1,
            batch_size: 8,
            kd,
            ..Default::default()
        };
        let (s, r) = train_student(cfg.clone(), &teacher, &clean, &pseudo, &sc, &mut Rng::new(15)).unwrap();
        (s, r.epochs[0].clone())
    };
    let (s_ce, ce) = run(KdKind::Ce);
    let (s_js, js) = run(KdKind::Js);
    assert_eq!(ce.supervised_loss, js.supervised_loss);
    assert_eq!(ce.aug_loss, js.aug_loss);
    assert_ne!(ce.kd_loss, js.kd_loss);
    assert_ne!(s_ce.params(), s_js.params());
    assert!(ce.to_line().contains("kd_loss="));
}

#[test]
fn student_preconditions() {
    let cfg = toy_config(toy_vocab());
    let teacher = Seq2SeqModel::<f32>::init(cfg.clone(), &mut Rng::new(16)).unwrap();
    let (clean, pseudo) = student_pools();
    let sc = StudentConfig::default();
    let other = toy_config(Vocab::build(["x y"], TokenMode::Word, 1).unwrap());
    assert!(train_student(other, &teacher, &clean, &pseudo, &sc, &mut Rng::new(0)).is_err());
    assert!(train_student(cfg.clone(), &teacher, &pseudo, &pseudo, &sc, &mut Rng::new(0)).is_err());
    let empty = Corpus::new(vec![]);
    assert!(train_student(cfg, &teacher, &clean, &empty, &sc, &mut Rng::new(0)).is_err());
}
