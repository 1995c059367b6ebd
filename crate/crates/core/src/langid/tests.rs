use std::path::Path;

use proptest::prelude::*;

use super::*;
use crate::numerics::Rng;

fn q(tokens: &[(&str, Label)]) -> LabeledQuery {
    LabeledQuery {
        tokens: tokens.iter().map(|(w, l)| LabeledToken::new(*w, *l).unwrap()).collect(),
    }
}

#[test]
fn feature_template_examples() {
    let f = extract_features(&["tv"], 0);
    for want in ["0:t", "0:v", "0:^t", "0:tv", "0:v$", "0:^tv", "0:tv$", "0:^tv$", "0:len=2", "-1:<BOS>", "1:<EOS>"] {
        assert!(f.contains(want), "missing {want}");
    }
    assert!(!f.contains("0:digit") && !f.contains("0:special"));
    assert!(!f.contains("0:^") && !f.contains("0:$"));
    assert!(extract_features(&["buy", "mi4"], 1).contains("0:digit"));
    assert!(extract_features(&["buy", "mi4"], 0).contains("1:digit"));
    assert!(extract_features(&["wi-fi"], 0).contains("0:special"));
    let g = extract_features(&["Sasta", "TV", "dikhao"], 1);
    assert!(g.contains("-1:sas") && g.contains("0:tv") && g.contains("1:dikh"));
    assert!(extract_features(&["abcdefgh"], 0).contains("0:len=6"));
    assert_eq!(g, extract_features(&["Sasta", "TV", "dikhao"], 1));
    let mut sorted = g.features.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted, g.features);
}

#[test]
fn aggregation_rule() {
    use Label::*;
    use QueryLanguage::*;
    assert_eq!(aggregate_labels(&[En, Hi, En]).unwrap(), Hinglish);
    assert_eq!(aggregate_labels(&[En, En]).unwrap(), English);
    assert_eq!(aggregate_labels(&[En, Ot]).unwrap(), Other);
    assert_eq!(aggregate_labels(&[Ot]).unwrap(), Other);
    assert_eq!(aggregate_labels(&[Ot, Hi]).unwrap(), Hinglish);
    assert!(aggregate_labels(&[]).is_err());
}

fn random_model(rng: &mut Rng, words: &[&str], scale: f64) -> CrfModel {
    let mut m = CrfModel::new((0..words.len()).flat_map(|i| extract_features(words, i).features));
    for w in m.weights_mut() {
        *w = rng.normal(0.0, scale);
    }
    for row in m.transitions_mut() {
        for w in row {
            *w = rng.normal(0.0, scale * 3.0);
        }
    }
    m
}

fn random_words(rng: &mut Rng, n: usize) -> Vec<String> {
    let pool = ["kya", "tv", "sasta", "mi4", "phone", "hai", "best", "under", "500", "wala"];
    (0..n).map(|_| pool[rng.below(pool.len())].to_string()).collect()
}

fn all_paths(n: usize) -> Vec<Vec<Label>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                Label::ALL.iter().map(move |&l| {
                    let mut q = p.clone();
                    q.push(l);
                    q
                })
            })
            .collect();
    }
    out
}

#[test]
fn log_partition_and_viterbi_match_brute_force() {
    let mut rng = Rng::new(1);
    for _ in 0..200 {
        let n = 1 + rng.below(6);
        let owned = random_words(&mut rng, n);
        let words: Vec<&str> = owned.iter().map(String::as_str).collect();
        let m = random_model(&mut rng, &words, 0.3);
        let scores: Vec<(Vec<Label>, f64)> = all_paths(n)
            .into_iter()
            .map(|p| {
                let s = m.path_score(&words, &p);
                (p, s)
            })
            .collect();
        let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let brute_z = max + scores.iter().map(|s| (s.1 - max).exp()).sum::<f64>().ln();
        let z = m.log_partition(&words).unwrap();
        assert!((z - brute_z).abs() < 1e-8, "{z} vs {brute_z}");
        assert!(scores.iter().all(|s| z >= s.1));
        let best = scores.iter().find(|s| s.1 == max).unwrap();
        let v = m.viterbi(&words).unwrap();
        assert_eq!(v, best.0);
        assert_eq!(m.path_score(&words, &v), max);
    }
}

#[test]
fn zero_model_facts() {
    let m = CrfModel::new(extract_features(&["a"], 0).features);
    assert!((m.log_partition(&["a"]).unwrap() - 3f64.ln()).abs() < 1e-12);
    assert_eq!(m.viterbi(&["a", "b", "c"]).unwrap(), vec![Label::En; 3]);
    assert!(m.viterbi(&[]).is_err());
    assert!(m.log_partition(&[]).is_err());
}

#[test]
fn dominant_emission_forces_label() {
    let words = ["phone", "sasta", "hai"];
    let mut m = CrfModel::new((0..3).flat_map(|i| extract_features(&words, i).features));
    m.set_weight("0:sta$", Label::Hi, 50.0).unwrap();
    m.set_weight("0:^hai", Label::Ot, 50.0).unwrap();
    assert_eq!(m.viterbi(&words).unwrap(), vec![Label::En, Label::Hi, Label::Ot]);
    assert!(m.set_weight("nope", Label::En, 1.0).is_err());
}

#[test]
fn nll_gradient_matches_finite_differences() {
    let mut rng = Rng::new(2);
    for _ in 0..10 {
        let n = 1 + rng.below(5);
        let owned = random_words(&mut rng, n);
        let words: Vec<&str> = owned.iter().map(String::as_str).collect();
        let mut m = random_model(&mut rng, &words, 0.2);
        let query = LabeledQuery {
            tokens: words
                .iter()
                .map(|w| LabeledToken::new(*w, Label::from_index(rng.below(3))).unwrap())
                .collect(),
        };
        let (loss, grad) = m.nll_grad(&query).unwrap();
        let z = m.log_partition(&words).unwrap();
        assert!((loss - (z - m.path_score(&words, &query.labels()))).abs() < 1e-12);
        let h = 1e-6;
        let nll = |m: &CrfModel| m.nll_grad(&query).unwrap().0;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
        let mut worst = 0.0f64;
        for (&f, row) in &grad.weights {
            for y in 0..N_LABELS {
                let i = f * N_LABELS + y;
                let w0 = m.weights()[i];
                m.weights_mut()[i] = w0 + h;
                let up = nll(&m);
                m.weights_mut()[i] = w0 - h;
                let down = nll(&m);
                m.weights_mut()[i] = w0;
                worst = worst.max(rel(row[y], (up - down) / (2.0 * h)));
            }
        }
        for p in 0..N_LABELS {
            for c in 0..N_LABELS {
                let w0 = m.transitions()[p][c];
                m.transitions_mut()[p][c] = w0 + h;
                let up = nll(&m);
                m.transitions_mut()[p][c] = w0 - h;
                let down = nll(&m);
                m.transitions_mut()[p][c] = w0;
                let num = (up - down) / (2.0 * h);
                if n == 1 {
                    assert_eq!(grad.trans[p][c], 0.0);
                    assert!(num.abs() < 1e-9);
                } else {
                    worst = worst.max(rel(grad.trans[p][c], num));
                }
            }
        }
        assert!(worst < 1e-5, "rel err {worst}");
    }
}

fn separable() -> Vec<LabeledQuery> {
    use Label::*;
    let mut rng = Rng::new(3);
    let en = ["abc", "bca", "cab", "aab", "bbc"];
    let hi = ["xyz", "zyx", "yxz", "xxy", "zzy"];
    let ot = ["123", "321", "213"];
    (0..60)
        .map(|_| {
            let n = 1 + rng.below(4);
            let toks: Vec<(&str, Label)> = (0..n)
                .map(|_| match rng.below(3) {
                    0 => (en[rng.below(5)], En),
                    1 => (hi[rng.below(5)], Hi),
                    _ => (ot[rng.below(3)], Ot),
                })
                .collect();
            q(&toks)
        })
        .collect()
}

#[test]
fn crf_fits_separable_data() {
    let data = separable();
    let cfg = CrfTrainConfig {
        epochs: 20,
        batch_size: 8,
        ..Default::default()
    };
    let m = train_crf(&data, &cfg, &mut Rng::new(4)).unwrap();
    for query in &data {
        assert_eq!(m.viterbi(&query.words()).unwrap(), query.labels());
        assert_eq!(detect_query_language(&m, &query.text()).unwrap(), query.query_language().unwrap());
    }
    let again = train_crf(&data, &cfg, &mut Rng::new(4)).unwrap();
    assert_eq!(again, m);
    assert!(detect_query_language(&m, "   ").is_err());
    assert!(train_crf(&[], &cfg, &mut Rng::new(4)).is_err());
}

#[test]
fn stronger_l2_shrinks_weights() {
    let data = separable();
    let norms: Vec<f64> = [0.01, 0.1, 1.0]
        .iter()
        .map(|&l2| {
            let cfg = CrfTrainConfig {
                l2,
                epochs: 30,
                lr: 0.05,
                batch_size: 60,
            };
            train_crf(&data, &cfg, &mut Rng::new(5)).unwrap().norm_sq()
        })
        .collect();
    assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
}

#[test]
fn crf_model_file_round_trip() {
    let data = separable();
    let m = train_crf(&data, &CrfTrainConfig::default(), &mut Rng::new(6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("crf.txt");
    m.save(&path).unwrap();
    assert_eq!(CrfModel::load(&path).unwrap(), m);
    let broken = m.to_text().replacen("trans\t", "trans\tx", 1);
    assert!(CrfModel::from_text(&broken, Path::new("m")).is_err());
    assert!(CrfModel::from_text("hello", Path::new("m")).is_err());
}

#[test]
fn baseline_is_order_invariant_and_fits_separable_data() {
    let data = separable();
    let cfg = BaselineConfig {
        epochs: 60,
        batch_size: 8,
        ..Default::default()
    };
    let m = train_baseline(&data, &cfg, &mut Rng::new(7)).unwrap();
    for query in &data {
        assert_eq!(m.classify(&query.text()).unwrap(), query.query_language().unwrap(), "{}", query.text());
    }
    let a = m.scores("abc xyz 123 bca").unwrap();
    let b = m.scores("bca 123 abc xyz").unwrap();
    assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    assert!(m.classify("").is_err());
    assert!(m.classify("unseen words").is_ok());
}

#[test]
fn prf_examples() {
    use QueryLanguage::*;
    let g = [Hinglish, English, Hinglish, Other];
    let p = eval_prf(&g, &g, Hinglish).unwrap();
    assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    let all = [Hinglish; 4];
    let gold = [Hinglish, English, Hinglish, English];
    let p = eval_prf(&all, &gold, Hinglish).unwrap();
    assert_eq!((p.precision, p.recall), (0.5, 1.0));
    assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
    let none = [English; 4];
    let p = eval_prf(&none, &gold, Hinglish).unwrap();
    assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    assert!(eval_prf(&none[..3], &gold, Hinglish).is_err());
}

#[test]
fn token_corpus_round_trip() {
    let data = vec![
        q(&[("sasta", Label::Hi), ("tv", Label::En)]),
        q(&[("mi4", Label::Ot)]),
    ];
    let text = format_token_corpus(&data);
    assert_eq!(text, "sasta\tHI\ntv\tEN\n\nmi4\tOT\n");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tok.tsv");
    write_token_corpus(&path, &data).unwrap();
    assert_eq!(load_token_corpus(&path).unwrap(), data);
    let err = parse_token_corpus("a\tEN\nb\tXX\n", Path::new("f")).unwrap_err();
    assert!(err.to_string().contains("f:2"), "{err}");
    assert!(parse_token_corpus("a EN\n", Path::new("f")).is_err());
}

#[test]
fn benchmark_shape_and_determinism() {
    let spec = LangidBenchSpec {
        n_queries: 500,
        ..Default::default()
    };
    let b = gen_langid_benchmark(&spec).unwrap();
    assert_eq!((b.train.len(), b.test.len()), (400, 100));
    assert_eq!(gen_langid_benchmark(&spec).unwrap(), b);
    let langs: Vec<QueryLanguage> = b.train.iter().map(|q| q.query_language().unwrap()).collect();
    for l in QueryLanguage::ALL {
        assert!(langs.contains(&l), "{l:?} never generated");
    }
    for query in b.train.iter().chain(&b.test) {
        assert!((2..=6).contains(&query.tokens.len()));
    }
    let other = gen_langid_benchmark(&LangidBenchSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(other, b);
}

proptest! {
    #[test]
    fn aggregation_is_hinglish_iff_any_hi(labels in prop::collection::vec(0usize..3, 1..8)) {
        let labels: Vec<Label> = labels.into_iter().map(Label::from_index).collect();
        let got = aggregate_labels(&labels).unwrap();
        prop_assert_eq!(got == QueryLanguage::Hinglish, labels.contains(&Label::Hi));
        prop_assert_eq!(got == QueryLanguage::English, labels.iter().all(|&l| l == Label::En));
    }
}
