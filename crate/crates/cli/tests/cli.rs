use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use codemix::seq2seq::{greedy_decode, load_checkpoint};
use codemix::text::EOS;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codemix"))
        .args(args)
        .output()
        .expect("spawn codemix")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "stage1.epochs=1\nstage1.batch_size=16\nstage2.max_epochs=1\n\
stage2.batch_size=16\nmodel.d_model=16\nmodel.n_heads=2\nmodel.d_ff=32\n\
model.n_enc_layers=1\nmodel.n_dec_layers=1\nseed=3\n";

fn tiny_corpus(dir: &Path, seed: &str) {
    ok(&[
        "gen-corpus",
        "--out-dir",
        p(dir),
        "--n-noisy",
        "120",
        "--n-clean",
        "40",
        "--test-size",
        "10",
        "--lexicon-size",
        "20",
        "--seed",
        seed,
    ]);
}

fn tiny_model(dir: &Path, name: &str) -> std::path::PathBuf {
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.join(name);
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--noisy",
        p(&dir.join("noisy.tsv")),
        "--clean",
        p(&dir.join("clean.tsv")),
        "--out",
        p(&out),
        "--report",
        p(&dir.join(format!("{name}.report"))),
    ]);
    out
}

#[test]
fn gen_corpus_is_byte_identical_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    tiny_corpus(a.path(), "7");
    tiny_corpus(b.path(), "7");
    tiny_corpus(c.path(), "8");
    for f in ["noisy.tsv", "clean.tsv", "test.tsv", "lexicon.tsv"] {
        let x = fs::read(a.path().join(f)).unwrap();
        assert!(!x.is_empty(), "{f}");
        assert_eq!(x, fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_ne!(
        fs::read(a.path().join("noisy.tsv")).unwrap(),
        fs::read(c.path().join("noisy.tsv")).unwrap()
    );
}

#[test]
fn eval_bleu_identical_files_is_100() {
    let d = tempfile::tempdir().unwrap();
    let f = d.path().join("refs.txt");
    fs::write(&f, "a b c d e\nthe cat sat on the mat\n").unwrap();
    let out = ok(&["eval-bleu", "--candidates", p(&f), "--references", p(&f)]);
    assert!(out.starts_with("BLEU = 100.00"), "{out}");
    assert!(out.contains("bleu=100.000000"), "{out}");
}

#[test]
fn eval_bleu_count_mismatch_is_data_error() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a.txt");
    let b = d.path().join("b.txt");
    fs::write(&a, "x y\n").unwrap();
    fs::write(&b, "x y\nz\n").unwrap();
    assert_eq!(run(&["eval-bleu", "--candidates", p(&a), "--references", p(&b)]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["eval-bleu", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "--out", p(&d.path().join("m"))]).status.code(), Some(1));
}

#[test]
fn help_exits_0() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for sub in ["gen-corpus", "train", "distill", "translate", "detect-lang", "translit", "eval-bleu", "bench-latency", "analyze-xattn", "train-langid"] {
        assert!(text.contains(sub), "{sub}");
    }
}

#[test]
fn missing_input_is_data_error() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["translate", "--model", p(&d.path().join("absent.ckpt")), "--input", p(&d.path().join("q"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_is_deterministic_and_beam_1_is_greedy() {
    let d = tempfile::tempdir().unwrap();
    tiny_corpus(d.path(), "1");
    let a = tiny_model(d.path(), "a.ckpt");
    let b = tiny_model(d.path(), "b.ckpt");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let report = fs::read_to_string(d.path().join("a.ckpt.report")).unwrap();
    assert!(report.contains("stage=1 epoch=1"), "{report}");
    assert!(report.contains("stage=2 epoch=0"), "{report}");

    let queries = d.path().join("q.txt");
    let test = fs::read_to_string(d.path().join("test.tsv")).unwrap();
    let srcs: Vec<&str> = test.lines().map(|l| l.split('\t').next().unwrap()).collect();
    fs::write(&queries, srcs.join("\n")).unwrap();
    let out = ok(&["translate", "--model", p(&a), "--input", p(&queries), "--beam", "1"]);
    let model = load_checkpoint(&a).unwrap();
    let got: Vec<&str> = out.lines().collect();
    assert_eq!(got.len(), srcs.len());
    for (s, g) in srcs.iter().zip(&got) {
        let mut ids = model.vocab().encode(s);
        ids.push(EOS);
        let want = model.vocab().decode(&greedy_decode(&model, &ids, 32).unwrap());
        assert_eq!(*g, want);
    }
    let beam = ok(&["translate", "--model", p(&a), "--input", p(&queries)]);
    assert_eq!(beam.lines().count(), srcs.len());
}

#[test]
fn distill_writes_dense_and_quantized_students() {
    let d = tempfile::tempdir().unwrap();
    tiny_corpus(d.path(), "2");
    let teacher = tiny_model(d.path(), "t.ckpt");
    let s = d.path().join("s.ckpt");
    let q = d.path().join("s.int8");
    let clean = d.path().join("clean.tsv");
    let noisy = d.path().join("noisy.tsv");
    let args = [
        "distill",
        "--teacher",
        p(&teacher),
        "--clean",
        p(&clean),
        "--sources",
        p(&noisy),
        "--epochs",
        "1",
        "--out",
        p(&s),
        "--quantized-out",
        p(&q),
    ];
    let report = ok(&args);
    assert!(report.contains("stage=3 epoch=1"), "{report}");
    let dense = fs::read(&s).unwrap();
    let quant = fs::read(&q).unwrap();
    ok(&args);
    assert_eq!(dense, fs::read(&s).unwrap());
    assert_eq!(quant, fs::read(&q).unwrap());

    let queries = d.path().join("q.txt");
    fs::write(&queries, "a\n").unwrap();
    let out = ok(&["translate", "--model", p(&q), "--input", p(&queries), "--beam", "2"]);
    assert_eq!(out.lines().count(), 1);
    assert_eq!(run(&["distill", "--teacher", p(&teacher), "--clean", p(&d.path().join("clean.tsv")), "--sources", p(&d.path().join("noisy.tsv")), "--kd", "kl", "--out", p(&s)]).status.code(), Some(1));
}

#[test]
fn langid_train_and_detect() {
    let d = tempfile::tempdir().unwrap();
    ok(&["gen-langid", "--out-dir", p(d.path()), "--n-queries", "300", "--seed", "4"]);
    let model = d.path().join("crf.txt");
    let train = d.path().join("train.conll");
    let test = d.path().join("test.conll");
    let args = [
        "train-langid",
        "--train",
        p(&train),
        "--test",
        p(&test),
        "--epochs",
        "3",
        "--out",
        p(&model),
    ];
    let out = ok(&args);
    assert!(out.starts_with("precision="), "{out}");
    let first = fs::read(&model).unwrap();
    ok(&args);
    assert_eq!(first, fs::read(&model).unwrap());

    let q = d.path().join("q.txt");
    fs::write(&q, "alpha beta\nx\n").unwrap();
    let tagged = ok(&["detect-lang", "--model", p(&model), "--input", p(&q)]);
    let rows: Vec<&str> = tagged.lines().collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let (lang, tags) = r.split_once('\t').unwrap();
        assert!(["ENGLISH", "HINGLISH", "OTHER"].contains(&lang), "{r}");
        assert!(!tags.is_empty());
    }
}

#[test]
fn translit_dictionary_only() {
    let d = tempfile::tempdir().unwrap();
    let dict = d.path().join("dict.tsv");
    fs::write(&dict, "kya\tक्या\nhai\tहै\n").unwrap();
    let out = ok(&["translit", "--dict", p(&dict), "--text", "Kya hai"]);
    assert_eq!(out, "क्या है\n");
    let o = run(&["translit", "--dict", p(&dict), "--text", "kya bhai"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn translit_with_trained_model() {
    let d = tempfile::tempdir().unwrap();
    let pairs = d.path().join("pairs.tsv");
    fs::write(&pairs, "ab\tba\nabc\tcba\n").unwrap();
    let m = d.path().join("tr.ckpt");
    ok(&["train-translit", "--pairs", p(&pairs), "--epochs", "2", "--out", p(&m)]);
    let dict = d.path().join("dict.tsv");
    fs::write(&dict, "hai\tहै\n").unwrap();
    let out = ok(&["translit", "--dict", p(&dict), "--model", p(&m), "--text", "hai abc"]);
    assert!(out.starts_with("है"), "{out}");
}
