//! `codemix` command-line tool.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use codemix::distill::{
    bench_latency, generate_pseudo_labels, quantize_model, train_student, KdKind, QuantizedModel,
    StudentConfig,
};
use codemix::eval::{ae_xattn_experiment, bleu_corpus};
use codemix::langid::{
    aggregate_labels, eval_prf, gen_langid_benchmark, load_token_corpus, split_query, train_crf,
    write_token_corpus, CrfModel, CrfTrainConfig, LangidBenchSpec, QueryLanguage,
};
use codemix::numerics::Rng;
use codemix::seq2seq::{
    load_checkpoint, model_from_container, save_checkpoint, translate_text, Container,
    Seq2SeqConfig, Translator,
};
use codemix::text::{
    load_parallel_tsv, write_parallel_tsv, Corpus, Provenance, SynthTask, SynthTaskSpec,
    STREAM_CLEAN, STREAM_TEST, STREAM_TRAIN,
};
use codemix::train::{parse_kv, train_pipeline, translation_vocab, TrainingConfig};
use codemix::translit::{hybrid_transliterate, train_translit, CharSeq2Seq, TranslitDict, TranslitTrainConfig};

#[derive(Parser)]
#[command(name = "codemix", version, about = "Code-mix query translation toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic translation benchmark as TSV files.
    GenCorpus(GenCorpus),
    /// Two-stage training from a key=value config file.
    Train(Train),
    /// Distil a teacher checkpoint into a smaller student.
    Distill(Distill),
    /// Translate one query per line.
    Translate(Translate),
    /// Label queries as ENGLISH, HINGLISH or OTHER with a CRF model.
    DetectLang(DetectLang),
    /// Dictionary-first transliteration with an optional char model.
    Translit(Translit),
    /// Train a char-level transliteration model from word pairs.
    TrainTranslit(TrainTranslit),
    /// Corpus BLEU of a candidate file against a reference file.
    EvalBleu(EvalBleu),
    /// Beam-3 decoding latency percentiles.
    BenchLatency(BenchLatency),
    /// Cross-attention identity error per decoder layer under AE training.
    AnalyzeXattn(AnalyzeXattn),
    /// Generate the synthetic token-labelled language-id benchmark.
    GenLangid(GenLangid),
    /// Train the CRF language tagger.
    TrainLangid(TrainLangid),
}

#[derive(Args)]
struct GenCorpus {
    /// Output directory for noisy.tsv, clean.tsv, test.tsv and lexicon.tsv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Noisy pseudo-labelled training pairs.
    #[arg(long, default_value_t = 20000)]
    n_noisy: usize,
    /// Clean manually-labelled pairs.
    #[arg(long, default_value_t = 2000)]
    n_clean: usize,
    #[arg(long, default_value_t = 1000)]
    test_size: usize,
    #[arg(long, default_value_t = 100)]
    lexicon_size: usize,
    #[arg(long, default_value_t = 0.3)]
    code_mix_ratio: f64,
    /// Per-word probability of dropping an interior character.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Per-word pseudo-label error rate of the noisy pool.
    #[arg(long, default_value_t = 0.05)]
    pseudo_error: f64,
    #[arg(long, default_value_t = 2)]
    min_words: usize,
    #[arg(long, default_value_t = 6)]
    max_words: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Train {
    /// key=value lines; `model.*` keys set the architecture.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Noisy pseudo-labelled pairs for stage 1.
    #[arg(long)]
    noisy: Option<PathBuf>,
    /// Clean pairs for stage 2.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training report path (default: stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Distill {
    #[arg(long)]
    teacher: PathBuf,
    /// Clean pairs for the supervised and augmentation losses.
    #[arg(long)]
    clean: PathBuf,
    /// Unlabelled queries, one per line (a TSV's first column is used).
    #[arg(long)]
    sources: PathBuf,
    #[arg(long, default_value_t = 1)]
    enc_layers: usize,
    #[arg(long, default_value_t = 1)]
    dec_layers: usize,
    /// js or ce.
    #[arg(long, default_value = "js")]
    kd: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Beam width for teacher pseudo-labels.
    #[arg(long, default_value_t = 3)]
    beam: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write an int8 checkpoint here.
    #[arg(long)]
    quantized_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Translate {
    /// Dense or int8 checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Input queries (default: stdin).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Beam width; 1 is greedy decoding.
    #[arg(long, default_value_t = 3)]
    beam: usize,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
}

#[derive(Args)]
struct DetectLang {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct Translit {
    /// word<TAB>transliteration file.
    #[arg(long)]
    dict: PathBuf,
    /// Char-level checkpoint for words missing from the dictionary.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Text to transliterate (default: lines of --input or stdin).
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct TrainTranslit {
    /// word<TAB>transliteration training pairs.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalBleu {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    references: PathBuf,
}

#[derive(Args)]
struct BenchLatency {
    #[arg(long)]
    model: PathBuf,
    /// Queries to cycle through, one per line.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Label for the report (default: checkpoint file name).
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
struct AnalyzeXattn {
    /// Noisy pairs used for AE-only training.
    #[arg(long)]
    train: PathBuf,
    /// Pairs whose targets form the AE validation set.
    #[arg(long)]
    val: PathBuf,
    /// key=value training and `model.*` overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    dec_layers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenLangid {
    /// Output directory for train.conll and test.conll.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5000)]
    n_queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainLangid {
    /// Token-labelled CoNLL-style corpus.
    #[arg(long)]
    train: PathBuf,
    /// Optional held-out corpus; prints HINGLISH precision/recall/F1.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Data(String),
}

impl From<codemix::Error> for Failure {
    fn from(e: codemix::Error) -> Self {
        match e {
            codemix::Error::InvalidArgument(m) => Failure::Usage(m),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out = match cli.cmd {
        Cmd::GenCorpus(a) => gen_corpus(a),
        Cmd::Train(a) => train(a),
        Cmd::Distill(a) => distill(a),
        Cmd::Translate(a) => translate(a),
        Cmd::DetectLang(a) => detect_lang(a),
        Cmd::Translit(a) => translit(a),
        Cmd::TrainTranslit(a) => train_translit_cmd(a),
        Cmd::EvalBleu(a) => eval_bleu(a),
        Cmd::BenchLatency(a) => bench(a),
        Cmd::AnalyzeXattn(a) => analyze_xattn(a),
        Cmd::GenLangid(a) => gen_langid(a),
        Cmd::TrainLangid(a) => train_langid(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn read_input(path: Option<&Path>) -> io::Result<String> {
    match path {
        Some(p) => fs::read_to_string(p),
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn lines(text: &str) -> Vec<&str> {
    text.lines().collect()
}

/// Splits a config file into training pairs and `model.*` overrides.
fn load_config(path: Option<&Path>) -> Result<(TrainingConfig, Vec<(String, String)>), Failure> {
    let mut cfg = TrainingConfig::default();
    let mut model = Vec::new();
    if let Some(p) = path {
        for (k, v) in parse_kv(&fs::read_to_string(p)?)? {
            match k.strip_prefix("model.") {
                Some(m) => model.push((m.to_string(), v)),
                None => cfg.apply_pair(&k, &v)?,
            }
        }
    }
    cfg.validate()?;
    Ok((cfg, model))
}

fn load_translator(path: &Path) -> Result<Box<dyn Translator>, Failure> {
    let c = Container::read(path)?;
    match c.get_meta("kind") {
        Some("seq2seq-int8") => Ok(Box::new(QuantizedModel::from_container(&c)?)),
        _ => Ok(Box::new(model_from_container(&c)?)),
    }
}

fn gen_corpus(a: GenCorpus) -> CliResult {
    let spec = SynthTaskSpec {
        lexicon_size: a.lexicon_size,
        code_mix_ratio: a.code_mix_ratio,
        noise_char_drop_prob: a.noise,
        pseudo_label_error_rate: a.pseudo_error,
        min_words: a.min_words,
        max_words: a.max_words,
        test_size: a.test_size,
        seed: a.seed,
    };
    let task = SynthTask::new(spec)?;
    fs::create_dir_all(&a.out_dir)?;
    let noisy = task.sample(a.n_noisy, task.params(Provenance::NoisyPseudo), STREAM_TRAIN);
    let clean = task.sample(a.n_clean, task.params(Provenance::CleanManual), STREAM_CLEAN);
    let test = task.sample(a.test_size, task.params(Provenance::CleanManual), STREAM_TEST);
    write_parallel_tsv(&noisy, a.out_dir.join("noisy.tsv"))?;
    write_parallel_tsv(&clean, a.out_dir.join("clean.tsv"))?;
    write_parallel_tsv(&test, a.out_dir.join("test.tsv"))?;
    let mut lex = String::new();
    for (s, t) in task.lexicon.source_words.iter().zip(&task.lexicon.target_words) {
        lex.push_str(&format!("{s}\t{t}\n"));
    }
    fs::write(a.out_dir.join("lexicon.tsv"), lex)?;
    Ok(())
}

fn train(a: Train) -> CliResult {
    if a.noisy.is_none() && a.clean.is_none() {
        return Err(Failure::Usage("give --noisy, --clean or both".into()));
    }
    let (cfg, model_pairs) = load_config(a.config.as_deref())?;
    let noisy = a
        .noisy
        .as_ref()
        .map(|p| load_parallel_tsv(p, Provenance::NoisyPseudo))
        .transpose()?;
    let clean = a
        .clean
        .as_ref()
        .map(|p| load_parallel_tsv(p, Provenance::CleanManual))
        .transpose()?;
    let pools: Vec<&Corpus> = noisy.iter().chain(clean.iter()).collect();
    let mut mcfg = Seq2SeqConfig::new(translation_vocab(&pools)?);
    for (k, v) in &model_pairs {
        mcfg.apply_pair(k, v)?;
    }
    let (model, reports) = train_pipeline(mcfg, noisy.as_ref(), clean.as_ref(), &cfg)?;
    save_checkpoint(&model, &a.out)?;
    let text: String = reports.iter().map(|r| r.to_lines()).collect();
    match a.report {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn distill(a: Distill) -> CliResult {
    let kd = KdKind::parse(&a.kd)?;
    let teacher = load_checkpoint(&a.teacher)?;
    let clean = load_parallel_tsv(&a.clean, Provenance::CleanManual)?;
    let text = fs::read_to_string(&a.sources)?;
    let sources: Vec<&str> = text
        .lines()
        .map(|l| l.split('\t').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .collect();
    let max_len = teacher.config().max_len;
    let pseudo = generate_pseudo_labels(&teacher, &sources, a.beam, max_len);
    for (i, e) in &pseudo.failed {
        eprintln!("warning: no pseudo-label for source {}: {e}", i + 1);
    }
    let student_cfg = teacher.config().clone().with_layers(a.enc_layers, a.dec_layers);
    let cfg = StudentConfig {
        epochs: a.epochs,
        lr: a.lr,
        kd,
        lambda: a.lambda,
        ..Default::default()
    };
    let (student, report) = train_student(
        student_cfg,
        &teacher,
        &clean,
        &pseudo.corpus,
        &cfg,
        &mut Rng::new(a.seed),
    )?;
    save_checkpoint(&student, &a.out)?;
    if let Some(q) = &a.quantized_out {
        quantize_model(&student)?.save(q)?;
    }
    print!("{}", report.to_lines());
    Ok(())
}

fn translate(a: Translate) -> CliResult {
    if a.beam == 0 {
        return Err(Failure::Usage("--beam must be at least 1".into()));
    }
    let model = load_translator(&a.model)?;
    let text = read_input(a.input.as_deref())?;
    let mut out = io::stdout().lock();
    for q in lines(&text) {
        let t = translate_text(model.as_ref(), q, a.beam, a.max_len)?;
        writeln!(out, "{t}")?;
    }
    Ok(())
}

fn detect_lang(a: DetectLang) -> CliResult {
    let crf = CrfModel::load(&a.model)?;
    let text = read_input(a.input.as_deref())?;
    let mut out = io::stdout().lock();
    for q in lines(&text) {
        let words = split_query(q)?;
        let labels = crf.viterbi(&words)?;
        let lang = aggregate_labels(&labels)?;
        let tags: Vec<&str> = labels.iter().map(|l| l.as_str()).collect();
        writeln!(out, "{}\t{}", lang.as_str(), tags.join(" "))?;
    }
    Ok(())
}

fn translit(a: Translit) -> CliResult {
    let dict = TranslitDict::load(&a.dict)?;
    let model = match &a.model {
        Some(p) => Some(CharSeq2Seq::new(load_checkpoint(p)?)?),
        None => None,
    };
    let text = match a.text {
        Some(t) => t,
        None => read_input(a.input.as_deref())?,
    };
    let mut out = io::stdout().lock();
    for q in lines(&text) {
        let t = hybrid_transliterate(q, &dict, model.as_ref())?;
        writeln!(out, "{}", t.text)?;
    }
    Ok(())
}

fn train_translit_cmd(a: TrainTranslit) -> CliResult {
    let dict = TranslitDict::load(&a.pairs)?;
    let pairs: Vec<(String, String)> = dict.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let cfg = TranslitTrainConfig {
        epochs: a.epochs,
        ..Default::default()
    };
    let m = train_translit(&pairs, &cfg, &mut Rng::new(a.seed))?;
    save_checkpoint(&m.model, &a.out)?;
    Ok(())
}

fn eval_bleu(a: EvalBleu) -> CliResult {
    let c = fs::read_to_string(&a.candidates)?;
    let r = fs::read_to_string(&a.references)?;
    let report = bleu_corpus(&lines(&c), &lines(&r)).map_err(|e| Failure::Data(e.to_string()))?;
    println!("{}", report.to_text());
    println!("{}", report.to_record());
    Ok(())
}

fn bench(a: BenchLatency) -> CliResult {
    let model = load_translator(&a.model)?;
    let text = fs::read_to_string(&a.queries)?;
    let queries: Vec<String> = text
        .lines()
        .map(|l| l.split('\t').next().unwrap_or("").trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let id = a.id.unwrap_or_else(|| {
        a.model
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let report = bench_latency(model.as_ref(), &queries, a.warmup, a.samples, &id)?;
    println!("{}", report.to_text());
    Ok(())
}

fn analyze_xattn(a: AnalyzeXattn) -> CliResult {
    let (cfg, model_pairs) = load_config(a.config.as_deref())?;
    let train = load_parallel_tsv(&a.train, Provenance::NoisyPseudo)?;
    let val = load_parallel_tsv(&a.val, Provenance::CleanManual)?;
    let mut mcfg = Seq2SeqConfig::new(translation_vocab(&[&train, &val])?);
    mcfg.n_dec_layers = a.dec_layers;
    for (k, v) in &model_pairs {
        mcfg.apply_pair(k, v)?;
    }
    let curve = ae_xattn_experiment(&mcfg, &cfg, &train, &val, a.seed)?;
    print!("{}", curve.to_records());
    Ok(())
}

fn gen_langid(a: GenLangid) -> CliResult {
    let spec = LangidBenchSpec {
        n_queries: a.n_queries,
        seed: a.seed,
        ..Default::default()
    };
    let b = gen_langid_benchmark(&spec)?;
    fs::create_dir_all(&a.out_dir)?;
    write_token_corpus(&a.out_dir.join("train.conll"), &b.train)?;
    write_token_corpus(&a.out_dir.join("test.conll"), &b.test)?;
    Ok(())
}

fn train_langid(a: TrainLangid) -> CliResult {
    let corpus = load_token_corpus(&a.train)?;
    let cfg = CrfTrainConfig {
        l2: a.l2,
        epochs: a.epochs,
        ..Default::default()
    };
    let crf = train_crf(&corpus, &cfg, &mut Rng::new(a.seed))?;
    crf.save(&a.out)?;
    if let Some(t) = &a.test {
        let test = load_token_corpus(t)?;
        let mut pred = Vec::with_capacity(test.len());
        let mut gold = Vec::with_capacity(test.len());
        for q in &test {
            let words = q.words();
            pred.push(aggregate_labels(&crf.viterbi(&words)?)?);
            gold.push(q.query_language()?);
        }
        let prf = eval_prf(&pred, &gold, QueryLanguage::Hinglish)?;
        println!(
            "precision={:.4} recall={:.4} f1={:.4}",
            prf.precision, prf.recall, prf.f1
        );
    }
    Ok(())
}
