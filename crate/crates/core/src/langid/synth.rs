use std::collections::BTreeSet;

use super::{Label, LabeledQuery, LabeledToken};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Two toy languages with distinct phonotactics, a shared ambiguous word
/// list whose label follows the query's language, and alphanumeric OT
/// tokens. Test queries may draw words never seen in training.
#[derive(Clone, Debug, PartialEq)]
pub struct LangidBenchSpec {
    pub n_queries: usize,
    pub test_fraction: f64,
    pub en_words: usize,
    pub hi_words: usize,
    pub shared_words: usize,
    pub other_tokens: usize,
    /// Fraction of each lexicon available to training queries.
    pub seen_fraction: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub seed: u64,
}

impl Default for LangidBenchSpec {
    fn default() -> Self {
        Self {
            n_queries: 5000,
            test_fraction: 0.2,
            en_words: 300,
            hi_words: 300,
            shared_words: 40,
            other_tokens: 60,
            seen_fraction: 0.6,
            min_words: 2,
            max_words: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LangidBenchmark {
    pub train: Vec<LabeledQuery>,
    pub test: Vec<LabeledQuery>,
}

const EN_ONSETS: &[&str] = &["b", "c", "d", "f", "g", "l", "m", "p", "r", "s", "t", "w", "st", "tr", "pl", "gr", "th", "wh", "sp"];
const EN_VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "oo", "ou"];
const EN_CODAS: &[&str] = &["", "n", "t", "r", "ck", "ng", "ll", "ss", "x", "rt", "nd"];
const EN_SUFFIXES: &[&str] = &["", "", "s", "ing", "er", "ed", "ly"];
const HI_ONSETS: &[&str] = &["k", "kh", "g", "ch", "j", "t", "d", "n", "p", "bh", "m", "y", "r", "l", "v", "sh", "h", "dh"];
const HI_VOWELS: &[&str] = &["a", "aa", "i", "ee", "u", "oo", "e", "ai", "o"];
const HI_SUFFIXES: &[&str] = &["", "", "na", "ka", "ki", "ke", "wala", "hai", "ne", "ji"];

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len())]
}

fn en_word(rng: &mut Rng) -> String {
    let mut w = String::new();
    for _ in 0..1 + rng.below(2) {
        w.push_str(pick(rng, EN_ONSETS));
        w.push_str(pick(rng, EN_VOWELS));
        w.push_str(pick(rng, EN_CODAS));
    }
    w.push_str(pick(rng, EN_SUFFIXES));
    w
}

fn hi_word(rng: &mut Rng) -> String {
    let mut w = String::new();
    for _ in 0..1 + rng.below(3) {
        w.push_str(pick(rng, HI_ONSETS));
        w.push_str(pick(rng, HI_VOWELS));
    }
    w.push_str(pick(rng, HI_SUFFIXES));
    w
}

fn other_token(rng: &mut Rng) -> String {
    let letters = "abcdefghijklmnopqrstuvwxyz".as_bytes();
    let mut w = String::new();
    for _ in 0..rng.below(4) {
        w.push(letters[rng.below(26)] as char);
    }
    for _ in 0..1 + rng.below(3) {
        w.push(char::from(b'0' + rng.below(10) as u8));
    }
    if rng.bernoulli(0.2) {
        w.push(['+', '&', '-'][rng.below(3)]);
    }
    w
}

fn lexicon(rng: &mut Rng, n: usize, taken: &mut BTreeSet<String>, gen: fn(&mut Rng) -> String) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n {
        tries += 1;
        assert!(tries < 1000 * (n + 1), "lexicon generator exhausted");
        let w = gen(rng);
        if w.len() >= 2 && taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Pools {
    en: Vec<String>,
    hi: Vec<String>,
    shared: Vec<String>,
    other: Vec<String>,
}

impl Pools {
    fn seen(&self, f: f64) -> Self {
        let cut = |v: &Vec<String>| v[..((v.len() as f64 * f).ceil() as usize).clamp(1, v.len())].to_vec();
        Self {
            en: cut(&self.en),
            hi: cut(&self.hi),
            shared: cut(&self.shared),
            other: cut(&self.other),
        }
    }
}

fn query(rng: &mut Rng, p: &Pools, spec: &LangidBenchSpec) -> LabeledQuery {
    let n = spec.min_words + rng.below(spec.max_words - spec.min_words + 1);
    // 0 = English, 1 = Hinglish, 2 = English with OT tokens.
    let kind = match rng.uniform() {
        u if u < 0.45 => 0,
        u if u < 0.9 => 1,
        _ => 2,
    };
    let hi_share = 0.2 + 0.5 * rng.uniform();
    let mut tokens: Vec<LabeledToken> = (0..n)
        .map(|_| {
            let u = rng.uniform();
            let (w, l) = if u < 0.12 && !p.shared.is_empty() {
                let l = if kind == 1 { Label::Hi } else { Label::En };
                (p.shared[rng.below(p.shared.len())].clone(), l)
            } else if u < 0.17 || (kind == 2 && u < 0.4) {
                (p.other[rng.below(p.other.len())].clone(), Label::Ot)
            } else if kind == 1 && rng.bernoulli(hi_share) {
                (p.hi[rng.below(p.hi.len())].clone(), Label::Hi)
            } else {
                (p.en[rng.below(p.en.len())].clone(), Label::En)
            };
            LabeledToken { word: w, label: l }
        })
        .collect();
    if kind == 1 && !tokens.iter().any(|t| t.label == Label::Hi) {
        let i = rng.below(n);
        tokens[i] = LabeledToken {
            word: p.hi[rng.below(p.hi.len())].clone(),
            label: Label::Hi,
        };
    }
    LabeledQuery { tokens }
}

/// Train/test token-labelled query sets; fully determined by `spec`.
pub fn gen_langid_benchmark(spec: &LangidBenchSpec) -> Result<LangidBenchmark> {
    if spec.min_words == 0 || spec.max_words < spec.min_words {
        return Err(Error::InvalidArgument(format!(
            "word range {}..={}",
            spec.min_words, spec.max_words
        )));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) || !(spec.seen_fraction > 0.0 && spec.seen_fraction <= 1.0) {
        return Err(Error::InvalidArgument("test_fraction / seen_fraction out of range".into()));
    }
    if spec.en_words == 0 || spec.hi_words == 0 || spec.other_tokens == 0 {
        return Err(Error::InvalidArgument("lexicons must be non-empty".into()));
    }
    let root = Rng::new(spec.seed);
    let mut lex = root.fork(0);
    let mut taken = BTreeSet::new();
    let en = lexicon(&mut lex, spec.en_words, &mut taken, en_word);
    let hi = lexicon(&mut lex, spec.hi_words, &mut taken, hi_word);
    let half = spec.shared_words / 2;
    let mut shared = lexicon(&mut lex, half, &mut taken, en_word);
    shared.extend(lexicon(&mut lex, spec.shared_words - half, &mut taken, hi_word));
    let other = lexicon(&mut lex, spec.other_tokens, &mut taken, other_token);
    let all = Pools { en, hi, shared, other };
    let seen = all.seen(spec.seen_fraction);
    let n_test = (spec.n_queries as f64 * spec.test_fraction).round() as usize;
    let mut rtrain = root.fork(1);
    let mut rtest = root.fork(2);
    Ok(LangidBenchmark {
        train: (0..spec.n_queries - n_test).map(|_| query(&mut rtrain, &seen, spec)).collect(),
        test: (0..n_test).map(|_| query(&mut rtest, &all, spec)).collect(),
    })
}
