//! Synthetic code-mix benchmark: a toy source language with a bijective
//! lexicon into a target language, code-mixing, spelling noise and noisy
//! pseudo-labels.

use std::collections::HashSet;

use super::corpus::{Corpus, ParallelExample, Provenance};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTaskSpec {
    pub lexicon_size: usize,
    pub code_mix_ratio: f64,
    pub noise_char_drop_prob: f64,
    pub pseudo_label_error_rate: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        Self {
            lexicon_size: 100,
            code_mix_ratio: 0.3,
            noise_char_drop_prob: 0.1,
            pseudo_label_error_rate: 0.05,
            min_words: 2,
            max_words: 6,
            test_size: 1000,
            seed: 0,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} = {x} outside [0, 1]")))
            }
        };
        unit("code_mix_ratio", self.code_mix_ratio)?;
        unit("noise_char_drop_prob", self.noise_char_drop_prob)?;
        unit("pseudo_label_error_rate", self.pseudo_label_error_rate)?;
        if self.lexicon_size < 2 {
            return Err(Error::InvalidArgument("lexicon_size must be at least 2".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::InvalidArgument(format!(
                "sentence length range [{}, {}]",
                self.min_words, self.max_words
            )));
        }
        Ok(())
    }
}

/// Index-aligned bijection `source_words[i] ↔ target_words[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub source_words: Vec<String>,
    pub target_words: Vec<String>,
}

impl Lexicon {
    pub fn len(&self) -> usize {
        self.source_words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_words.is_empty()
    }

    pub fn translate_word(&self, word: &str) -> Option<&str> {
        self.source_words
            .iter()
            .position(|w| w == word)
            .map(|i| self.target_words[i].as_str())
    }
}

const SRC_CONSONANTS: &[u8] = b"bdghjklmnprstvw";
const SRC_VOWELS: &[u8] = b"aeiou";
const TGT_ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "w", "br", "cl", "cr",
    "dr", "fl", "gr", "pl", "pr", "sh", "sl", "sp", "st", "tr",
];
const TGT_VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "oo", "ai", "y"];
const TGT_CODAS: &[&str] = &[
    "", "ck", "ft", "ll", "lt", "nd", "ng", "nk", "rt", "sh", "st", "th", "x", "r", "n", "t",
];

fn pick<'a, T>(rng: &mut Rng, items: &'a [T]) -> &'a T {
    &items[rng.below(items.len())]
}

fn toy_source_word(rng: &mut Rng) -> String {
    let syllables = 2 + rng.below(2);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*pick(rng, SRC_CONSONANTS) as char);
        w.push(*pick(rng, SRC_VOWELS) as char);
    }
    if rng.bernoulli(0.3) {
        w.push(*pick(rng, SRC_CONSONANTS) as char);
    }
    w
}

fn toy_target_word(rng: &mut Rng) -> String {
    let mut w = String::new();
    let syllables = 1 + rng.below(2);
    for _ in 0..syllables {
        w.push_str(pick(rng, TGT_ONSETS));
        w.push_str(pick(rng, TGT_VOWELS));
    }
    w.push_str(pick(rng, TGT_CODAS));
    w
}

/// Deletes one interior character (never the first or last). Words with
/// fewer than three characters are returned unchanged as `None`.
pub fn drop_interior_char(word: &str, rng: &mut Rng) -> Option<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() < 3 {
        return None;
    }
    let at = 1 + rng.below(chars.len() - 2);
    Some(
        chars
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != at)
            .map(|(_, c)| c)
            .collect(),
    )
}

/// All distinct single interior-character deletions of `word`.
pub fn interior_drop_variants(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() < 3 {
        return Vec::new();
    }
    let mut out: Vec<String> = (1..chars.len() - 1)
        .map(|at| {
            chars
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != at)
                .map(|(_, c)| c)
                .collect()
        })
        .collect();
    out.dedup();
    out
}

/// Per-draw knobs; the lexicon stays fixed across draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleParams {
    pub code_mix_ratio: f64,
    pub noise_char_drop_prob: f64,
    pub pseudo_label_error_rate: f64,
    pub provenance: Provenance,
}

#[derive(Clone, Debug)]
pub struct SynthTask {
    pub spec: SynthTaskSpec,
    pub lexicon: Lexicon,
}

/// Stream ids used by [`gen_synthetic_corpus`].
pub const STREAM_LEXICON: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_TEST: u64 = 2;
pub const STREAM_CLEAN: u64 = 3;

impl SynthTask {
    pub fn new(spec: SynthTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(spec.seed).fork(STREAM_LEXICON);
        let mut seen = HashSet::new();
        let mut draw = |gen: fn(&mut Rng) -> String, rng: &mut Rng| loop {
            let w = gen(rng);
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let mut source_words = Vec::with_capacity(spec.lexicon_size);
        let mut target_words = Vec::with_capacity(spec.lexicon_size);
        for _ in 0..spec.lexicon_size {
            source_words.push(draw(toy_source_word, &mut rng));
            target_words.push(draw(toy_target_word, &mut rng));
        }
        Ok(Self {
            spec,
            lexicon: Lexicon {
                source_words,
                target_words,
            },
        })
    }

    pub fn params(&self, provenance: Provenance) -> SampleParams {
        SampleParams {
            code_mix_ratio: self.spec.code_mix_ratio,
            noise_char_drop_prob: self.spec.noise_char_drop_prob,
            pseudo_label_error_rate: match provenance {
                Provenance::NoisyPseudo => self.spec.pseudo_label_error_rate,
                Provenance::CleanManual => 0.0,
            },
            provenance,
        }
    }

    /// `n` sentence pairs from an independent stream of the task seed.
    pub fn sample(&self, n: usize, params: SampleParams, stream: u64) -> Corpus {
        let mut rng = Rng::new(self.spec.seed).fork(stream);
        let k = self.lexicon.len();
        let span = self.spec.max_words - self.spec.min_words + 1;
        let mut examples = Vec::with_capacity(n);
        for _ in 0..n {
            let len = self.spec.min_words + rng.below(span);
            let mut clean = Vec::with_capacity(len);
            let mut noisy = Vec::with_capacity(len);
            let mut target = Vec::with_capacity(len);
            for _ in 0..len {
                let i = rng.below(k);
                let mixed = rng.bernoulli(params.code_mix_ratio);
                let word = if mixed {
                    &self.lexicon.target_words[i]
                } else {
                    &self.lexicon.source_words[i]
                };
                clean.push(word.clone());
                let corrupt = rng.bernoulli(params.noise_char_drop_prob);
                let noised = if corrupt {
                    drop_interior_char(word, &mut rng)
                } else {
                    None
                };
                noisy.push(noised.unwrap_or_else(|| word.clone()));
                let wrong = rng.bernoulli(params.pseudo_label_error_rate);
                let j = if wrong {
                    let off = 1 + rng.below(k - 1);
                    (i + off) % k
                } else {
                    i
                };
                target.push(self.lexicon.target_words[j].clone());
            }
            examples.push(ParallelExample {
                source: noisy.join(" "),
                target: target.join(" "),
                provenance: params.provenance,
                clean_source: Some(clean.join(" ")),
            });
        }
        Corpus::new(examples)
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub lexicon: Lexicon,
    pub train: Corpus,
    pub test: Corpus,
}

/// `n` noisy pseudo-labelled pairs plus a `spec.test_size` clean test split.
pub fn gen_synthetic_corpus(spec: &SynthTaskSpec, n: usize) -> Result<SynthCorpus> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be positive".into()));
    }
    let task = SynthTask::new(spec.clone())?;
    let train = task.sample(n, task.params(Provenance::NoisyPseudo), STREAM_TRAIN);
    let test = task.sample(
        spec.test_size,
        task.params(Provenance::CleanManual),
        STREAM_TEST,
    );
    Ok(SynthCorpus {
        lexicon: task.lexicon,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(cmr: f64, noise: f64, q: f64) -> SynthTaskSpec {
        SynthTaskSpec {
            lexicon_size: 30,
            code_mix_ratio: cmr,
            noise_char_drop_prob: noise,
            pseudo_label_error_rate: q,
            test_size: 50,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn lexicon_is_bijection_of_distinct_words() {
        let task = SynthTask::new(spec(0.0, 0.0, 0.0)).unwrap();
        let all: HashSet<&String> = task
            .lexicon
            .source_words
            .iter()
            .chain(&task.lexicon.target_words)
            .collect();
        assert_eq!(all.len(), 60);
        assert!(all.iter().all(|w| w.chars().count() >= 3));
    }

    #[test]
    fn pure_task_is_exact_translation() {
        let c = gen_synthetic_corpus(&spec(0.0, 0.0, 0.0), 200).unwrap();
        for e in c.train.iter() {
            let words: Vec<&str> = e.source.split(' ').collect();
            assert!((2..=6).contains(&words.len()));
            let expect: Vec<&str> = words
                .iter()
                .map(|w| c.lexicon.translate_word(w).expect("pure toy source"))
                .collect();
            assert_eq!(e.target, expect.join(" "));
            assert_eq!(e.provenance, Provenance::NoisyPseudo);
        }
        assert!(c.test.iter().all(|e| e.provenance == Provenance::CleanManual));
    }

    #[test]
    fn full_mix_source_equals_target() {
        let c = gen_synthetic_corpus(&spec(1.0, 0.0, 0.0), 100).unwrap();
        assert!(c.train.iter().all(|e| e.source == e.target));
    }

    #[test]
    fn same_seed_identical() {
        let s = spec(0.3, 0.2, 0.1);
        let a = gen_synthetic_corpus(&s, 300).unwrap();
        let b = gen_synthetic_corpus(&s, 300).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn clean_labels_follow_unnoised_source() {
        let c = gen_synthetic_corpus(&spec(0.4, 0.5, 0.3), 300).unwrap();
        let map_word = |w: &str| -> String {
            c.lexicon
                .translate_word(w)
                .map(str::to_string)
                .unwrap_or_else(|| w.to_string())
        };
        for e in c.test.iter() {
            let clean = e.clean_source.as_ref().unwrap();
            let expect: Vec<String> = clean.split(' ').map(map_word).collect();
            assert_eq!(e.target, expect.join(" "));
        }
        // and noisy training labels do deviate somewhere
        let wrong = c
            .train
            .iter()
            .filter(|e| {
                let clean = e.clean_source.as_ref().unwrap();
                let expect: Vec<String> = clean.split(' ').map(map_word).collect();
                e.target != expect.join(" ")
            })
            .count();
        assert!(wrong > 0);
    }

    #[test]
    fn noise_only_touches_interior() {
        let c = gen_synthetic_corpus(&spec(0.3, 1.0, 0.0), 200).unwrap();
        for e in c.train.iter() {
            let clean = e.clean_source.as_ref().unwrap();
            for (n, w) in e.source.split(' ').zip(clean.split(' ')) {
                assert_eq!(n.chars().count() + 1, w.chars().count());
                assert_eq!(n.chars().next(), w.chars().next());
                assert_eq!(n.chars().last(), w.chars().last());
            }
        }
    }

    #[test]
    fn variants_enumeration() {
        let v = interior_drop_variants("battery");
        assert!(v.contains(&"bttery".to_string()));
        assert!(v.contains(&"battey".to_string()));
        assert!(v.iter().all(|w| w.starts_with('b') && w.ends_with('y')));
        assert!(interior_drop_variants("tv").is_empty());
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(SynthTask::new(spec(1.5, 0.0, 0.0)).is_err());
        assert!(gen_synthetic_corpus(&spec(0.0, 0.0, 0.0), 0).is_err());
    }
}
