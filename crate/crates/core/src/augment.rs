//! Denoising augmentations and the supervised/augmented loss mix.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Var};
use crate::seq2seq::SeqPair;
use crate::text::{
    interior_drop_variants, Corpus, ParallelExample, TokenMode, Vocab, MASK,
    SPECIAL_TOKENS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AugKind {
    AutoEncoder,
    Mask,
    DropChar,
    Permute,
}

impl AugKind {
    pub const ALL: [AugKind; 4] = [
        AugKind::AutoEncoder,
        AugKind::Mask,
        AugKind::DropChar,
        AugKind::Permute,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugKind::AutoEncoder => "autoencoder",
            AugKind::Mask => "mask",
            AugKind::DropChar => "dropchar",
            AugKind::Permute => "permute",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "autoencoder" | "ae" => Ok(AugKind::AutoEncoder),
            "mask" | "masking" => Ok(AugKind::Mask),
            "dropchar" => Ok(AugKind::DropChar),
            "permute" => Ok(AugKind::Permute),
            other => Err(Error::InvalidArgument(format!("unknown augmentation `{other}`"))),
        }
    }

    /// Comma-separated list; empty string gives no kinds.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(Self::parse)
            .collect()
    }

    pub fn list_to_string(kinds: &[AugKind]) -> String {
        kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(",")
    }
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn require(text: &str, side: &str) -> Result<()> {
    if text.split_whitespace().next().is_none() {
        Err(Error::Empty(format!("{side} text")))
    } else {
        Ok(())
    }
}

/// Reconstruct the target from itself.
pub fn aug_autoencoder(ex: &ParallelExample) -> Result<(String, String)> {
    require(&ex.target, "target")?;
    let t = words(&ex.target).join(" ");
    Ok((t.clone(), t))
}

/// One target word replaced by the mask token; output is the full target.
pub fn aug_mask(ex: &ParallelExample, rng: &mut Rng) -> Result<(String, String)> {
    require(&ex.target, "target")?;
    let w = words(&ex.target);
    let at = rng.below(w.len());
    let input: Vec<&str> = w
        .iter()
        .enumerate()
        .map(|(i, t)| if i == at { SPECIAL_TOKENS[MASK] } else { t })
        .collect();
    Ok((input.join(" "), w.join(" ")))
}

/// Source with interior characters dropped from a fraction
/// `f ~ U[0.3, 0.5]` of its words (rounded up); target unchanged.
pub fn aug_dropchar(ex: &ParallelExample, rng: &mut Rng) -> Result<(String, String)> {
    require(&ex.source, "source")?;
    let mut w: Vec<String> = words(&ex.source).into_iter().map(String::from).collect();
    let eligible: Vec<usize> = (0..w.len()).filter(|&i| w[i].chars().count() > 2).collect();
    let f = rng.uniform_range(0.3, 0.5);
    let want = ((f * w.len() as f64).ceil() as usize).clamp(1, w.len());
    let k = want.min(eligible.len());
    let mut pool = eligible;
    for j in 0..k {
        let pick = j + rng.below(pool.len() - j);
        pool.swap(j, pick);
        let i = pool[j];
        let chars: Vec<char> = w[i].chars().collect();
        let at = 1 + rng.below(chars.len() - 2);
        w[i] = chars
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != at)
            .map(|(_, ch)| ch)
            .collect();
    }
    Ok((w.join(" "), words(&ex.target).join(" ")))
}

/// Uniformly shuffled target words (the identity permutation included).
pub fn aug_permute(ex: &ParallelExample, rng: &mut Rng) -> Result<(String, String)> {
    require(&ex.target, "target")?;
    let w = words(&ex.target);
    let mut p = w.clone();
    rng.shuffle(&mut p);
    Ok((p.join(" "), w.join(" ")))
}

pub fn apply(kind: AugKind, ex: &ParallelExample, rng: &mut Rng) -> Result<(String, String)> {
    match kind {
        AugKind::AutoEncoder => aug_autoencoder(ex),
        AugKind::Mask => aug_mask(ex, rng),
        AugKind::DropChar => aug_dropchar(ex, rng),
        AugKind::Permute => aug_permute(ex, rng),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&lambda) {
            Ok(Self { lambda })
        } else {
            Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")))
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// `(1 - λ)·loss_s + λ·loss_d`.
pub fn combined_loss(loss_s: f64, loss_d: f64, w: LossWeights) -> Result<f64> {
    for (name, x) in [("supervised", loss_s), ("augmentation", loss_d)] {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss {x}")));
        }
        if x < 0.0 {
            return Err(Error::InvalidArgument(format!("{name} loss {x} is negative")));
        }
    }
    let l = w.lambda;
    Ok((1.0 - l) * loss_s + l * loss_d)
}

/// Differentiable form of [`combined_loss`] on tape scalars.
pub fn combined_loss_var<T: crate::numerics::Float>(
    tape: &mut Tape<T>,
    loss_s: Var,
    loss_d: Var,
    w: LossWeights,
) -> Var {
    let l = w.lambda;
    tape.lin_comb(&[(loss_s, T::of(1.0 - l)), (loss_d, T::of(l))])
}

/// EOS-terminated id sequences produced by one augmentation kind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedBatch {
    pub kind: AugKind,
    pub inputs: Vec<Vec<usize>>,
    pub outputs: Vec<Vec<usize>>,
}

impl AugmentedBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn pairs(&self) -> Vec<SeqPair> {
        self.inputs
            .iter()
            .zip(&self.outputs)
            .map(|(s, t)| SeqPair {
                src: s.clone(),
                tgt: t.clone(),
            })
            .collect()
    }
}

/// Picks one kind uniformly, samples `batch_size` examples with
/// replacement and applies the transform.
pub fn sample_augmented_batch(
    corpus: &Corpus,
    kinds: &[AugKind],
    batch_size: usize,
    vocab: &Vocab,
    rng: &mut Rng,
) -> Result<AugmentedBatch> {
    if kinds.is_empty() {
        return Err(Error::InvalidArgument("no augmentation kinds".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Empty("augmentation corpus".into()));
    }
    let kind = kinds[rng.below(kinds.len())];
    let mut inputs = Vec::with_capacity(batch_size);
    let mut outputs = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let ex = &corpus.examples[rng.below(corpus.len())];
        let (i, o) = apply(kind, ex, rng)?;
        let p = SeqPair::from_text(vocab, &i, &o);
        inputs.push(p.src);
        outputs.push(p.tgt);
    }
    Ok(AugmentedBatch {
        kind,
        inputs,
        outputs,
    })
}

/// Word vocabulary over `texts` extended with every single
/// interior-character deletion of every word, so DropChar inputs stay
/// in-vocabulary. Variants are appended after the corpus tokens in sorted
/// order.
pub fn dropchar_closure_vocab<'a, I>(texts: I, min_count: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let base = Vocab::build(texts, TokenMode::Word, min_count)?;
    let mut extra = BTreeSet::new();
    for w in base.tokens().iter().skip(SPECIAL_TOKENS.len()) {
        for v in interior_drop_variants(w) {
            if !base.contains(&v) {
                extra.insert(v);
            }
        }
    }
    let mut tokens = base.tokens().to_vec();
    tokens.extend(extra);
    Vocab::from_tokens(tokens, TokenMode::Word)
}
