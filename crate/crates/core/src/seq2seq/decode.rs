use std::cmp::Ordering;

use super::model::{Bindings, Encoded, Layout, Net, Padded};
use super::config::Seq2SeqConfig;
use crate::error::{Error, Result};
use crate::numerics::{Float, Tape};
use crate::text::{Vocab, BOS, EOS, PAD};

pub const DEFAULT_BEAM: usize = 3;
pub const DEFAULT_MAX_LEN: usize = 32;

/// Next-token log-probabilities for a set of equal-length prefixes.
/// Prefixes hold generated tokens only; the scorer supplies BOS itself.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// Upper bound on generated tokens (EOS included) the scorer accepts.
    fn max_steps(&self) -> usize;

    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Anything that can be asked to translate id sequences.
pub trait Translator {
    fn vocab(&self) -> &Vocab;

    fn scorer<'s>(&'s self, src: &[usize]) -> Result<Box<dyn StepScorer + 's>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids without the terminating EOS.
    pub tokens: Vec<usize>,
    pub score: f64,
    /// False when no hypothesis reached EOS within the length budget.
    pub finished: bool,
}

fn emittable(id: usize) -> bool {
    id != PAD && id != BOS
}

pub fn greedy_with(scorer: &mut dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let steps = max_len.min(scorer.max_steps());
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for _ in 0..steps {
        let lp = scorer.log_probs(std::slice::from_ref(&tokens))?.remove(0);
        let mut best: Option<(usize, f64)> = None;
        for (id, &l) in lp.iter().enumerate() {
            if emittable(id) && best.is_none_or(|(_, b)| l > b) {
                best = Some((id, l));
            }
        }
        let (id, l) = best.ok_or_else(|| Error::Empty("no emittable token".into()))?;
        score += l;
        if id == EOS {
            return Ok(Hypothesis {
                tokens,
                score,
                finished: true,
            });
        }
        tokens.push(id);
    }
    Ok(Hypothesis {
        tokens,
        score,
        finished: false,
    })
}

/// Beam search over unnormalized log-probability sums. Hypotheses that
/// emit EOS leave the beam; the search ends once no active hypothesis can
/// beat the best finished one.
pub fn beam_with(scorer: &mut dyn StepScorer, beam: usize, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam must be at least 1".into()));
    }
    let steps = max_len.min(scorer.max_steps());
    let mut active: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..steps {
        let prefixes: Vec<Vec<usize>> = active.iter().map(|(t, _)| t.clone()).collect();
        let lps = scorer.log_probs(&prefixes)?;
        let mut cand: Vec<(usize, usize, f64)> = Vec::with_capacity(active.len() * lps[0].len());
        for (h, lp) in lps.iter().enumerate() {
            for (id, &l) in lp.iter().enumerate() {
                if emittable(id) {
                    cand.push((h, id, active[h].1 + l));
                }
            }
        }
        // Stable: equal scores keep generation order.
        cand.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal));
        let mut next = Vec::with_capacity(beam);
        for &(h, id, s) in cand.iter().take(beam) {
            let tokens = active[h].0.clone();
            if id == EOS {
                finished.push((tokens, s));
            } else {
                let mut t = tokens;
                t.push(id);
                next.push((t, s));
            }
        }
        active = next;
        let best_fin = best_of(&finished).map(|i| finished[i].1);
        let best_act = best_of(&active).map(|i| active[i].1);
        match (best_fin, best_act) {
            (_, None) => break,
            (Some(f), Some(a)) if f >= a => break,
            _ => {}
        }
    }
    if let Some(i) = best_of(&finished) {
        let (tokens, score) = finished.swap_remove(i);
        return Ok(Hypothesis {
            tokens,
            score,
            finished: true,
        });
    }
    let i = best_of(&active).expect("beam never empties without a finished hypothesis");
    let (tokens, score) = active.swap_remove(i);
    Ok(Hypothesis {
        tokens,
        score,
        finished: false,
    })
}

/// Index of the highest score; the earliest wins ties.
fn best_of(hyps: &[(Vec<usize>, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (_, s)) in hyps.iter().enumerate() {
        if best.is_none_or(|b| *s > hyps[b].1) {
            best = Some(i);
        }
    }
    best
}

pub fn greedy_decode(model: &dyn Translator, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let mut s = model.scorer(src)?;
    Ok(greedy_with(s.as_mut(), max_len)?.tokens)
}

pub fn beam_search(
    model: &dyn Translator,
    src: &[usize],
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    let mut s = model.scorer(src)?;
    beam_with(s.as_mut(), beam, max_len)
}

/// Encodes `text`, appends EOS, decodes with `beam` (1 = greedy) and
/// returns the detokenized output.
pub fn translate_text(model: &dyn Translator, text: &str, beam: usize, max_len: usize) -> Result<String> {
    let mut src = model.vocab().encode(text);
    src.push(EOS);
    let hyp = if beam == 1 {
        let mut s = model.scorer(&src)?;
        greedy_with(s.as_mut(), max_len)?
    } else {
        beam_search(model, &src, beam, max_len)?
    };
    Ok(model.vocab().decode(&hyp.tokens))
}

pub fn translate_all<'a, I>(model: &dyn Translator, texts: I, beam: usize, max_len: usize) -> Result<Vec<String>>
where
    I: IntoIterator<Item = &'a str>,
{
    texts
        .into_iter()
        .map(|t| translate_text(model, t, beam, max_len))
        .collect()
}

/// Decodes against a bound parameter set. The encoder runs once; each step
/// rewinds the tape to just after it.
pub(crate) struct NetScorer<'a, T: Float> {
    cfg: &'a Seq2SeqConfig,
    layout: &'a Layout,
    bind: Bindings<'a>,
    tape: Tape<T>,
    enc: Encoded,
    mark: usize,
}

impl<'a, T: Float> NetScorer<'a, T> {
    pub(crate) fn new(
        cfg: &'a Seq2SeqConfig,
        layout: &'a Layout,
        mut tape: Tape<T>,
        bind: Bindings<'a>,
        src: &[usize],
    ) -> Result<Self> {
        if src.is_empty() {
            return Err(Error::Empty("source ids".into()));
        }
        let padded = Padded::new(&[src]);
        let enc = Net {
            cfg,
            layout,
            bind: &bind,
        }
        .encode(&mut tape, &padded, None)?;
        let mark = tape.len();
        Ok(Self {
            cfg,
            layout,
            bind,
            tape,
            enc,
            mark,
        })
    }
}

impl<T: Float> StepScorer for NetScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size()
    }

    fn max_steps(&self) -> usize {
        self.cfg.max_len
    }

    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.tape.truncate(self.mark);
        let k = prefixes.len();
        let len = prefixes[0].len() + 1;
        let inputs: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| {
                assert_eq!(p.len() + 1, len, "prefixes must share a length");
                std::iter::once(BOS).chain(p.iter().copied()).collect()
            })
            .collect();
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let dec_in = Padded::new(&refs);
        let net = Net {
            cfg: self.cfg,
            layout: self.layout,
            bind: &self.bind,
        };
        let src_len = self.enc.len;
        let rows: Vec<usize> = (0..k).flat_map(|_| 0..src_len).collect();
        let hidden = self.tape.gather(self.enc.hidden, &rows);
        let enc = Encoded {
            hidden,
            key_valid: self.enc.key_valid.repeat(k),
            batch: k,
            len: src_len,
        };
        let (h, _) = net.decode(&mut self.tape, &enc, &dec_in, None)?;
        let last: Vec<usize> = (0..k).map(|b| b * len + len - 1).collect();
        let h = self.tape.gather(h, &last);
        let logits = net.logits(&mut self.tape, h);
        let v = self.cfg.vocab_size();
        let vals = self.tape.value(logits);
        let out = (0..k)
            .map(|b| log_softmax_f64(&vals[b * v..(b + 1) * v]))
            .collect::<Vec<_>>();
        if out.iter().flatten().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        Ok(out)
    }
}

fn log_softmax_f64<T: Float>(row: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = row.iter().map(|x| x.to_f64_lossy()).collect();
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}
