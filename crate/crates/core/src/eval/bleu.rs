use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus BLEU-4 with its sufficient statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// In [0, 100].
    pub bleu: f64,
    /// Clipped n-gram precisions for n = 1..=4, in [0, 1].
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuReport {
    /// `BP · exp(mean log p_n)` from the stored fields, scaled to 0..100.
    pub fn recompute(&self) -> f64 {
        if self.precisions.iter().any(|&p| p == 0.0) {
            return 0.0;
        }
        let mean_log = self.precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * self.brevity_penalty * mean_log.exp()
    }

    pub fn to_text(&self) -> String {
        let p: Vec<String> = self
            .precisions
            .iter()
            .map(|p| format!("{:.1}", 100.0 * p))
            .collect();
        let ratio = if self.reference_len == 0 {
            0.0
        } else {
            self.candidate_len as f64 / self.reference_len as f64
        };
        format!(
            "BLEU = {:.2} {} (BP = {:.3} ratio = {:.3} hyp_len = {} ref_len = {})",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            ratio,
            self.candidate_len,
            self.reference_len
        )
    }

    pub fn to_record(&self) -> String {
        let mut s = format!("bleu={:.6}", self.bleu);
        for (i, p) in self.precisions.iter().enumerate() {
            s.push_str(&format!(" p{}={:.6}", i + 1, p));
        }
        for (i, (m, t)) in self.matches.iter().zip(&self.totals).enumerate() {
            s.push_str(&format!(" match{}={m} total{}={t}", i + 1, i + 1));
        }
        s.push_str(&format!(
            " bp={:.6} hyp_len={} ref_len={}",
            self.brevity_penalty, self.candidate_len, self.reference_len
        ));
        s
    }
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Whitespace-tokenized corpus BLEU with one reference per candidate and no
/// smoothing.
pub fn bleu_corpus<C, R>(candidates: &[C], references: &[R]) -> Result<BleuReport>
where
    C: AsRef<str>,
    R: AsRef<str>,
{
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("BLEU corpus".into()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let ct: Vec<&str> = c.as_ref().split_whitespace().collect();
        let rt: Vec<&str> = r.as_ref().split_whitespace().collect();
        c_len += ct.len();
        r_len += rt.len();
        for n in 1..=MAX_ORDER {
            let cc = ngram_counts(&ct, n);
            let rc = ngram_counts(&rt, n);
            for (g, k) in &cc {
                matches[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += ct.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let mut report = BleuReport {
        bleu: 0.0,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_len: c_len,
        reference_len: r_len,
    };
    report.bleu = report.recompute();
    Ok(report)
}
