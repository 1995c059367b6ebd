//! Token-level language identification for code-mixed queries.

mod baseline;
mod crf;
mod features;
mod synth;

#[cfg(test)]
mod tests;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub use baseline::{train_baseline, AvgEmbeddingClassifier, BaselineConfig};
pub use crf::{detect_query_language, train_crf, CrfModel, CrfTrainConfig, FEATURE_TEMPLATE_VERSION};
pub use features::{extract_features, length_bucket, FeatureVector};
pub use synth::{gen_langid_benchmark, LangidBenchSpec, LangidBenchmark};

/// Token labels in tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    En = 0,
    Hi = 1,
    Ot = 2,
}

pub const N_LABELS: usize = 3;

impl Label {
    pub const ALL: [Label; N_LABELS] = [Label::En, Label::Hi, Label::Ot];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::En => "EN",
            Label::Hi => "HI",
            Label::Ot => "OT",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "EN" => Ok(Label::En),
            "HI" => Ok(Label::Hi),
            "OT" => Ok(Label::Ot),
            other => Err(Error::InvalidArgument(format!("unknown token label `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledToken {
    pub word: String,
    pub label: Label,
}

impl LabeledToken {
    pub fn new(word: impl Into<String>, label: Label) -> Result<Self> {
        let word = word.into();
        if word.is_empty() {
            return Err(Error::InvalidArgument("empty token".into()));
        }
        Ok(Self { word, label })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabeledQuery {
    pub tokens: Vec<LabeledToken>,
}

impl LabeledQuery {
    pub fn words(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.word.as_str()).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.tokens.iter().map(|t| t.label).collect()
    }

    pub fn query_language(&self) -> Result<QueryLanguage> {
        aggregate_labels(&self.labels())
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QueryLanguage {
    English,
    Hinglish,
    Other,
}

impl QueryLanguage {
    pub const ALL: [QueryLanguage; 3] = [QueryLanguage::English, QueryLanguage::Hinglish, QueryLanguage::Other];

    pub fn index(self) -> usize {
        match self {
            QueryLanguage::English => 0,
            QueryLanguage::Hinglish => 1,
            QueryLanguage::Other => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QueryLanguage::English => "ENGLISH",
            QueryLanguage::Hinglish => "HINGLISH",
            QueryLanguage::Other => "OTHER",
        }
    }
}

/// HINGLISH if any token is HI, ENGLISH if all are EN, OTHER otherwise.
pub fn aggregate_labels(labels: &[Label]) -> Result<QueryLanguage> {
    if labels.is_empty() {
        return Err(Error::Empty("query".into()));
    }
    Ok(if labels.contains(&Label::Hi) {
        QueryLanguage::Hinglish
    } else if labels.iter().all(|&l| l == Label::En) {
        QueryLanguage::English
    } else {
        QueryLanguage::Other
    })
}

pub fn split_query(query: &str) -> Result<Vec<&str>> {
    let words: Vec<&str> = query.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::Empty("query".into()));
    }
    Ok(words)
}

/// Reads `token<TAB>label` lines with blank lines between queries.
pub fn load_token_corpus(path: &Path) -> Result<Vec<LabeledQuery>> {
    parse_token_corpus(&fs::read_to_string(path)?, path)
}

pub fn parse_token_corpus(text: &str, path: &Path) -> Result<Vec<LabeledQuery>> {
    let mut out = Vec::new();
    let mut cur = LabeledQuery::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !cur.tokens.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            continue;
        }
        let (w, l) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected token<TAB>label"))?;
        let label = Label::parse(l.trim()).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        let tok = LabeledToken::new(w, label).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        cur.tokens.push(tok);
    }
    if !cur.tokens.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

pub fn format_token_corpus(queries: &[LabeledQuery]) -> String {
    let mut s = String::new();
    for (i, q) in queries.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        for t in &q.tokens {
            let _ = writeln!(s, "{}\t{}", t.word, t.label.as_str());
        }
    }
    s
}

pub fn write_token_corpus(path: &Path, queries: &[LabeledQuery]) -> Result<()> {
    fs::write(path, format_token_corpus(queries))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of `positive`; precision is 0 when nothing is
/// predicted positive.
pub fn eval_prf(predictions: &[QueryLanguage], gold: &[QueryLanguage], positive: QueryLanguage) -> Result<Prf> {
    if predictions.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &g) in predictions.iter().zip(gold) {
        match (p == positive, g == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        precision,
        recall,
        f1,
    })
}
