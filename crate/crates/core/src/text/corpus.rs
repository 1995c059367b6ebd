use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    NoisyPseudo,
    CleanManual,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelExample {
    pub source: String,
    pub target: String,
    pub provenance: Provenance,
    /// Source before character noise, when the example is synthetic.
    pub clean_source: Option<String>,
}

impl ParallelExample {
    pub fn new(source: impl Into<String>, target: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            provenance,
            clean_source: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<ParallelExample>,
}

impl Corpus {
    pub fn new(examples: Vec<ParallelExample>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ParallelExample> {
        self.examples.iter()
    }

    /// Every source and target text, for vocabulary building.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples
            .iter()
            .flat_map(|e| [e.source.as_str(), e.target.as_str()])
    }

    pub fn sources(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.source.clone()).collect()
    }

    pub fn targets(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.target.clone()).collect()
    }

    pub fn shuffled(&self, rng: &mut Rng) -> Corpus {
        let mut examples = self.examples.clone();
        rng.shuffle(&mut examples);
        Corpus { examples }
    }

    /// Deterministic `(train, validation)` split; the validation part
    /// holds `round(fraction · n)` examples, at least one.
    pub fn split(&self, fraction: f64, rng: &mut Rng) -> (Corpus, Corpus) {
        let order = rng.permutation(self.len());
        let n_val = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len().saturating_sub(1).max(1));
        let (val_idx, train_idx) = order.split_at(n_val);
        let pick = |idx: &[usize]| Corpus {
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
        };
        (pick(train_idx), pick(val_idx))
    }
}

/// Reads `source<TAB>target` lines. Blank lines and lines without exactly
/// one tab are rejected with their 1-based line number.
pub fn load_parallel_tsv(path: impl AsRef<Path>, provenance: Provenance) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut examples = Vec::new();
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    for (i, raw) in lines.into_iter().enumerate() {
        let lineno = i + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| Error::parse(path, lineno, "invalid UTF-8"))?;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            return Err(Error::parse(path, lineno, "blank line"));
        }
        let tabs = line.matches('\t').count();
        if tabs != 1 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected exactly one tab, found {tabs}"),
            ));
        }
        let (src, tgt) = line.split_once('\t').expect("one tab");
        if src.trim().is_empty() || tgt.trim().is_empty() {
            return Err(Error::parse(path, lineno, "empty source or target"));
        }
        examples.push(ParallelExample::new(src.trim(), tgt.trim(), provenance));
    }
    Ok(Corpus { examples })
}

pub fn write_parallel_tsv(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for e in &corpus.examples {
        writeln!(out, "{}\t{}", e.source, e.target)?;
    }
    fs::write(path, out)?;
    Ok(())
}
