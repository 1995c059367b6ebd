use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::features::extract_features;
use super::{aggregate_labels, split_query, Label, LabeledQuery, QueryLanguage, N_LABELS};
use crate::error::{Error, Result};
use crate::numerics::{AdamW, Rng, Tensor};

pub const FEATURE_TEMPLATE_VERSION: u32 = 1;

const MAGIC: &str = "CODEMIX-CRF 1";

type Row = [f64; N_LABELS];

/// Linear-chain CRF over EN/HI/OT with sparse binary emission features and
/// a full label-transition matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfModel {
    pub template_version: u32,
    index: BTreeMap<String, usize>,
    /// `[n_features * N_LABELS]`.
    weights: Vec<f64>,
    /// `trans[prev][cur]`.
    trans: [Row; N_LABELS],
}

/// Sparse NLL gradient: emission rows keyed by feature id, plus transitions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CrfGradient {
    pub weights: BTreeMap<usize, Row>,
    pub trans: [Row; N_LABELS],
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl CrfModel {
    /// Zero-weight model over the given feature names.
    pub fn new<I: IntoIterator<Item = String>>(features: I) -> Self {
        let mut names: Vec<String> = features.into_iter().collect();
        names.sort();
        names.dedup();
        let index: BTreeMap<String, usize> = names.into_iter().enumerate().map(|(i, f)| (f, i)).collect();
        Self {
            template_version: FEATURE_TEMPLATE_VERSION,
            weights: vec![0.0; index.len() * N_LABELS],
            index,
            trans: [[0.0; N_LABELS]; N_LABELS],
        }
    }

    pub fn n_features(&self) -> usize {
        self.index.len()
    }

    pub fn feature_id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn transitions(&self) -> &[Row; N_LABELS] {
        &self.trans
    }

    pub fn transitions_mut(&mut self) -> &mut [Row; N_LABELS] {
        &mut self.trans
    }

    pub fn set_weight(&mut self, feature: &str, label: Label, w: f64) -> Result<()> {
        let id = self
            .feature_id(feature)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown feature `{feature}`")))?;
        self.weights[id * N_LABELS + label.index()] = w;
        Ok(())
    }

    /// Squared L2 norm of all weights, transitions included.
    pub fn norm_sq(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>() + self.trans.iter().flatten().map(|w| w * w).sum::<f64>()
    }

    /// Known feature ids at every position; unseen features are dropped.
    pub fn feature_ids(&self, words: &[&str]) -> Vec<Vec<usize>> {
        (0..words.len())
            .map(|i| {
                extract_features(words, i)
                    .features
                    .iter()
                    .filter_map(|f| self.feature_id(f))
                    .collect()
            })
            .collect()
    }

    fn emissions_of(&self, ids: &[Vec<usize>]) -> Vec<Row> {
        ids.iter()
            .map(|fs| {
                let mut row = [0.0; N_LABELS];
                for &f in fs {
                    for (y, r) in row.iter_mut().enumerate() {
                        *r += self.weights[f * N_LABELS + y];
                    }
                }
                row
            })
            .collect()
    }

    pub fn emissions(&self, words: &[&str]) -> Vec<Row> {
        self.emissions_of(&self.feature_ids(words))
    }

    pub fn path_score(&self, words: &[&str], labels: &[Label]) -> f64 {
        assert_eq!(words.len(), labels.len());
        let em = self.emissions(words);
        score_path(&em, &self.trans, labels)
    }

    fn forward(&self, em: &[Row]) -> Vec<Row> {
        let mut alpha = vec![[0.0; N_LABELS]; em.len()];
        alpha[0] = em[0];
        for t in 1..em.len() {
            for y in 0..N_LABELS {
                let xs: Row = std::array::from_fn(|p| alpha[t - 1][p] + self.trans[p][y]);
                alpha[t][y] = logsumexp(&xs) + em[t][y];
            }
        }
        alpha
    }

    fn backward(&self, em: &[Row]) -> Vec<Row> {
        let n = em.len();
        let mut beta = vec![[0.0; N_LABELS]; n];
        for t in (0..n - 1).rev() {
            for y in 0..N_LABELS {
                let xs: Row = std::array::from_fn(|c| self.trans[y][c] + em[t + 1][c] + beta[t + 1][c]);
                beta[t][y] = logsumexp(&xs);
            }
        }
        beta
    }

    pub fn log_partition(&self, words: &[&str]) -> Result<f64> {
        if words.is_empty() {
            return Err(Error::Empty("query".into()));
        }
        let alpha = self.forward(&self.emissions(words));
        Ok(logsumexp(alpha.last().expect("non-empty")))
    }

    fn nll_grad_ids(&self, ids: &[Vec<usize>], gold: &[Label], grad_w: &mut [f64], grad_t: &mut [Row; N_LABELS]) -> f64 {
        let em = self.emissions_of(ids);
        let n = em.len();
        let alpha = self.forward(&em);
        let beta = self.backward(&em);
        let log_z = logsumexp(&alpha[n - 1]);
        for t in 0..n {
            let g = gold[t].index();
            for y in 0..N_LABELS {
                let marg = (alpha[t][y] + beta[t][y] - log_z).exp();
                let d = marg - if y == g { 1.0 } else { 0.0 };
                for &f in &ids[t] {
                    grad_w[f * N_LABELS + y] += d;
                }
            }
            if t > 0 {
                for p in 0..N_LABELS {
                    for c in 0..N_LABELS {
                        let pair = (alpha[t - 1][p] + self.trans[p][c] + em[t][c] + beta[t][c] - log_z).exp();
                        grad_t[p][c] += pair;
                    }
                }
                grad_t[gold[t - 1].index()][g] -= 1.0;
            }
        }
        log_z - score_path(&em, &self.trans, gold)
    }

    /// `log Z - score(gold)` and its gradient (expected minus gold counts).
    pub fn nll_grad(&self, query: &LabeledQuery) -> Result<(f64, CrfGradient)> {
        if query.tokens.is_empty() {
            return Err(Error::Empty("query".into()));
        }
        let ids = self.feature_ids(&query.words());
        let mut gw = vec![0.0; self.weights.len()];
        let mut gt = [[0.0; N_LABELS]; N_LABELS];
        let loss = self.nll_grad_ids(&ids, &query.labels(), &mut gw, &mut gt);
        let mut weights = BTreeMap::new();
        for f in ids.iter().flatten() {
            weights.insert(*f, std::array::from_fn(|y| gw[f * N_LABELS + y]));
        }
        Ok((loss, CrfGradient { weights, trans: gt }))
    }

    /// Best-scoring label path; ties go to the lower label index.
    pub fn viterbi(&self, words: &[&str]) -> Result<Vec<Label>> {
        if words.is_empty() {
            return Err(Error::Empty("query".into()));
        }
        let em = self.emissions(words);
        let n = em.len();
        let mut delta = vec![em[0]];
        let mut back = vec![[0usize; N_LABELS]; n];
        for t in 1..n {
            let mut row = [0.0; N_LABELS];
            for y in 0..N_LABELS {
                let mut best = 0;
                for p in 1..N_LABELS {
                    if delta[t - 1][p] + self.trans[p][y] > delta[t - 1][best] + self.trans[best][y] {
                        best = p;
                    }
                }
                back[t][y] = best;
                row[y] = delta[t - 1][best] + self.trans[best][y] + em[t][y];
            }
            delta.push(row);
        }
        let mut y = 0;
        for c in 1..N_LABELS {
            if delta[n - 1][c] > delta[n - 1][y] {
                y = c;
            }
        }
        let mut path = vec![Label::En; n];
        for t in (0..n).rev() {
            path[t] = Label::from_index(y);
            y = back[t][y];
        }
        Ok(path)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\ntemplate={}\n", self.template_version);
        for row in &self.trans {
            let _ = writeln!(s, "trans\t{}", row.map(|w| format!("{w:e}")).join("\t"));
        }
        for (name, &id) in &self.index {
            let w = &self.weights[id * N_LABELS..(id + 1) * N_LABELS];
            let _ = writeln!(s, "feat\t{}\t{:e}\t{:e}\t{:e}", name, w[0], w[1], w[2]);
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|l| l.1) != Some(MAGIC) {
            return Err(Error::parse(path, 1, "not a CRF model file"));
        }
        let (_, tl) = lines.next().ok_or_else(|| Error::parse(path, 2, "missing template line"))?;
        let template_version = tl
            .strip_prefix("template=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(path, 2, "bad template line"))?;
        if template_version != FEATURE_TEMPLATE_VERSION {
            return Err(Error::parse(path, 2, format!("unsupported feature template {template_version}")));
        }
        let mut trans = [[0.0; N_LABELS]; N_LABELS];
        let mut names = Vec::new();
        let mut weights = Vec::new();
        let mut n_trans = 0;
        for (i, line) in lines {
            let bad = |m: &str| Error::parse(path, i + 1, m.to_string());
            let parts: Vec<&str> = line.split('\t').collect();
            let nums = |xs: &[&str]| -> Result<Vec<f64>> {
                xs.iter()
                    .map(|x| x.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad("bad weight")))
                    .collect()
            };
            match parts.first() {
                Some(&"trans") if parts.len() == 1 + N_LABELS && n_trans < N_LABELS => {
                    let v = nums(&parts[1..])?;
                    trans[n_trans].copy_from_slice(&v);
                    n_trans += 1;
                }
                Some(&"feat") if parts.len() == 2 + N_LABELS => {
                    names.push(parts[1].to_string());
                    weights.extend(nums(&parts[2..])?);
                }
                _ => return Err(bad("unexpected line")),
            }
        }
        if n_trans != N_LABELS {
            return Err(Error::parse(path, 0, "transition matrix incomplete"));
        }
        let index: BTreeMap<String, usize> = names.iter().cloned().enumerate().map(|(i, f)| (f, i)).collect();
        if index.len() != names.len() || !names.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::parse(path, 0, "features must be unique and sorted"));
        }
        Ok(Self {
            template_version,
            index,
            weights,
            trans,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?, path)
    }
}

fn score_path(em: &[Row], trans: &[Row; N_LABELS], labels: &[Label]) -> f64 {
    let mut s = 0.0;
    for (t, l) in labels.iter().enumerate() {
        s += em[t][l.index()];
        if t > 0 {
            s += trans[labels[t - 1].index()][l.index()];
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrfTrainConfig {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for CrfTrainConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            epochs: 10,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

/// Minimises mean batch NLL + `l2`·‖w‖² with AdamW (no decoupled decay).
pub fn train_crf(corpus: &[LabeledQuery], cfg: &CrfTrainConfig, rng: &mut Rng) -> Result<CrfModel> {
    if corpus.is_empty() {
        return Err(Error::Empty("CRF training corpus".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.l2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("{cfg:?}")));
    }
    if corpus.iter().any(|q| q.tokens.is_empty()) {
        return Err(Error::Empty("query in CRF corpus".into()));
    }
    let mut model = CrfModel::new(corpus.iter().flat_map(|q| {
        let words = q.words();
        (0..words.len()).flat_map(move |i| extract_features(&words, i).features)
    }));
    let ids: Vec<Vec<Vec<usize>>> = corpus.iter().map(|q| model.feature_ids(&q.words())).collect();
    let gold: Vec<Vec<Label>> = corpus.iter().map(LabeledQuery::labels).collect();
    let mut opt = AdamW::<f64>::new(cfg.lr, 0.0);
    let mut params = vec![
        Tensor::new(vec![model.weights.len()], model.weights.clone())?,
        Tensor::new(vec![N_LABELS * N_LABELS], vec![0.0; N_LABELS * N_LABELS])?,
    ];
    for _ in 0..cfg.epochs {
        let order = rng.permutation(corpus.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; model.weights.len()];
            let mut gt = [[0.0; N_LABELS]; N_LABELS];
            for &i in batch {
                model.nll_grad_ids(&ids[i], &gold[i], &mut gw, &mut gt);
            }
            let k = 1.0 / batch.len() as f64;
            let reg = 2.0 * cfg.l2;
            let gw: Vec<f64> = gw.iter().zip(&model.weights).map(|(g, w)| g * k + reg * w).collect();
            let gt: Vec<f64> = gt
                .iter()
                .flatten()
                .zip(model.trans.iter().flatten())
                .map(|(g, w)| g * k + reg * w)
                .collect();
            opt.step(&mut params, &[gw, gt])?;
            model.weights.copy_from_slice(params[0].data());
            for (i, &w) in params[1].data().iter().enumerate() {
                model.trans[i / N_LABELS][i % N_LABELS] = w;
            }
        }
    }
    Ok(model)
}

/// Labels each word with the CRF and aggregates to a query language.
pub fn detect_query_language(crf: &CrfModel, query: &str) -> Result<QueryLanguage> {
    let words = split_query(query)?;
    aggregate_labels(&crf.viterbi(&words)?)
}
