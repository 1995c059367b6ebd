use crate::error::{Error, Result};
use crate::numerics::{js_row, Float, Tape, Tensor, Var};

/// Row-stochastic matrix `[positions, vocab]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist {
    rows: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl ProbDist {
    pub fn new(rows: usize, vocab: usize, data: Vec<f64>) -> Result<Self> {
        if rows * vocab != data.len() || vocab == 0 {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{vocab} distribution",
                data.len()
            )));
        }
        for (r, row) in data.chunks(vocab).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidArgument(format!("row {r} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("row {r} sums to {s}")));
            }
        }
        Ok(Self { rows, vocab, data })
    }

    /// Row-wise softmax of `[rows, vocab]` logits.
    pub fn from_logits<T: Float>(logits: &Tensor<T>) -> Result<Self> {
        let shape = logits.shape();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("logits {shape:?} must be 2-D")));
        }
        let (rows, vocab) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(rows * vocab);
        for row in logits.data().chunks(vocab) {
            let xs: Vec<f64> = row.iter().map(|x| x.to_f64_lossy()).collect();
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::NonFinite("logits".into()));
            }
            let z: f64 = xs.iter().map(|x| (x - max).exp()).sum();
            data.extend(xs.iter().map(|x| (x - max).exp() / z));
        }
        Self::new(rows, vocab, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.vocab..(r + 1) * self.vocab]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn same_shape(t: &ProbDist, s: &ProbDist) -> Result<()> {
    if t.rows != s.rows || t.vocab != s.vocab {
        return Err(Error::Shape(format!(
            "teacher {}x{} vs student {}x{}",
            t.rows, t.vocab, s.rows, s.vocab
        )));
    }
    if t.rows == 0 {
        return Err(Error::Empty("distributions".into()));
    }
    Ok(())
}

/// Mean over positions of `-Σ_k T[k] ln S[k]`.
pub fn kd_loss_ce(t: &ProbDist, s: &ProbDist) -> Result<f64> {
    same_shape(t, s)?;
    let mut total = 0.0;
    for r in 0..t.rows {
        for (&tp, &sp) in t.row(r).iter().zip(s.row(r)) {
            if tp > 0.0 {
                total -= tp * sp.ln();
            }
        }
    }
    Ok(total / t.rows as f64)
}

/// Mean over positions of `KL(T‖m) + KL(S‖m)` with `m = (T + S) / 2`.
pub fn kd_loss_js(t: &ProbDist, s: &ProbDist) -> Result<f64> {
    same_shape(t, s)?;
    let total: f64 = (0..t.rows).map(|r| js_row(t.row(r), s.row(r))).sum();
    Ok(total / t.rows as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KdKind {
    Ce,
    Js,
}

impl KdKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KdKind::Ce => "ce",
            KdKind::Js => "js",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ce" => Ok(KdKind::Ce),
            "js" => Ok(KdKind::Js),
            other => Err(Error::InvalidArgument(format!("unknown KD loss `{other}`"))),
        }
    }
}

/// KD loss of student `logits` against constant teacher probabilities;
/// rows with `rows[i] == false` are skipped.
pub fn kd_loss_var<T: Float>(
    tape: &mut Tape<T>,
    kind: KdKind,
    logits: Var,
    teacher: Vec<T>,
    rows: Vec<bool>,
) -> Result<Var> {
    match kind {
        KdKind::Ce => tape.kd_ce(logits, teacher, rows),
        KdKind::Js => tape.kd_js(logits, teacher, rows),
    }
}

/// `(1 - λ)·(loss_s + loss_d) + λ·loss_kd`.
pub fn student_loss(loss_s: f64, loss_d: f64, loss_kd: f64, lambda: f64) -> Result<f64> {
    for (n, x) in [("supervised", loss_s), ("augmentation", loss_d), ("distillation", loss_kd)] {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{n} loss {x}")));
        }
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok((1.0 - lambda) * (loss_s + loss_d) + lambda * loss_kd)
}

pub fn student_loss_var<T: Float>(
    tape: &mut Tape<T>,
    loss_s: Var,
    loss_d: Option<Var>,
    loss_kd: Var,
    lambda: f64,
) -> Var {
    let a = T::of(1.0 - lambda);
    let mut terms = vec![(loss_s, a), (loss_kd, T::of(lambda))];
    if let Some(d) = loss_d {
        terms.push((d, a));
    }
    tape.lin_comb(&terms)
}
