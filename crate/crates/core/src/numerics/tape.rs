//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Tape`] records every op applied to its [`Var`] handles. Ops are
//! deliberately coarse (matmul, layer norm, masked softmax, fused losses) so
//! that a transformer step is a few hundred nodes rather than millions.
//! With gradients disabled the tape only evaluates; no caches are kept.

use super::rng::Rng;
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention visibility for a batch of `[batch * heads, q_len, k_len]`
/// score tensors.
#[derive(Clone, Debug)]
pub struct AttnMask {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `[batch * k_len]`, false for padding keys.
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

impl AttnMask {
    #[inline]
    fn visible(&self, group: usize, q: usize, k: usize) -> bool {
        let b = group / self.heads;
        self.key_valid[b * self.k_len + k] && (!self.causal || k <= q)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    LinComb(Vec<(Var, T)>),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        groups: usize,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MaskedSoftmax {
        x: Var,
        mask: AttnMask,
        scale: T,
    },
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SmoothedCe {
        logits: Var,
        targets: Vec<usize>,
        eps: T,
        ignore: usize,
        probs: Vec<T>,
        count: usize,
    },
    KdCe {
        logits: Var,
        teacher: Vec<T>,
        rows: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    KdJs {
        logits: Var,
        teacher: Vec<T>,
        rows: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    SegmentMean {
        x: Var,
        offsets: Vec<usize>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

fn log_softmax_row<T: Float>(x: &[T], out: &mut [T]) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(512),
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates; `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::with_capacity(512),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`; vars at or past
    /// `len` become invalid. Lets a decoder reuse bound parameters and the
    /// encoder output across steps.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<T>) -> Var {
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("consistent node")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.ng(&[a, b]);
        self.push(self.shape(a).to_vec(), value, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.ng(&[a, b]);
        self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), ng)
    }

    /// `x + bias` with `bias` broadcast over all leading dimensions.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = last_dim(self.shape(x));
        assert_eq!(self.shape(bias), [n], "add_bias: bias shape");
        let b = self.value(bias);
        let value: Vec<T> = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.ng(&[x, bias]);
        self.push(self.shape(x).to_vec(), value, Op::AddBias(x, bias), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, c), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b);
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).len() as f64);
        let s = self.value(x).iter().fold(T::zero(), |a, &b| a + b) / n;
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), ng)
    }

    /// Weighted sum of scalar vars.
    pub fn lin_comb(&mut self, terms: &[(Var, T)]) -> Var {
        let mut s = T::zero();
        for &(v, c) in terms {
            assert_eq!(self.value(v).len(), 1, "lin_comb: scalar terms only");
            s += c * self.scalar(v);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&vars);
        self.push(vec![1], vec![s], Op::LinComb(terms.to_vec()), ng)
    }

    /// `a · b` where `a` is `[.., k]` (flattened to rows) and `b` is
    /// `[k, n]`, or `[n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let ash = self.shape(a);
        let bsh = self.shape(b);
        assert_eq!(bsh.len(), 2, "matmul: rhs must be 2-D");
        let k = last_dim(ash);
        let m = rows_of(ash);
        let (kb, n) = if trans_b {
            (bsh[1], bsh[0])
        } else {
            (bsh[0], bsh[1])
        };
        assert_eq!(k, kb, "matmul: inner dims {ash:?} x {bsh:?}");
        let (rsb, csb) = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        let ng = self.ng(&[a, b]);
        self.push(shape, out, Op::MatMul { a, b, trans_b }, ng)
    }

    /// Batched product of `[g, m, k]` with `[g, k, n]` (or `[g, n, k]`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        assert!(ash.len() == 3 && bsh.len() == 3 && ash[0] == bsh[0], "bmm shapes");
        let (g, m, k) = (ash[0], ash[1], ash[2]);
        let (kb, n) = if trans_b {
            (bsh[2], bsh[1])
        } else {
            (bsh[1], bsh[2])
        };
        assert_eq!(k, kb, "bmm: inner dims {ash:?} x {bsh:?}");
        let (rsb, csb) = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let mut out = vec![T::zero(); g * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for gi in 0..g {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[gi * m * k..(gi + 1) * m * k],
                    k as isize,
                    1,
                    &bv[gi * k * n..(gi + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[gi * m * n..(gi + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(
            vec![g, m, n],
            out,
            Op::Bmm {
                a,
                b,
                trans_b,
                groups: g,
            },
            ng,
        )
    }

    /// `[batch * len, heads * dh]` → `[batch * heads, len, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Var {
        let d = last_dim(self.shape(x));
        assert_eq!(rows_of(self.shape(x)), batch * len, "split_heads rows");
        assert_eq!(d % heads, 0, "split_heads: width not divisible");
        let dh = d / heads;
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for l in 0..len {
                let row = &src[(b * len + l) * d..(b * len + l + 1) * d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * len + l) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            vec![batch * heads, len, dh],
            out,
            Op::SplitHeads {
                x,
                batch,
                len,
                heads,
            },
            ng,
        )
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Var {
        let sh = self.shape(x);
        assert_eq!(sh, [batch * heads, len, sh[2]], "merge_heads shape");
        let dh = sh[2];
        let d = dh * heads;
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for l in 0..len {
                for h in 0..heads {
                    let s = ((b * heads + h) * len + l) * dh;
                    let dst = (b * len + l) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            vec![batch * len, d],
            out,
            Op::MergeHeads {
                x,
                batch,
                len,
                heads,
            },
            ng,
        )
    }

    /// Row softmax of `scale * x` over visible keys; hidden keys get
    /// probability exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: AttnMask, scale: T) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(
            sh,
            [mask.batch * mask.heads, mask.q_len, mask.k_len],
            "masked_softmax shape"
        );
        let (g, lq, lk) = (sh[0], sh[1], sh[2]);
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for gi in 0..g {
            for q in 0..lq {
                let base = (gi * lq + q) * lk;
                let mut max = T::neg_infinity();
                for k in 0..lk {
                    if mask.visible(gi, q, k) {
                        max = max.max(src[base + k] * scale);
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut sum = T::zero();
                for k in 0..lk {
                    if mask.visible(gi, q, k) {
                        let e = (src[base + k] * scale - max).exp();
                        out[base + k] = e;
                        sum += e;
                    }
                }
                for o in &mut out[base..base + lk] {
                    *o /= sum;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(sh, out, Op::MaskedSoftmax { x, mask, scale }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Relu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        let value = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let d = last_dim(self.shape(x));
        assert_eq!(self.shape(gain), [d]);
        assert_eq!(self.shape(bias), [d]);
        let rows = rows_of(self.shape(x));
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Row gather: `out[i] = table[rows[i]]`. Serves embedding lookup and
    /// position selection.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let sh = self.shape(table);
        assert_eq!(sh.len(), 2, "gather: 2-D table");
        let (n, d) = (sh[0], sh[1]);
        let src = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < n, "gather: row {r} out of range {n}");
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let ng = self.ng(&[table]);
        self.push(
            vec![rows.len(), d],
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let value = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Dropout { x, mask }, ng)
    }

    /// Mean over non-ignored rows of `-Σ_k q_k log p_k` with
    /// `q = (1 - eps) · onehot + eps / V`.
    pub fn smoothed_ce(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
        ignore: usize,
    ) -> Result<Var> {
        let v = last_dim(self.shape(logits));
        let rows = rows_of(self.shape(logits));
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::InvalidArgument(format!("label smoothing {eps}")));
        }
        let count = targets.iter().filter(|&&t| t != ignore).count();
        if count == 0 {
            return Err(Error::Empty("every target position is padding".into()));
        }
        let src = self.value(logits);
        if src.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let epsv = T::of(eps);
        let uni = T::of(eps / v as f64);
        let mut logp = vec![T::zero(); v];
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            assert!(t < v, "target id {t} outside vocabulary {v}");
            let row = &src[r * v..(r + 1) * v];
            log_softmax_row(row, &mut logp);
            let sum_logp = logp.iter().fold(T::zero(), |a, &b| a + b);
            total -= (T::one() - epsv) * logp[t] + uni * sum_logp;
            for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        let loss = total / T::of(count as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                eps: epsv,
                ignore,
                probs,
                count,
            },
            ng,
        ))
    }

    fn kd_prepare(
        &self,
        logits: Var,
        teacher: &[T],
        rows: &[bool],
    ) -> Result<(usize, usize, Vec<T>, usize)> {
        let v = last_dim(self.shape(logits));
        let n = rows_of(self.shape(logits));
        if teacher.len() != n * v || rows.len() != n {
            return Err(Error::Shape(format!(
                "teacher {} / rows {} vs student [{n}, {v}]",
                teacher.len(),
                rows.len()
            )));
        }
        let count = rows.iter().filter(|&&r| r).count();
        if count == 0 {
            return Err(Error::Empty("no distillation positions".into()));
        }
        let src = self.value(logits);
        let mut probs = vec![T::zero(); src.len()];
        let mut logp = vec![T::zero(); v];
        for r in 0..n {
            if !rows[r] {
                continue;
            }
            log_softmax_row(&src[r * v..(r + 1) * v], &mut logp);
            for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(&logp) {
                *p = l.exp();
            }
        }
        Ok((n, v, probs, count))
    }

    /// Mean over selected rows of `-Σ T log softmax(logits)`; the teacher
    /// distribution is a constant.
    pub fn kd_ce(&mut self, logits: Var, teacher: Vec<T>, rows: Vec<bool>) -> Result<Var> {
        let (n, v, probs, count) = self.kd_prepare(logits, &teacher, &rows)?;
        let src = self.value(logits);
        let mut logp = vec![T::zero(); v];
        let mut total = T::zero();
        for r in 0..n {
            if !rows[r] {
                continue;
            }
            log_softmax_row(&src[r * v..(r + 1) * v], &mut logp);
            for (&t, &l) in teacher[r * v..(r + 1) * v].iter().zip(&logp) {
                if t > T::zero() {
                    total -= t * l;
                }
            }
        }
        let loss = total / T::of(count as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::KdCe {
                logits,
                teacher,
                rows,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Mean over selected rows of `KL(T‖m) + KL(S‖m)`, `m = (T + S) / 2`,
    /// with `S = softmax(logits)`.
    pub fn kd_js(&mut self, logits: Var, teacher: Vec<T>, rows: Vec<bool>) -> Result<Var> {
        let (n, v, probs, count) = self.kd_prepare(logits, &teacher, &rows)?;
        let mut total = T::zero();
        for r in 0..n {
            if !rows[r] {
                continue;
            }
            let t = &teacher[r * v..(r + 1) * v];
            let s = &probs[r * v..(r + 1) * v];
            total += js_row(t, s);
        }
        let loss = total / T::of(count as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::KdJs {
                logits,
                teacher,
                rows,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Mean of row segments `[offsets[i], offsets[i + 1])` of a 2-D input.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Var {
        let d = last_dim(self.shape(x));
        let n = rows_of(self.shape(x));
        assert!(offsets.len() >= 2 && *offsets.last().unwrap() == n);
        let src = self.value(x);
        let segs = offsets.len() - 1;
        let mut out = vec![T::zero(); segs * d];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            assert!(hi > lo, "segment_mean: empty segment");
            let inv = T::one() / T::of((hi - lo) as f64);
            for r in lo..hi {
                for j in 0..d {
                    out[s * d + j] += src[r * d + j] * inv;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            vec![segs, d],
            out,
            Op::SegmentMean {
                x,
                offsets: offsets.to_vec(),
            },
            ng,
        )
    }

    /// `x · W` for an int8 weight `W` (`[k, n]`, or `[n, k]` when
    /// `trans_w`) dequantized on the fly. Not differentiable.
    pub fn matmul_q8(
        &mut self,
        x: Var,
        payload: &[i8],
        scale: f32,
        w_shape: [usize; 2],
        trans_w: bool,
    ) -> Var {
        assert!(
            !self.nodes[x.0].needs_grad,
            "matmul_q8 is inference-only"
        );
        let k = last_dim(self.shape(x));
        let m = rows_of(self.shape(x));
        let (kw, n) = if trans_w {
            (w_shape[1], w_shape[0])
        } else {
            (w_shape[0], w_shape[1])
        };
        assert_eq!(k, kw, "matmul_q8 inner dims");
        let scale = T::of(scale as f64);
        let src = self.value(x);
        let mut out = vec![T::zero(); m * n];
        if trans_w {
            for r in 0..m {
                let xr = &src[r * k..(r + 1) * k];
                for j in 0..n {
                    let wr = &payload[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&a, &w) in xr.iter().zip(wr) {
                        acc += a * T::widen_i8(w);
                    }
                    out[r * n + j] = acc * scale;
                }
            }
        } else {
            for r in 0..m {
                let orow = &mut out[r * n..(r + 1) * n];
                for kk in 0..k {
                    let a = src[r * k + kk];
                    let wr = &payload[kk * n..(kk + 1) * n];
                    for (o, &w) in orow.iter_mut().zip(wr) {
                        *o += a * T::widen_i8(w);
                    }
                }
                for o in orow.iter_mut() {
                    *o *= scale;
                }
            }
        }
        let mut shape = self.shape(x)[..self.shape(x).len() - 1].to_vec();
        shape.push(n);
        self.push(shape, out, Op::Leaf, false)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::InvalidArgument(
                "backward on an inference tape".into(),
            ));
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                ln.shape
            )));
        }
        if !ln.value[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if !self.wants(v) {
            return;
        }
        let buf = self.buf(grads, v);
        for (i, x) in buf.iter_mut().enumerate() {
            *x += f(i);
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |i| g[i] * bv[i]);
                self.accumulate(grads, *b, |i| g[i] * av[i]);
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |i| g[i]);
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let buf = self.buf(grads, *b);
                    for row in g.chunks_exact(n) {
                        for (o, &v) in buf.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |i| g[i] * *c),
            Op::Sum(x) => self.accumulate(grads, *x, |_| g[0]),
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                self.accumulate(grads, *x, |_| g[0] / n)
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, |_| g[0] * c);
                }
            }
            Op::MatMul { a, b, trans_b } => self.backprop_matmul(*a, *b, *trans_b, g, grads),
            Op::Bmm {
                a,
                b,
                trans_b,
                groups,
            } => self.backprop_bmm(*a, *b, *trans_b, *groups, g, grads),
            Op::SplitHeads {
                x,
                batch,
                len,
                heads,
            } => {
                if self.wants(*x) {
                    let d = last_dim(self.shape(*x));
                    let dh = d / heads;
                    let buf = self.buf(grads, *x);
                    for b in 0..*batch {
                        for l in 0..*len {
                            for h in 0..*heads {
                                let src = ((b * heads + h) * len + l) * dh;
                                let dst = (b * len + l) * d + h * dh;
                                for j in 0..dh {
                                    buf[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads {
                x,
                batch,
                len,
                heads,
            } => {
                if self.wants(*x) {
                    let dh = self.shape(*x)[2];
                    let d = dh * heads;
                    let buf = self.buf(grads, *x);
                    for b in 0..*batch {
                        for l in 0..*len {
                            for h in 0..*heads {
                                let dst = ((b * heads + h) * len + l) * dh;
                                let src = (b * len + l) * d + h * dh;
                                for j in 0..dh {
                                    buf[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, mask, scale } => {
                if self.wants(*x) {
                    let p = &node.value;
                    let lk = mask.k_len;
                    let buf = self.buf(grads, *x);
                    for (r, (prow, grow)) in p.chunks_exact(lk).zip(g.chunks_exact(lk)).enumerate()
                    {
                        let dot = prow
                            .iter()
                            .zip(grow)
                            .fold(T::zero(), |a, (&pp, &gg)| a + pp * gg);
                        for k in 0..lk {
                            buf[r * lk + k] += *scale * prow[k] * (grow[k] - dot);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |i| {
                    if xv[i] > T::zero() {
                        g[i]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let half = T::of(0.5);
                let three_a = T::of(3.0 * GELU_A);
                self.accumulate(grads, *x, |i| {
                    let v = xv[i];
                    let t = (c * (v + a * v * v * v)).tanh();
                    let d = half * (T::one() + t)
                        + half * v * (T::one() - t * t) * c * (T::one() + three_a * v * v);
                    g[i] * d
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain);
                if self.wants(*gain) {
                    let buf = self.buf(grads, *gain);
                    for (grow, xrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            buf[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let buf = self.buf(grads, *bias);
                    for grow in g.chunks_exact(d) {
                        for j in 0..d {
                            buf[j] += grow[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let dn = T::of(d as f64);
                    let buf = self.buf(grads, *x);
                    let mut gx = vec![T::zero(); d];
                    for (r, (grow, xrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            gx[j] = grow[j] * gv[j];
                            m1 += gx[j];
                            m2 += gx[j] * xrow[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            buf[r * d + j] += rstd[r] * (gx[j] - m1 - xrow[j] * m2);
                        }
                    }
                }
            }
            Op::Gather { table, rows } => {
                if self.wants(*table) {
                    let d = self.shape(*table)[1];
                    let buf = self.buf(grads, *table);
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            buf[r * d + j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => self.accumulate(grads, *x, |i| g[i] * mask[i]),
            Op::SmoothedCe {
                logits,
                targets,
                eps,
                ignore,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let v = last_dim(self.shape(*logits));
                    let scale = g[0] / T::of(*count as f64);
                    let on = T::one() - *eps;
                    let uni = *eps / T::of(v as f64);
                    let buf = self.buf(grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for k in 0..v {
                            let q = if k == t { on + uni } else { uni };
                            buf[r * v + k] += scale * (probs[r * v + k] - q);
                        }
                    }
                }
            }
            Op::KdCe {
                logits,
                teacher,
                rows,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let v = last_dim(self.shape(*logits));
                    let scale = g[0] / T::of(*count as f64);
                    let buf = self.buf(grads, *logits);
                    for (r, &on) in rows.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        let t = &teacher[r * v..(r + 1) * v];
                        let tsum = t.iter().fold(T::zero(), |a, &b| a + b);
                        for k in 0..v {
                            buf[r * v + k] += scale * (probs[r * v + k] * tsum - t[k]);
                        }
                    }
                }
            }
            Op::KdJs {
                logits,
                teacher,
                rows,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let v = last_dim(self.shape(*logits));
                    let scale = g[0] / T::of(*count as f64);
                    let half = T::of(0.5);
                    let buf = self.buf(grads, *logits);
                    let mut a = vec![T::zero(); v];
                    for (r, &on) in rows.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        let t = &teacher[r * v..(r + 1) * v];
                        let s = &probs[r * v..(r + 1) * v];
                        // dJS/dS_k = ln(S_k / m_k); chain through softmax.
                        let mut dot = T::zero();
                        for k in 0..v {
                            a[k] = if s[k] > T::zero() {
                                (s[k] / (half * (t[k] + s[k]))).ln()
                            } else {
                                T::zero()
                            };
                            dot += s[k] * a[k];
                        }
                        for k in 0..v {
                            buf[r * v + k] += scale * s[k] * (a[k] - dot);
                        }
                    }
                }
            }
            Op::SegmentMean { x, offsets } => {
                if self.wants(*x) {
                    let d = last_dim(&node.shape);
                    let buf = self.buf(grads, *x);
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        let inv = T::one() / T::of((hi - lo) as f64);
                        for r in lo..hi {
                            for j in 0..d {
                                buf[r * d + j] += g[s * d + j] * inv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let ash = self.shape(a);
        let k = last_dim(ash);
        let m = rows_of(ash);
        let bsh = self.shape(b);
        let n = if trans_b { bsh[0] } else { bsh[1] };
        let (av, bv) = (self.value(a), self.value(b));
        let (ki, ni, mi) = (k as isize, n as isize, m as isize);
        let _ = mi;
        if self.wants(a) {
            let buf = self.buf(grads, a);
            // ga[m,k] += g[m,n] · op(b)ᵀ
            let (rsb, csb) = if trans_b { (ki, 1) } else { (1, ni) };
            T::gemm(m, n, k, T::one(), g, ni, 1, bv, rsb, csb, T::one(), buf, ki, 1);
        }
        if self.wants(b) {
            let buf = self.buf(grads, b);
            if trans_b {
                // gb[n,k] += gᵀ[n,m] · a[m,k]
                T::gemm(n, m, k, T::one(), g, 1, ni, av, ki, 1, T::one(), buf, ki, 1);
            } else {
                // gb[k,n] += aᵀ[k,m] · g[m,n]
                T::gemm(k, m, n, T::one(), av, 1, ki, g, ni, 1, T::one(), buf, ni, 1);
            }
        }
    }

    fn backprop_bmm(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        groups: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let ash = self.shape(a);
        let (m, k) = (ash[1], ash[2]);
        let bsh = self.shape(b);
        let n = if trans_b { bsh[1] } else { bsh[2] };
        let (av, bv) = (self.value(a), self.value(b));
        let (ki, ni) = (k as isize, n as isize);
        if self.wants(a) {
            let buf = self.buf(grads, a);
            let (rsb, csb) = if trans_b { (ki, 1) } else { (1, ni) };
            for gi in 0..groups {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    &g[gi * m * n..(gi + 1) * m * n],
                    ni,
                    1,
                    &bv[gi * k * n..(gi + 1) * k * n],
                    rsb,
                    csb,
                    T::one(),
                    &mut buf[gi * m * k..(gi + 1) * m * k],
                    ki,
                    1,
                );
            }
        }
        if self.wants(b) {
            let buf = self.buf(grads, b);
            for gi in 0..groups {
                let gs = &g[gi * m * n..(gi + 1) * m * n];
                let as_ = &av[gi * m * k..(gi + 1) * m * k];
                let out = &mut buf[gi * k * n..(gi + 1) * k * n];
                if trans_b {
                    T::gemm(n, m, k, T::one(), gs, 1, ni, as_, ki, 1, T::one(), out, ki, 1);
                } else {
                    T::gemm(k, m, n, T::one(), as_, 1, ki, gs, ni, 1, T::one(), out, ni, 1);
                }
            }
        }
    }
}

/// `KL(T‖m) + KL(S‖m)` for one pair of rows, with `0 · ln(0/x) = 0`.
pub fn js_row<T: Float>(t: &[T], s: &[T]) -> T {
    let half = T::of(0.5);
    let term = |p: T, m: T| if p > T::zero() { p * (p / m).ln() } else { T::zero() };
    let mut total = T::zero();
    for (&tk, &sk) in t.iter().zip(s) {
        let m = half * (tk + sk);
        // Added as one symmetric pair so swapping t and s is bit-exact.
        total += term(tk, m) + term(sk, m);
    }
    total
}
