//! Pre-LN transformer encoder-decoder with learned positions and a tied,
//! shared token embedding.

use super::config::Seq2SeqConfig;
use super::decode::{NetScorer, StepScorer, Translator};
use crate::error::{Error, Result};
use crate::numerics::{AttnMask, Float, Rng, Tape, Tensor, Var};
use crate::text::{Vocab, BOS, EOS, PAD};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayerIdx {
    ln_attn: NormIdx,
    attn: AttnIdx,
    ln_ffn: NormIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayerIdx {
    ln_self: NormIdx,
    self_attn: AttnIdx,
    ln_cross: NormIdx,
    cross_attn: AttnIdx,
    ln_ffn: NormIdx,
    ffn: FfnIdx,
}

/// Parameter names, shapes and indices for one configuration.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub(crate) names: Vec<String>,
    pub(crate) shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc: Vec<EncLayerIdx>,
    enc_norm: NormIdx,
    dec: Vec<DecLayerIdx>,
    dec_norm: NormIdx,
}

impl Layout {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn lin(&mut self, prefix: &str, n: &str, d: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.{n}.weight"), vec![d, d], Init::Normal),
            self.add(format!("{prefix}.{n}.bias"), vec![d], Init::Zeros),
        )
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let (wq, bq) = self.lin(prefix, "q", d);
        // No key bias: it shifts every score in a row equally, so softmax
        // ignores it and its gradient is identically zero.
        let wk = self.add(format!("{prefix}.k.weight"), vec![d, d], Init::Normal);
        let (wv, bv) = self.lin(prefix, "v", d);
        let (wo, bo) = self.lin(prefix, "out", d);
        AttnIdx {
            wq,
            bq,
            wk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(format!("{prefix}.fc1.weight"), vec![d, ff], Init::Normal),
            b1: self.add(format!("{prefix}.fc1.bias"), vec![ff], Init::Zeros),
            w2: self.add(format!("{prefix}.fc2.weight"), vec![ff, d], Init::Normal),
            b2: self.add(format!("{prefix}.fc2.bias"), vec![d], Init::Zeros),
        }
    }

    pub(crate) fn new(cfg: &Seq2SeqConfig) -> Self {
        let d = cfg.d_model;
        let mut l = Layout {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
            tok_emb: 0,
            enc_pos: 0,
            dec_pos: 0,
            enc: Vec::new(),
            enc_norm: NormIdx { gain: 0, bias: 0 },
            dec: Vec::new(),
            dec_norm: NormIdx { gain: 0, bias: 0 },
        };
        l.tok_emb = l.add("embed.tokens".into(), vec![cfg.vocab_size(), d], Init::Normal);
        l.enc_pos = l.add("encoder.positions".into(), vec![cfg.max_len, d], Init::Normal);
        l.dec_pos = l.add("decoder.positions".into(), vec![cfg.max_len, d], Init::Normal);
        for i in 0..cfg.n_enc_layers {
            let p = format!("encoder.layers.{i}");
            let ln_attn = l.norm(&format!("{p}.self_attn_norm"), d);
            let attn = l.attn(&format!("{p}.self_attn"), d);
            let ln_ffn = l.norm(&format!("{p}.ffn_norm"), d);
            let ffn = l.ffn(&format!("{p}.ffn"), d, cfg.d_ff);
            l.enc.push(EncLayerIdx {
                ln_attn,
                attn,
                ln_ffn,
                ffn,
            });
        }
        l.enc_norm = l.norm("encoder.final_norm", d);
        for i in 0..cfg.n_dec_layers {
            let p = format!("decoder.layers.{i}");
            let ln_self = l.norm(&format!("{p}.self_attn_norm"), d);
            let self_attn = l.attn(&format!("{p}.self_attn"), d);
            let ln_cross = l.norm(&format!("{p}.cross_attn_norm"), d);
            let cross_attn = l.attn(&format!("{p}.cross_attn"), d);
            let ln_ffn = l.norm(&format!("{p}.ffn_norm"), d);
            let ffn = l.ffn(&format!("{p}.ffn"), d, cfg.d_ff);
            l.dec.push(DecLayerIdx {
                ln_self,
                self_attn,
                ln_cross,
                cross_attn,
                ln_ffn,
                ffn,
            });
        }
        l.dec_norm = l.norm("decoder.final_norm", d);
        l
    }

    pub(crate) fn len(&self) -> usize {
        self.names.len()
    }
}

/// How one parameter slot is seen by a forward pass.
pub(crate) enum Bound<'a> {
    Var(Var),
    Int8 {
        payload: &'a [i8],
        scale: f32,
        shape: [usize; 2],
    },
}

pub(crate) struct Bindings<'a> {
    pub(crate) slots: Vec<Bound<'a>>,
}

impl<'a> Bindings<'a> {
    pub(crate) fn from_vars(vars: &[Var]) -> Self {
        Self {
            slots: vars.iter().map(|&v| Bound::Var(v)).collect(),
        }
    }

    fn var(&self, idx: usize) -> Var {
        match &self.slots[idx] {
            Bound::Var(v) => *v,
            Bound::Int8 { .. } => panic!("parameter slot {idx} is quantized, expected dense"),
        }
    }
}

/// Token ids for one training pair: encoder input and decoder output, both
/// EOS-terminated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl SeqPair {
    pub fn from_text(vocab: &Vocab, source: &str, target: &str) -> Self {
        let mut src = vocab.encode(source);
        src.push(EOS);
        let mut tgt = vocab.encode(target);
        tgt.push(EOS);
        Self { src, tgt }
    }
}

/// Right-padded id matrix.
#[derive(Clone, Debug)]
pub(crate) struct Padded {
    pub(crate) ids: Vec<usize>,
    pub(crate) batch: usize,
    pub(crate) len: usize,
}

impl Padded {
    pub(crate) fn new(seqs: &[&[usize]]) -> Self {
        let batch = seqs.len();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; batch * len];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * len..b * len + s.len()].copy_from_slice(s);
        }
        Self { ids, batch, len }
    }

    fn valid(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != PAD).collect()
    }

    fn positions(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..self.len).collect()
    }
}

/// Decoder input for teacher forcing: BOS followed by all but the last
/// output token.
pub(crate) fn shift_right(tgt: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(tgt.len());
    v.push(BOS);
    v.extend_from_slice(&tgt[..tgt.len().saturating_sub(1)]);
    v
}

/// Cross-attention probabilities per decoder layer, example and head,
/// cropped to the non-padding `[target, source]` extent.
#[derive(Clone, Debug)]
pub struct AttentionCapture<T: Float = f32> {
    /// `layers[layer][example][head]`
    pub layers: Vec<Vec<Vec<Tensor<T>>>>,
}

impl<T: Float> AttentionCapture<T> {
    pub fn matrix(&self, layer: usize, example: usize, head: usize) -> &Tensor<T> {
        &self.layers[layer][example][head]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

pub(crate) struct Encoded {
    pub(crate) hidden: Var,
    pub(crate) key_valid: Vec<bool>,
    pub(crate) batch: usize,
    pub(crate) len: usize,
}

/// A forward pass over a parameter binding. Shared by training (dense
/// vars), inference and the int8 model.
pub(crate) struct Net<'a> {
    pub(crate) cfg: &'a Seq2SeqConfig,
    pub(crate) layout: &'a Layout,
    pub(crate) bind: &'a Bindings<'a>,
}

impl<'a> Net<'a> {
    fn project<T: Float>(&self, tape: &mut Tape<T>, x: Var, w: usize) -> Var {
        match &self.bind.slots[w] {
            Bound::Var(wv) => tape.matmul(x, *wv, false),
            Bound::Int8 {
                payload,
                scale,
                shape,
            } => tape.matmul_q8(x, payload, *scale, *shape, false),
        }
    }

    fn linear<T: Float>(&self, tape: &mut Tape<T>, x: Var, w: usize, b: usize) -> Var {
        let y = self.project(tape, x, w);
        tape.add_bias(y, self.bind.var(b))
    }

    fn lookup<T: Float>(&self, tape: &mut Tape<T>, table: usize, rows: &[usize]) -> Var {
        match &self.bind.slots[table] {
            Bound::Var(v) => tape.gather(*v, rows),
            Bound::Int8 {
                payload,
                scale,
                shape,
            } => {
                let d = shape[1];
                let s = T::of(*scale as f64);
                let mut data = Vec::with_capacity(rows.len() * d);
                for &r in rows {
                    data.extend(payload[r * d..(r + 1) * d].iter().map(|&q| T::widen_i8(q) * s));
                }
                tape.constant_raw(vec![rows.len(), d], data)
            }
        }
    }

    fn norm<T: Float>(&self, tape: &mut Tape<T>, x: Var, n: &NormIdx) -> Var {
        tape.layer_norm(x, self.bind.var(n.gain), self.bind.var(n.bias), LN_EPS)
    }

    fn dropout<T: Float>(&self, tape: &mut Tape<T>, x: Var, rng: &mut Option<&mut Rng>) -> Var {
        match rng {
            Some(r) if self.cfg.dropout > 0.0 => tape.dropout(x, self.cfg.dropout, r),
            _ => x,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<T: Float>(
        &self,
        tape: &mut Tape<T>,
        q_in: Var,
        kv_in: Var,
        idx: &AttnIdx,
        batch: usize,
        q_len: usize,
        k_len: usize,
        key_valid: Vec<bool>,
        causal: bool,
    ) -> (Var, Var) {
        let h = self.cfg.n_heads;
        let q = self.linear(tape, q_in, idx.wq, idx.bq);
        let k = self.project(tape, kv_in, idx.wk);
        let v = self.linear(tape, kv_in, idx.wv, idx.bv);
        let qh = tape.split_heads(q, batch, q_len, h);
        let kh = tape.split_heads(k, batch, k_len, h);
        let vh = tape.split_heads(v, batch, k_len, h);
        let scores = tape.bmm(qh, kh, true);
        let mask = AttnMask {
            batch,
            heads: h,
            q_len,
            k_len,
            key_valid,
            causal,
        };
        let scale = T::of(1.0 / (self.cfg.head_dim() as f64).sqrt());
        let probs = tape.masked_softmax(scores, mask, scale);
        let ctx = tape.bmm(probs, vh, false);
        let merged = tape.merge_heads(ctx, batch, q_len, h);
        (self.linear(tape, merged, idx.wo, idx.bo), probs)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_len {
            Err(Error::SequenceTooLong {
                len,
                max: self.cfg.max_len,
            })
        } else {
            Ok(())
        }
    }

    pub(crate) fn encode<T: Float>(
        &self,
        tape: &mut Tape<T>,
        src: &Padded,
        mut rng: Option<&mut Rng>,
    ) -> Result<Encoded> {
        self.check_len(src.len)?;
        let (b, l) = (src.batch, src.len);
        let tok = self.lookup(tape, self.layout.tok_emb, &src.ids);
        let pos = self.lookup(tape, self.layout.enc_pos, &src.positions());
        let mut x = tape.add(tok, pos);
        x = self.dropout(tape, x, &mut rng);
        let valid = src.valid();
        for layer in &self.layout.enc {
            let n = self.norm(tape, x, &layer.ln_attn);
            let (a, _) = self.attention(tape, n, n, &layer.attn, b, l, l, valid.clone(), false);
            let a = self.dropout(tape, a, &mut rng);
            x = tape.add(x, a);
            let n = self.norm(tape, x, &layer.ln_ffn);
            let f = self.ffn(tape, n, &layer.ffn);
            let f = self.dropout(tape, f, &mut rng);
            x = tape.add(x, f);
        }
        let hidden = self.norm(tape, x, &self.layout.enc_norm);
        Ok(Encoded {
            hidden,
            key_valid: valid,
            batch: b,
            len: l,
        })
    }

    fn ffn<T: Float>(&self, tape: &mut Tape<T>, x: Var, f: &FfnIdx) -> Var {
        let h = self.linear(tape, x, f.w1, f.b1);
        let h = tape.gelu(h);
        self.linear(tape, h, f.w2, f.b2)
    }

    /// Decoder hidden states `[batch * len, d_model]` and, on request, the
    /// cross-attention probability vars of every layer.
    pub(crate) fn decode<T: Float>(
        &self,
        tape: &mut Tape<T>,
        enc: &Encoded,
        dec_in: &Padded,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_len(dec_in.len)?;
        assert_eq!(dec_in.batch, enc.batch, "encoder/decoder batch mismatch");
        let (b, l) = (dec_in.batch, dec_in.len);
        let tok = self.lookup(tape, self.layout.tok_emb, &dec_in.ids);
        let pos = self.lookup(tape, self.layout.dec_pos, &dec_in.positions());
        let mut x = tape.add(tok, pos);
        x = self.dropout(tape, x, &mut rng);
        let valid = dec_in.valid();
        let mut cross = Vec::with_capacity(self.layout.dec.len());
        for layer in &self.layout.dec {
            let n = self.norm(tape, x, &layer.ln_self);
            let (a, _) =
                self.attention(tape, n, n, &layer.self_attn, b, l, l, valid.clone(), true);
            let a = self.dropout(tape, a, &mut rng);
            x = tape.add(x, a);
            let n = self.norm(tape, x, &layer.ln_cross);
            let (c, probs) = self.attention(
                tape,
                n,
                enc.hidden,
                &layer.cross_attn,
                b,
                l,
                enc.len,
                enc.key_valid.clone(),
                false,
            );
            cross.push(probs);
            let c = self.dropout(tape, c, &mut rng);
            x = tape.add(x, c);
            let n = self.norm(tape, x, &layer.ln_ffn);
            let f = self.ffn(tape, n, &layer.ffn);
            let f = self.dropout(tape, f, &mut rng);
            x = tape.add(x, f);
        }
        Ok((self.norm(tape, x, &self.layout.dec_norm), cross))
    }

    /// Tied output projection onto the vocabulary.
    pub(crate) fn logits<T: Float>(&self, tape: &mut Tape<T>, hidden: Var) -> Var {
        match &self.bind.slots[self.layout.tok_emb] {
            Bound::Var(e) => tape.matmul(hidden, *e, true),
            Bound::Int8 {
                payload,
                scale,
                shape,
            } => tape.matmul_q8(hidden, payload, *scale, *shape, true),
        }
    }

    /// Teacher-forced logits `[batch * tgt_len, vocab]` for a batch of pairs.
    pub(crate) fn teacher_forced<T: Float>(
        &self,
        tape: &mut Tape<T>,
        pairs: &[&SeqPair],
        mut rng: Option<&mut Rng>,
    ) -> Result<(Var, Padded, Encoded, Vec<Var>)> {
        let srcs: Vec<&[usize]> = pairs.iter().map(|p| p.src.as_slice()).collect();
        let shifted: Vec<Vec<usize>> = pairs.iter().map(|p| shift_right(&p.tgt)).collect();
        let dec_in: Vec<&[usize]> = shifted.iter().map(Vec::as_slice).collect();
        let tgts: Vec<&[usize]> = pairs.iter().map(|p| p.tgt.as_slice()).collect();
        let src = Padded::new(&srcs);
        let dec = Padded::new(&dec_in);
        let enc = self.encode(tape, &src, rng.as_deref_mut())?;
        let (hidden, cross) = self.decode(tape, &enc, &dec, rng)?;
        let logits = self.logits(tape, hidden);
        Ok((logits, Padded::new(&tgts), enc, cross))
    }
}

/// Transformer encoder-decoder parameters.
#[derive(Clone, Debug)]
pub struct Seq2SeqModel<T: Float = f32> {
    config: Seq2SeqConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
}

impl<T: Float> Seq2SeqModel<T> {
    /// Weight matrices ~ N(0, init_std); biases and norm offsets zero;
    /// norm gains one.
    pub fn init(config: Seq2SeqConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(shape, init)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::ones(shape),
                    Init::Normal => {
                        let n = shape.iter().product();
                        let data = (0..n)
                            .map(|_| T::of(rng.normal(0.0, config.init_std)))
                            .collect();
                        Tensor::new(shape.clone(), data).expect("layout shape")
                    }
                };
                t.with_requires_grad(true)
            })
            .collect();
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub(crate) fn from_parts(config: Seq2SeqConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::Shape(format!(
                "{} tensors for a layout of {}",
                params.len(),
                layout.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != layout.shapes[i].as_slice() {
                return Err(Error::TensorShapeMismatch {
                    name: layout.names[i].clone(),
                    expected: layout.shapes[i].clone(),
                    found: p.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &Seq2SeqConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout
            .names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> Seq2SeqModel<U> {
        Seq2SeqModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Inserts every parameter into `tape` as a trainable leaf.
    pub fn bind_params(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    /// Mean label-smoothed cross-entropy of a batch, with parameters bound
    /// to `vars`. Dropout is active iff `rng` is given.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        pairs: &[&SeqPair],
        label_smoothing: f64,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let bind = Bindings::from_vars(vars);
        let net = Net {
            cfg: &self.config,
            layout: &self.layout,
            bind: &bind,
        };
        let (logits, targets, _, _) = net.teacher_forced(tape, pairs, rng)?;
        tape.smoothed_ce(logits, &targets.ids, label_smoothing, PAD)
    }

    /// Logits `[batch * tgt_len, vocab]` for a batch, parameters bound to
    /// `vars`; returns the padded target ids alongside.
    pub fn batch_logits(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        pairs: &[&SeqPair],
        rng: Option<&mut Rng>,
    ) -> Result<(Var, Vec<usize>)> {
        let bind = Bindings::from_vars(vars);
        let net = Net {
            cfg: &self.config,
            layout: &self.layout,
            bind: &bind,
        };
        let (logits, targets, _, _) = net.teacher_forced(tape, pairs, rng)?;
        Ok((logits, targets.ids))
    }

    /// Teacher-forced logits for one pair: `src` is the encoder input and
    /// `tgt` the decoder output (the decoder reads `BOS` + `tgt[..n-1]`).
    pub fn forward_teacher_forced(
        &self,
        src: &[usize],
        tgt: &[usize],
        capture_attn: bool,
    ) -> Result<(Tensor<T>, Option<AttentionCapture<T>>)> {
        if src.is_empty() || tgt.is_empty() {
            return Err(Error::Empty("source or target ids".into()));
        }
        let pair = SeqPair {
            src: src.to_vec(),
            tgt: tgt.to_vec(),
        };
        let (logits, capture) = self.forward_batch(&[&pair], capture_attn)?;
        Ok((logits, capture))
    }

    /// Inference-mode teacher forcing over a batch; logits are
    /// `[batch * max_tgt_len, vocab]`.
    pub fn forward_batch(
        &self,
        pairs: &[&SeqPair],
        capture_attn: bool,
    ) -> Result<(Tensor<T>, Option<AttentionCapture<T>>)> {
        let mut tape = Tape::inference();
        let vars = self.bind_params(&mut tape);
        let bind = Bindings::from_vars(&vars);
        let net = Net {
            cfg: &self.config,
            layout: &self.layout,
            bind: &bind,
        };
        let (logits, targets, enc, cross) = net.teacher_forced(&mut tape, pairs, None)?;
        let capture = capture_attn.then(|| {
            collect_capture(&tape, &cross, pairs, targets.len, enc.len, self.config.n_heads)
        });
        Ok((tape.to_tensor(logits), capture))
    }

    /// Validation-style loss without dropout.
    pub fn eval_loss(&self, pairs: &[&SeqPair], label_smoothing: f64) -> Result<f64> {
        let mut tape = Tape::inference();
        let vars = self.bind_params(&mut tape);
        let loss = self.batch_loss(&mut tape, &vars, pairs, label_smoothing, None)?;
        Ok(tape.scalar(loss).to_f64_lossy())
    }
}

pub(crate) fn collect_capture<T: Float>(
    tape: &Tape<T>,
    cross: &[Var],
    pairs: &[&SeqPair],
    tgt_len: usize,
    src_len: usize,
    heads: usize,
) -> AttentionCapture<T> {
    let layers = cross
        .iter()
        .map(|&probs| {
            let v = tape.value(probs);
            pairs
                .iter()
                .enumerate()
                .map(|(b, p)| {
                    let (rows, cols) = (p.tgt.len(), p.src.iter().filter(|&&i| i != PAD).count());
                    (0..heads)
                        .map(|h| {
                            let base = (b * heads + h) * tgt_len * src_len;
                            let mut m = Vec::with_capacity(rows * cols);
                            for r in 0..rows {
                                let row = &v[base + r * src_len..base + (r + 1) * src_len];
                                m.extend(
                                    row.iter()
                                        .zip(&p.src)
                                        .filter(|(_, &id)| id != PAD)
                                        .map(|(&x, _)| x),
                                );
                            }
                            Tensor::new(vec![rows, cols], m).expect("capture shape")
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    AttentionCapture { layers }
}

/// Label-smoothed cross-entropy of explicit logits `[n, vocab]`; `ignore`
/// rows are skipped.
pub fn label_smoothed_ce<T: Float>(
    logits: &Tensor<T>,
    targets: &[usize],
    epsilon: f64,
    ignore: usize,
) -> Result<T> {
    let mut tape = Tape::inference();
    let x = tape.constant(logits.clone());
    let l = tape.smoothed_ce(x, targets, epsilon, ignore)?;
    Ok(tape.scalar(l))
}

impl<T: Float> Translator for Seq2SeqModel<T> {
    fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    fn scorer<'s>(&'s self, src: &[usize]) -> Result<Box<dyn StepScorer + 's>> {
        let mut tape = Tape::inference();
        let vars = self.bind_params(&mut tape);
        let scorer = NetScorer::new(
            &self.config,
            &self.layout,
            tape,
            Bindings::from_vars(&vars),
            src,
        )?;
        Ok(Box::new(scorer))
    }
}
