use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::seq2seq::{
    config_from_meta, config_meta, Bindings, Bound, Container, Layout, NetScorer, Seq2SeqConfig,
    Seq2SeqModel, StepScorer, StoredTensor, TensorData, Translator,
};
use crate::text::Vocab;

/// Symmetric per-tensor int8 weights.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub payload: Vec<i8>,
    pub scale: f32,
    pub shape: Vec<usize>,
}

/// `scale = max|x| / 127` (1 for an all-zero tensor), `q = round(x / scale)`
/// clamped to ±127.
pub fn quantize_int8(t: &Tensor<f32>) -> Result<QuantizedTensor> {
    t.ensure_finite("quantization input")?;
    let max = t.data().iter().fold(0.0f32, |m, &x| m.max(x.abs()));
    let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
    let s = scale as f64;
    let payload = t
        .data()
        .iter()
        .map(|&x| (x as f64 / s).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok(QuantizedTensor {
        payload,
        scale,
        shape: t.shape().to_vec(),
    })
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Tensor<f32> {
        let data = self.payload.iter().map(|&q| q as f32 * self.scale).collect();
        Tensor::new(self.shape.clone(), data).expect("quantized shape")
    }

    pub fn numel(&self) -> usize {
        self.payload.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantSlot {
    Dense(Tensor<f32>),
    Int8(QuantizedTensor),
}

/// A seq2seq model whose matrices (rank ≥ 2, embeddings included) are int8;
/// vectors stay f32. Inference only.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    config: Seq2SeqConfig,
    layout: Layout,
    slots: Vec<QuantSlot>,
}

pub fn quantize_model(model: &Seq2SeqModel<f32>) -> Result<QuantizedModel> {
    let slots = model
        .params()
        .iter()
        .map(|p| {
            Ok(if p.rank() >= 2 {
                QuantSlot::Int8(quantize_int8(p)?)
            } else {
                QuantSlot::Dense(p.clone().with_requires_grad(false))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        config: model.config().clone(),
        layout: model.layout().clone(),
        slots,
    })
}

impl QuantizedModel {
    pub fn config(&self) -> &Seq2SeqConfig {
        &self.config
    }

    pub fn slots(&self) -> &[QuantSlot] {
        &self.slots
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.names
    }

    /// f32 model with every int8 tensor replaced by its dequantized values.
    pub fn dequantized(&self) -> Seq2SeqModel<f32> {
        let params = self
            .slots
            .iter()
            .map(|s| match s {
                QuantSlot::Dense(t) => t.clone(),
                QuantSlot::Int8(q) => q.dequantize(),
            })
            .collect();
        Seq2SeqModel::from_parts(self.config.clone(), params).expect("layout preserved")
    }

    pub fn to_container(&self) -> Container {
        Container {
            meta: config_meta(&self.config, "seq2seq-int8"),
            tensors: self
                .layout
                .names
                .iter()
                .zip(&self.slots)
                .map(|(name, s)| match s {
                    QuantSlot::Dense(t) => StoredTensor {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        data: TensorData::F32(t.data().to_vec()),
                    },
                    QuantSlot::Int8(q) => StoredTensor {
                        name: name.clone(),
                        shape: q.shape.clone(),
                        data: TensorData::I8 {
                            payload: q.payload.clone(),
                            scale: q.scale,
                        },
                    },
                })
                .collect(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.get_meta("kind") != Some("seq2seq-int8") {
            return Err(Error::CorruptCheckpoint(format!(
                "expected a quantized checkpoint, found kind {:?}",
                c.get_meta("kind")
            )));
        }
        let config = config_from_meta(c)?;
        let layout = Layout::new(&config);
        let mut slots = Vec::with_capacity(layout.len());
        for (name, shape) in layout.names.iter().zip(&layout.shapes) {
            let t = c
                .tensor(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
            if &t.shape != shape {
                return Err(Error::TensorShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape.clone(),
                });
            }
            slots.push(match &t.data {
                TensorData::F32(v) => {
                    let d = Tensor::new(shape.clone(), v.clone())?;
                    d.ensure_finite(name)?;
                    QuantSlot::Dense(d)
                }
                TensorData::I8 { payload, scale } => {
                    if !(scale.is_finite() && *scale > 0.0) {
                        return Err(Error::CorruptCheckpoint(format!("tensor {name}: scale {scale}")));
                    }
                    QuantSlot::Int8(QuantizedTensor {
                        payload: payload.clone(),
                        scale: *scale,
                        shape: shape.clone(),
                    })
                }
            });
        }
        Ok(Self {
            config,
            layout,
            slots,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

impl Translator for QuantizedModel {
    fn vocab(&self) -> &Vocab {
        &self.config.vocab
    }

    fn scorer<'s>(&'s self, src: &[usize]) -> Result<Box<dyn StepScorer + 's>> {
        let mut tape = Tape::<f32>::inference();
        let slots = self
            .slots
            .iter()
            .map(|s| match s {
                QuantSlot::Dense(t) => Bound::Var(tape.param(t)),
                QuantSlot::Int8(q) => Bound::Int8 {
                    payload: &q.payload,
                    scale: q.scale,
                    shape: [q.shape[0], q.shape[1]],
                },
            })
            .collect();
        let scorer = NetScorer::new(&self.config, &self.layout, tape, Bindings { slots }, src)?;
        Ok(Box::new(scorer))
    }
}
