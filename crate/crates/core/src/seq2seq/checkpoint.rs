//! Checkpoint container: a text manifest (magic line, `key=value`
//! metadata, one line per tensor) terminated by `blob <nbytes>`, then the
//! raw little-endian payload.

use std::fs;
use std::path::Path;

use super::config::Seq2SeqConfig;
use super::model::Seq2SeqModel;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::text::{TokenMode, Vocab};

const MAGIC: &str = "CODEMIX-CKPT 1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8 { payload: Vec<i8>, scale: f32 },
}

impl TensorData {
    pub fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I8 { .. } => "i8",
        }
    }

    fn nbytes(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len() * 4,
            TensorData::I8 { payload, .. } => payload.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<StoredTensor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl Container {
    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        for (k, v) in &self.meta {
            head.push_str(&format!("{k}={v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            let shape = t
                .shape
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",");
            let nbytes = t.data.nbytes();
            head.push_str(&format!(
                "tensor {} {} {} {} {}",
                t.name,
                t.data.dtype(),
                shape,
                offset,
                nbytes
            ));
            if let TensorData::I8 { scale, .. } = &t.data {
                head.push_str(&format!(" scale=0x{:08x}", scale.to_bits()));
            }
            head.push('\n');
            offset += nbytes;
        }
        head.push_str(&format!("blob {offset}\n"));
        let mut out = head.into_bytes();
        out.reserve(offset);
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::I8 { payload, .. } => {
                    out.extend(payload.iter().map(|&q| q as u8));
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| corrupt("manifest ends before the blob marker"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("manifest is not UTF-8"))
        };
        if next_line()? != MAGIC {
            return Err(corrupt("missing container magic"));
        }
        let mut c = Container::default();
        let mut entries: Vec<(String, String, Vec<usize>, usize, usize, Option<f32>)> = Vec::new();
        let blob_len = loop {
            let line = next_line()?;
            if let Some(n) = line.strip_prefix("blob ") {
                break n
                    .parse::<usize>()
                    .map_err(|_| corrupt(format!("bad blob length `{n}`")))?;
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 && f.len() != 6 {
                    return Err(corrupt(format!("bad tensor line `{line}`")));
                }
                let shape = f[2]
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| corrupt(format!("bad shape in `{line}`")))?;
                let offset = f[3]
                    .parse()
                    .map_err(|_| corrupt(format!("bad offset in `{line}`")))?;
                let nbytes = f[4]
                    .parse()
                    .map_err(|_| corrupt(format!("bad size in `{line}`")))?;
                let scale = match f.get(5) {
                    Some(s) => {
                        let hex = s
                            .strip_prefix("scale=0x")
                            .ok_or_else(|| corrupt(format!("bad scale in `{line}`")))?;
                        let bits = u32::from_str_radix(hex, 16)
                            .map_err(|_| corrupt(format!("bad scale in `{line}`")))?;
                        Some(f32::from_bits(bits))
                    }
                    None => None,
                };
                entries.push((f[0].to_string(), f[1].to_string(), shape, offset, nbytes, scale));
            } else if let Some((k, v)) = line.split_once('=') {
                c.meta.push((k.to_string(), v.to_string()));
            } else {
                return Err(corrupt(format!("unrecognized manifest line `{line}`")));
            }
        };
        let blob = &bytes[pos..];
        if blob.len() != blob_len {
            return Err(corrupt(format!(
                "blob holds {} bytes, manifest declares {blob_len}",
                blob.len()
            )));
        }
        for (name, dtype, shape, offset, nbytes, scale) in entries {
            let numel: usize = shape.iter().product();
            let end = offset
                .checked_add(nbytes)
                .filter(|&e| e <= blob_len)
                .ok_or_else(|| corrupt(format!("tensor {name} lies outside the blob")))?;
            let raw = &blob[offset..end];
            let data = match dtype.as_str() {
                "f32" => {
                    if nbytes != numel * 4 || scale.is_some() {
                        return Err(corrupt(format!("tensor {name}: size does not match shape")));
                    }
                    TensorData::F32(
                        raw.chunks_exact(4)
                            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                            .collect(),
                    )
                }
                "i8" => {
                    if nbytes != numel {
                        return Err(corrupt(format!("tensor {name}: size does not match shape")));
                    }
                    let scale = scale.ok_or_else(|| corrupt(format!("tensor {name}: missing scale")))?;
                    TensorData::I8 {
                        payload: raw.iter().map(|&b| b as i8).collect(),
                        scale,
                    }
                }
                other => return Err(Error::UnknownDtype(format!("{other} (tensor {name})"))),
            };
            c.tensors.push(StoredTensor { name, shape, data });
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn config_meta(cfg: &Seq2SeqConfig, kind: &str) -> Vec<(String, String)> {
    let mut meta = vec![("kind".to_string(), kind.to_string())];
    meta.extend(cfg.to_pairs().into_iter().map(|(k, v)| (format!("model.{k}"), v)));
    meta.push(("vocab.mode".into(), cfg.vocab.mode().as_str().into()));
    meta.push(("vocab.size".into(), cfg.vocab.len().to_string()));
    for (i, t) in cfg.vocab.tokens().iter().enumerate() {
        meta.push((format!("vocab.{i}"), t.clone()));
    }
    meta
}

pub(crate) fn config_from_meta(c: &Container) -> Result<Seq2SeqConfig> {
    let mode = TokenMode::parse(
        c.get_meta("vocab.mode")
            .ok_or_else(|| corrupt("missing vocab.mode"))?,
    )?;
    let size: usize = c
        .get_meta("vocab.size")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| corrupt("missing vocab.size"))?;
    let tokens = (0..size)
        .map(|i| {
            c.get_meta(&format!("vocab.{i}"))
                .map(str::to_string)
                .ok_or_else(|| corrupt(format!("missing vocab.{i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = Seq2SeqConfig::new(Vocab::from_tokens(tokens, mode)?);
    for (k, v) in &c.meta {
        if let Some(key) = k.strip_prefix("model.") {
            cfg.apply_pair(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_to_container(model: &Seq2SeqModel<f32>) -> Container {
    Container {
        meta: config_meta(model.config(), "seq2seq"),
        tensors: model
            .param_names()
            .iter()
            .zip(model.params())
            .map(|(name, p)| StoredTensor {
                name: name.clone(),
                shape: p.shape().to_vec(),
                data: TensorData::F32(p.data().to_vec()),
            })
            .collect(),
    }
}

fn dense_tensors(c: &Container, names: &[String], shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
    names
        .iter()
        .zip(shapes)
        .map(|(name, shape)| {
            let t = c
                .tensor(name)
                .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            if &t.shape != shape {
                return Err(Error::TensorShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape.clone(),
                });
            }
            match &t.data {
                TensorData::F32(v) => {
                    let out = Tensor::new(t.shape.clone(), v.clone())?.with_requires_grad(true);
                    out.ensure_finite(name)?;
                    Ok(out)
                }
                TensorData::I8 { .. } => Err(corrupt(format!(
                    "tensor {name} is int8; load it as a quantized model"
                ))),
            }
        })
        .collect()
}

pub fn model_from_container(c: &Container) -> Result<Seq2SeqModel<f32>> {
    if c.get_meta("kind") != Some("seq2seq") {
        return Err(corrupt(format!(
            "expected a seq2seq checkpoint, found kind {:?}",
            c.get_meta("kind")
        )));
    }
    let cfg = config_from_meta(c)?;
    let layout = super::model::Layout::new(&cfg);
    let params = dense_tensors(c, &layout.names, &layout.shapes)?;
    Seq2SeqModel::from_parts(cfg, params)
}

pub fn save_checkpoint(model: &Seq2SeqModel<f32>, path: &Path) -> Result<()> {
    model_to_container(model).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Seq2SeqModel<f32>> {
    model_from_container(&Container::read(path)?)
}

/// Loads weights into an existing model, requiring every tensor to match
/// that model's shapes.
pub fn load_weights(model: &mut Seq2SeqModel<f32>, path: &Path) -> Result<()> {
    let c = Container::read(path)?;
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
    let names = model.param_names().to_vec();
    let params = dense_tensors(&c, &names, &shapes)?;
    for (dst, src) in model.params_mut().iter_mut().zip(params) {
        *dst = src;
    }
    Ok(())
}
