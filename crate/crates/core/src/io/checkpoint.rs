//! Binary checkpoint format.
//!
//! ```text
//! "LCKP"                       4 bytes
//! version                      u32 LE
//! metadata length              u64 LE
//! metadata                     UTF-8 JSON
//! tensor count                 u32 LE
//! per tensor, in metadata order:
//!   name length, name          u32 LE, UTF-8
//!   rank, extents              u32 LE, rank x u32 LE
//!   values                     f32 LE, row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, CollapsibleBlock, Conv2d, Dropout, Layer, Linear, ModelGraph, PRelu};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BnMeta {
    momentum: f64,
    eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum LayerMeta {
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    Prelu {
        name: String,
        alpha: f64,
        trainable: bool,
    },
    BatchNorm {
        name: String,
        width: usize,
        #[serde(flatten)]
        bn: BnMeta,
    },
    Dropout {
        name: String,
        p: f64,
    },
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Flatten {
        name: String,
    },
    Block {
        name: String,
        n_in: usize,
        hidden: usize,
        n_out: usize,
        alpha: f64,
        trainable: bool,
        batch_norm: Option<BnMeta>,
        dropout: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    input_shape: Vec<usize>,
    layers: Vec<LayerMeta>,
    /// Free-form run information: seed, config echo.
    info: BTreeMap<String, String>,
    /// Tensor names in blob order.
    tensors: Vec<String>,
}

/// Slopes are stored in 32 bits; echo them at that precision so a loaded
/// checkpoint re-saves to identical bytes.
fn alpha32<T: Scalar>(a: T) -> f64 {
    f64::from(a.as_f64() as f32)
}

fn layer_tensors<'a, T: Scalar>(name: &str, layer: &'a Layer<T>) -> Vec<(String, &'a Tensor<T>)> {
    let bn_tensors = |prefix: String, bn: &'a BatchNorm<T>| {
        [
            (format!("{prefix}.gamma"), &bn.gamma),
            (format!("{prefix}.beta"), &bn.beta),
            (format!("{prefix}.running_mean"), &bn.running_mean),
            (format!("{prefix}.running_var"), &bn.running_var),
        ]
    };
    match layer {
        Layer::Linear(l) => vec![(format!("{name}.weight"), &l.weight), (format!("{name}.bias"), &l.bias)],
        Layer::PRelu(p) => vec![(format!("{name}.alpha"), &p.alpha)],
        Layer::BatchNorm(bn) => bn_tensors(name.to_string(), bn).to_vec(),
        Layer::Conv2d(c) => vec![(format!("{name}.kernel"), &c.kernel), (format!("{name}.bias"), &c.bias)],
        Layer::Dropout(_) | Layer::Flatten => vec![],
        Layer::Block(b) => {
            let mut v = vec![
                (format!("{name}.fc1.weight"), &b.fc1.weight),
                (format!("{name}.fc1.bias"), &b.fc1.bias),
            ];
            if let Some(bn) = &b.bn {
                v.extend(bn_tensors(format!("{name}.bn"), bn));
            }
            v.push((format!("{name}.act.alpha"), &b.act.alpha));
            v.push((format!("{name}.fc2.weight"), &b.fc2.weight));
            v.push((format!("{name}.fc2.bias"), &b.fc2.bias));
            v
        }
    }
}

fn layer_meta<T: Scalar>(name: &str, layer: &Layer<T>) -> LayerMeta {
    let name = name.to_string();
    let bn_meta = |bn: &BatchNorm<T>| BnMeta {
        momentum: bn.momentum.as_f64(),
        eps: bn.eps.as_f64(),
    };
    match layer {
        Layer::Linear(l) => LayerMeta::Linear {
            name,
            in_features: l.in_features(),
            out_features: l.out_features(),
        },
        Layer::PRelu(p) => LayerMeta::Prelu {
            name,
            alpha: alpha32(p.alpha()),
            trainable: p.alpha.requires_grad(),
        },
        Layer::BatchNorm(bn) => LayerMeta::BatchNorm {
            name,
            width: bn.width(),
            bn: bn_meta(bn),
        },
        Layer::Dropout(d) => LayerMeta::Dropout { name, p: d.p },
        Layer::Conv2d(c) => LayerMeta::Conv2d {
            name,
            in_channels: c.in_channels(),
            out_channels: c.out_channels(),
            kernel: c.kernel_size(),
            stride: c.stride,
            padding: c.padding,
        },
        Layer::Flatten => LayerMeta::Flatten { name },
        Layer::Block(b) => LayerMeta::Block {
            name,
            n_in: b.n_in(),
            hidden: b.hidden(),
            n_out: b.n_out(),
            alpha: alpha32(b.alpha()),
            trainable: b.act.alpha.requires_grad(),
            batch_norm: b.bn.as_ref().map(bn_meta),
            dropout: b.drop.as_ref().map(|d| d.p),
        },
    }
}

/// Serializes a model; values are rounded to 32 bits.
pub fn encode_checkpoint<T: Scalar>(m: &ModelGraph<T>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut layers = Vec::new();
    for node in m.layers() {
        layers.push(layer_meta(&node.name, &node.layer));
        tensors.extend(layer_tensors(&node.name, &node.layer));
    }
    let meta = Meta {
        input_shape: m.input_shape().to_vec(),
        layers,
        info: m.metadata.clone(),
        tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in t.data() {
            let v = v.as_f64() as f32;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("tensor `{name}` is not finite in 32 bits")));
            }
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(m: &ModelGraph<T>, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode_checkpoint(m)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

struct Loaded<T> {
    tensors: BTreeMap<String, (Tensor<T>, u64)>,
}

impl<T: Scalar> Loaded<T> {
    fn get(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let (t, offset) = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::format(0, format!("tensor `{name}` listed in metadata is missing")))?;
        if t.shape() != shape {
            return Err(Error::format(
                offset,
                format!("tensor `{name}` has shape {:?}, metadata implies {shape:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    fn bn(&mut self, prefix: &str, width: usize, meta: &BnMeta) -> Result<BatchNorm<T>> {
        BatchNorm::from_parts(
            self.get(&format!("{prefix}.gamma"), &[width])?,
            self.get(&format!("{prefix}.beta"), &[width])?,
            self.get(&format!("{prefix}.running_mean"), &[width])?,
            self.get(&format!("{prefix}.running_var"), &[width])?,
            T::lit(meta.momentum),
            T::lit(meta.eps),
        )
    }

    fn linear(&mut self, prefix: &str, n_in: usize, n_out: usize) -> Result<Linear<T>> {
        Linear::new(
            self.get(&format!("{prefix}.weight"), &[n_out, n_in])?,
            self.get(&format!("{prefix}.bias"), &[n_out])?,
        )
    }

    fn prelu(&mut self, name: &str, trainable: bool) -> Result<PRelu<T>> {
        let a = self.get(name, &[])?.item()?;
        Ok(if trainable { PRelu::new(a) } else { PRelu::frozen(a) })
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelGraph<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic").map_err(|_| Error::format(0, "missing LCKP magic"))? != MAGIC {
        return Err(Error::format(0, "bad magic, expected LCKP"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let meta_len = c.u64("metadata length")?;
    let meta_at = c.pos as u64;
    let meta_len = usize::try_from(meta_len).map_err(|_| Error::format(8, "metadata length overflows"))?;
    let meta_bytes = c.take(meta_len, "metadata")?;
    let meta: Meta =
        serde_json::from_slice(meta_bytes).map_err(|e| Error::format(meta_at, format!("metadata: {e}")))?;
    let count_at = c.pos as u64;
    let count = c.u32("tensor count")? as usize;
    if count != meta.tensors.len() {
        return Err(Error::format(
            count_at,
            format!("{count} tensors in blob, metadata lists {}", meta.tensors.len()),
        ));
    }
    let mut loaded = Loaded {
        tensors: BTreeMap::new(),
    };
    for expected in &meta.tensors {
        let at = c.pos as u64;
        let len = c.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "tensor name")?)
            .map_err(|_| Error::format(at + 4, "tensor name is not UTF-8"))?;
        if name != expected {
            return Err(Error::format(
                at,
                format!("tensor `{name}` out of order, expected `{expected}`"),
            ));
        }
        let rank = c.u32("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| c.u32("tensor extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(at, "tensor extents overflow"))?;
        let raw = c.take(
            n.checked_mul(4).ok_or_else(|| Error::format(at, "tensor too large"))?,
            "tensor values",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::lit(f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes")))))
            .collect();
        loaded.tensors.insert(name.to_string(), (Tensor::new(shape, data)?, at));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after tensor blob"));
    }

    let mut m = ModelGraph::new(meta.input_shape);
    m.metadata = meta.info;
    for lm in &meta.layers {
        let (name, layer) = match lm {
            LayerMeta::Linear {
                name,
                in_features,
                out_features,
            } => (name, Layer::Linear(loaded.linear(name, *in_features, *out_features)?)),
            LayerMeta::Prelu { name, trainable, .. } => {
                (name, Layer::PRelu(loaded.prelu(&format!("{name}.alpha"), *trainable)?))
            }
            LayerMeta::BatchNorm { name, width, bn } => (name, Layer::BatchNorm(loaded.bn(name, *width, bn)?)),
            LayerMeta::Dropout { name, p } => (name, Layer::Dropout(Dropout::new(*p)?)),
            LayerMeta::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let k = loaded.get(
                    &format!("{name}.kernel"),
                    &[*out_channels, *in_channels, *kernel, *kernel],
                )?;
                let b = loaded.get(&format!("{name}.bias"), &[*out_channels])?;
                (name, Layer::Conv2d(Conv2d::new(k, b, *stride, *padding)?))
            }
            LayerMeta::Flatten { name } => (name, Layer::Flatten),
            LayerMeta::Block {
                name,
                n_in,
                hidden,
                n_out,
                trainable,
                batch_norm,
                dropout,
                ..
            } => {
                let fc1 = loaded.linear(&format!("{name}.fc1"), *n_in, *hidden)?;
                let bn = match batch_norm {
                    Some(bm) => Some(loaded.bn(&format!("{name}.bn"), *hidden, bm)?),
                    None => None,
                };
                let act = loaded.prelu(&format!("{name}.act.alpha"), *trainable)?;
                let fc2 = loaded.linear(&format!("{name}.fc2"), *hidden, *n_out)?;
                let drop = dropout.map(Dropout::new).transpose()?;
                (name, Layer::Block(CollapsibleBlock::new(fc1, bn, act, drop, fc2)?))
            }
        };
        m.push(name.clone(), layer)
            .map_err(|e| Error::format(meta_at, e.to_string()))?;
    }
    if let Some(extra) = loaded.tensors.keys().next() {
        return Err(Error::format(
            meta_at,
            format!("tensor `{extra}` is not used by any layer"),
        ));
    }
    Ok(m)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelGraph<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
