use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{BatchNorm, CollapsibleBlock, Conv2d, Dropout, Layer, Linear, ModelGraph, PRelu};

/// Initial slope for PReLUs trained from scratch.
pub const SCRATCH_ALPHA: f64 = 0.25;

/// Architecture description as it appears in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// Per-sample input shape, e.g. `[2]` or `[1, 28, 28]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        out: usize,
    },
    Block {
        hidden: usize,
        out: usize,
        #[serde(default)]
        batch_norm: bool,
        #[serde(default)]
        dropout: f64,
    },
    Prelu,
    BatchNorm,
    Dropout {
        p: f64,
    },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Flatten,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Block { .. } => "block",
            LayerSpec::Prelu => "prelu",
            LayerSpec::BatchNorm => "bn",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Conv2d { .. } => "conv",
            LayerSpec::Flatten => "flatten",
        }
    }
}

fn uniform<T: Scalar>(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.uniform_in(-limit, limit))).collect();
    Tensor::new(shape, data).expect("shape matches data length")
}

fn linear<T: Scalar>(rng: &mut Rng, n_in: usize, n_out: usize) -> Result<Linear<T>> {
    Linear::new(uniform(rng, vec![n_out, n_in], n_in), Tensor::zeros(vec![n_out]))
}

fn features(shape: &[usize], kind: &str) -> Result<usize> {
    match shape {
        [n] => Ok(*n),
        _ => Err(Error::Contract(format!(
            "{kind} layer needs a flat input, got per-sample shape {shape:?}"
        ))),
    }
}

/// Builds a model with weights uniform on ±√(6/fan_in) and zero biases.
/// Layers are named `{kind}{index}` by position. PReLU slopes start at
/// [`SCRATCH_ALPHA`], or at 0 in `retrofit` mode so every activation is a
/// plain ReLU.
pub fn init_model<T: Scalar>(spec: &ArchSpec, seed: u64, retrofit: bool) -> Result<ModelGraph<T>> {
    if spec.input.is_empty() || spec.input.contains(&0) {
        return Err(Error::Contract(format!("invalid input shape {:?}", spec.input)));
    }
    let alpha = T::lit(if retrofit { 0.0 } else { SCRATCH_ALPHA });
    let mut rng = Rng::seed(seed);
    let mut model = ModelGraph::new(spec.input.clone());
    for (i, ls) in spec.layers.iter().enumerate() {
        let name = format!("{}{i}", ls.kind());
        let shape = model.output_shape()?;
        let layer = match *ls {
            LayerSpec::Linear { out } => Layer::Linear(linear(&mut rng, features(&shape, "linear")?, out)?),
            LayerSpec::Block {
                hidden,
                out,
                batch_norm,
                dropout,
            } => {
                let n_in = features(&shape, "block")?;
                let fc1 = linear(&mut rng, n_in, hidden)?;
                let fc2 = linear(&mut rng, hidden, out)?;
                let bn = batch_norm.then(|| BatchNorm::new(hidden));
                let drop = if dropout > 0.0 {
                    Some(Dropout::new(dropout)?)
                } else {
                    None
                };
                Layer::Block(CollapsibleBlock::new(fc1, bn, PRelu::new(alpha), drop, fc2)?)
            }
            LayerSpec::Prelu => Layer::PRelu(PRelu::new(alpha)),
            LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(features(&shape, "batch_norm")?)),
            LayerSpec::Dropout { p } => Layer::Dropout(Dropout::new(p)?),
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let c_in = match shape.as_slice() {
                    [c, _, _] => *c,
                    _ => {
                        return Err(
                            Error::Contract(format!("conv2d layer needs a [c, h, w] input, got {shape:?}"))
                                .in_layer(&name),
                        )
                    }
                };
                let fan_in = c_in * kernel * kernel;
                let k = uniform(&mut rng, vec![out_channels, c_in, kernel, kernel], fan_in);
                Layer::Conv2d(Conv2d::new(k, Tensor::zeros(vec![out_channels]), stride, padding)?)
            }
            LayerSpec::Flatten => Layer::Flatten,
        };
        model.push(name, layer)?;
    }
    Ok(model)
}
