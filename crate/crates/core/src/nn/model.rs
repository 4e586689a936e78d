use std::collections::{BTreeMap, HashMap, HashSet};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{BatchNorm, CollapsibleBlock, Conv2d, Ctx, Dropout, Linear, Mode, PRelu};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Linear(Linear<T>),
    PRelu(PRelu<T>),
    BatchNorm(BatchNorm<T>),
    Dropout(Dropout),
    Conv2d(Conv2d<T>),
    Flatten,
    Block(CollapsibleBlock<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::PRelu(_) => "prelu",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Dropout(_) => "dropout",
            Layer::Conv2d(_) => "conv2d",
            Layer::Flatten => "flatten",
            Layer::Block(_) => "block",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let features = |n: usize, op: &'static str| -> Result<()> {
            if input.len() != 1 || input[0] != n {
                return Err(Error::Dimension {
                    op,
                    left: input.to_vec(),
                    right: vec![n],
                });
            }
            Ok(())
        };
        match self {
            Layer::Linear(l) => {
                features(l.in_features(), "linear input width")?;
                Ok(vec![l.out_features()])
            }
            Layer::Block(b) => {
                features(b.n_in(), "block input width")?;
                Ok(vec![b.n_out()])
            }
            Layer::BatchNorm(bn) => {
                features(bn.width(), "batchnorm width")?;
                Ok(input.to_vec())
            }
            Layer::PRelu(_) | Layer::Dropout(_) => Ok(input.to_vec()),
            Layer::Conv2d(c) => c.output_shape(input),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn param_count(&self) -> u64 {
        match self {
            Layer::Linear(l) => l.param_count(),
            Layer::PRelu(_) => 1,
            Layer::BatchNorm(bn) => bn.param_count(),
            Layer::Dropout(_) | Layer::Flatten => 0,
            Layer::Conv2d(c) => c.param_count(),
            Layer::Block(b) => b.param_count(),
        }
    }

    /// Multiply-accumulates for one sample of shape `input`.
    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        Ok(match self {
            Layer::Linear(l) => l.macs(),
            Layer::Block(b) => b.macs(),
            Layer::Conv2d(c) => {
                let out = c.output_shape(input)?;
                let k = c.kernel_size() as u64;
                k * k * (c.in_channels() * out.iter().product::<usize>()) as u64
            }
            _ => 0,
        })
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, ctx: &mut Ctx, name: &str) -> Result<Var> {
        match self {
            Layer::Linear(l) => l.forward(tape, x, name),
            Layer::PRelu(p) => p.forward(tape, x, name),
            Layer::BatchNorm(bn) => match ctx.mode {
                Mode::Train => bn.forward_train(tape, x, name),
                Mode::Eval => bn.forward_eval(tape, x, name),
            },
            Layer::Dropout(d) => match ctx.mode {
                Mode::Train => d.forward_train(tape, x, &mut ctx.rng),
                Mode::Eval => Ok(x),
            },
            Layer::Conv2d(c) => c.forward(tape, x, name),
            Layer::Flatten => {
                let s = tape.value(x).shape().to_vec();
                let rest = s.iter().skip(1).product();
                tape.reshape(x, vec![s.first().copied().unwrap_or(1), rest])
            }
            Layer::Block(b) => b.forward(tape, x, ctx, name),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Linear(l) => l.infer(x),
            Layer::PRelu(p) => Ok(p.infer(x)),
            Layer::BatchNorm(bn) => bn.infer(x),
            Layer::Dropout(_) => Ok(x.detached()),
            Layer::Conv2d(c) => c.infer(x),
            Layer::Flatten => {
                let s = x.shape();
                x.reshape(vec![s.first().copied().unwrap_or(1), s.iter().skip(1).product()])
            }
            Layer::Block(b) => b.infer(x),
        }
    }

    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        fn own<'a, T>(v: [(&'static str, &'a Tensor<T>); 2]) -> Vec<(String, &'a Tensor<T>)> {
            v.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
        }
        match self {
            Layer::Linear(l) => own(l.params()),
            Layer::PRelu(p) => vec![("alpha".to_string(), &p.alpha)],
            Layer::BatchNorm(bn) => own(bn.params()),
            Layer::Conv2d(c) => own(c.params()),
            Layer::Block(b) => b.params(),
            Layer::Dropout(_) | Layer::Flatten => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        fn own<'a, T>(v: [(&'static str, &'a mut Tensor<T>); 2]) -> Vec<(String, &'a mut Tensor<T>)> {
            v.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
        }
        match self {
            Layer::Linear(l) => own(l.params_mut()),
            Layer::PRelu(p) => vec![("alpha".to_string(), &mut p.alpha)],
            Layer::BatchNorm(bn) => own(bn.params_mut()),
            Layer::Conv2d(c) => own(c.params_mut()),
            Layer::Block(b) => b.params_mut(),
            Layer::Dropout(_) | Layer::Flatten => vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode<T> {
    pub name: String,
    pub layer: Layer<T>,
}

/// Ordered sequence of uniquely named layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T> {
    input_shape: Vec<usize>,
    nodes: Vec<LayerNode<T>>,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Scalar> ModelGraph<T> {
    /// Empty model accepting samples of `input_shape` (batch axis excluded).
    pub fn new(input_shape: impl Into<Vec<usize>>) -> Self {
        ModelGraph {
            input_shape: input_shape.into(),
            nodes: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.nodes.iter().find(|n| n.name == name).map(|n| &n.layer)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer<T>> {
        self.nodes.iter_mut().find(|n| n.name == name).map(|n| &mut n.layer)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Per-sample output shape, or the input shape for an empty model.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        self.nodes.iter().try_fold(self.input_shape.clone(), |s, n| {
            n.layer.output_shape(&s).map_err(|e| e.in_layer(&n.name))
        })
    }

    /// Appends a layer after checking name uniqueness and dimensions.
    pub fn push(&mut self, name: impl Into<String>, layer: Layer<T>) -> Result<()> {
        let name = name.into();
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::Contract(format!("duplicate layer name `{name}`")));
        }
        let prev = self.output_shape()?;
        layer.output_shape(&prev).map_err(|e| e.in_layer(&name))?;
        self.nodes.push(LayerNode { name, layer });
        Ok(())
    }

    /// Replaces the layer at `index`, keeping its name. The new layer must
    /// map the same input shape to the same output shape.
    pub fn replace(&mut self, index: usize, layer: Layer<T>) -> Result<()> {
        let input = self.nodes[..index]
            .iter()
            .try_fold(self.input_shape.clone(), |s, n| n.layer.output_shape(&s))?;
        let before = self.nodes[index].layer.output_shape(&input)?;
        let after = layer
            .output_shape(&input)
            .map_err(|e| e.in_layer(&self.nodes[index].name))?;
        if before != after {
            return Err(Error::Dimension {
                op: "layer replacement output shape",
                left: before,
                right: after,
            });
        }
        self.nodes[index].layer = layer;
        Ok(())
    }

    /// Checks unique names and adjacent dimension compatibility.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.name.as_str()) {
                return Err(Error::Contract(format!("duplicate layer name `{}`", n.name)));
            }
        }
        self.output_shape().map(|_| ())
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let mut h = x;
        for node in &mut self.nodes {
            h = node
                .layer
                .forward(tape, h, ctx, &node.name)
                .map_err(|e| e.in_layer(&node.name))?;
        }
        Ok(h)
    }

    /// Eval-mode forward over a batch without recording a tape.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_range(0..self.nodes.len(), x)
    }

    /// Eval-mode forward through the layers in `range` only.
    pub fn infer_range(&self, range: std::ops::Range<usize>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.detached();
        for node in &self.nodes[range] {
            h = node.layer.infer(&h).map_err(|e| e.in_layer(&node.name))?;
        }
        Ok(h)
    }

    pub fn param_count(&self) -> u64 {
        self.nodes.iter().map(|n| n.layer.param_count()).sum()
    }

    /// Multiply-accumulates for a single input sample.
    pub fn macs_per_sample(&self) -> Result<u64> {
        let mut shape = self.input_shape.clone();
        let mut total = 0;
        for n in &self.nodes {
            total += n.layer.macs(&shape)?;
            shape = n.layer.output_shape(&shape)?;
        }
        Ok(total)
    }

    /// Every parameter tensor under its fully qualified name.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.nodes
            .iter()
            .flat_map(|n| {
                n.layer
                    .params()
                    .into_iter()
                    .map(move |(p, t)| (format!("{}.{p}", n.name), t))
            })
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.nodes
            .iter_mut()
            .flat_map(|n| {
                let name = n.name.clone();
                n.layer
                    .params_mut()
                    .into_iter()
                    .map(move |(p, t)| (format!("{name}.{p}"), t))
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Adds the tape's named-parameter gradients into each tracked tensor.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) -> Result<()> {
        let mut params: HashMap<String, &mut Tensor<T>> = self
            .named_params_mut()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect();
        for (name, g) in tape.named_grads() {
            if let Some(t) = params.get_mut(name) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Names of every collapsible block, in model order.
    pub fn block_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.layer, Layer::Block(_)))
            .map(|n| n.name.clone())
            .collect()
    }

    pub fn block(&self, name: &str) -> Option<&CollapsibleBlock<T>> {
        match self.layer(name)? {
            Layer::Block(b) => Some(b),
            _ => None,
        }
    }

    /// Slope of every PReLU, standalone or inside a block, keyed by the
    /// owning layer's name.
    pub fn alphas(&self) -> Vec<(String, T)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.layer {
                Layer::PRelu(p) => Some((n.name.clone(), p.alpha())),
                Layer::Block(b) => Some((n.name.clone(), b.alpha())),
                _ => None,
            })
            .collect()
    }

    /// Tape parameter name of the slope owned by layer `name`.
    pub fn alpha_param_name(&self, name: &str) -> Option<String> {
        match self.layer(name)? {
            Layer::PRelu(_) => Some(format!("{name}.alpha")),
            Layer::Block(_) => Some(format!("{name}.act.alpha")),
            _ => None,
        }
    }
}
