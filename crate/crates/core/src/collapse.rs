//! Fusing linear-activation blocks into single layers, plus gain accounting.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CollapsibleBlock, Conv2d, Layer, Linear, ModelGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseConfig {
    /// Largest `|1 - alpha|` still treated as linear.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    0.05
}

impl Default for CollapseConfig {
    fn default() -> Self {
        CollapseConfig { tau: default_tau() }
    }
}

impl CollapseConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::Contract(format!("tau must be finite and >= 0, got {tau}")));
        }
        Ok(CollapseConfig { tau })
    }

    pub fn accepts(&self, alpha: f64) -> bool {
        (1.0 - alpha).abs() <= self.tau
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CollapseOutcome<T> {
    Collapsed(Linear<T>),
    Uncollapsible { alpha: T },
}

/// Equivalent block without BatchNorm: the eval-mode normalization is
/// folded into `fc1` as `s * W1` and `s * (b1 - mean) + beta`, with
/// `s = gamma / sqrt(var + eps)`.
pub fn without_batchnorm<T: Scalar>(block: &CollapsibleBlock<T>) -> Result<CollapsibleBlock<T>> {
    let Some(bn) = &block.bn else {
        return Ok(block.clone());
    };
    for (what, t) in [
        ("bn.gamma", &bn.gamma),
        ("bn.beta", &bn.beta),
        ("bn.running_mean", &bn.running_mean),
        ("bn.running_var", &bn.running_var),
    ] {
        t.ensure_finite(what)?;
    }
    let s = bn.scale();
    s.ensure_finite("batchnorm scale")?;
    let (w1, b1) = (&block.fc1.weight, &block.fc1.bias);
    let n_in = w1.cols();
    let w = Tensor::new(
        w1.shape().to_vec(),
        w1.data()
            .iter()
            .enumerate()
            .map(|(i, &w)| w * s.data()[i / n_in])
            .collect(),
    )?;
    let b = s.mul(&b1.sub(&bn.running_mean)?)?.add(&bn.beta)?;
    let mut out = block.clone();
    out.fc1 = Linear::new(w, b)?;
    out.bn = None;
    Ok(out)
}

/// Folds the block into one affine map, treating the activation as the
/// identity whatever its slope: `W = W2 W1'`, `b = W2 b1' + b2` where
/// `W1'`, `b1'` already absorb BatchNorm (see [`without_batchnorm`]).
pub fn fold_block<T: Scalar>(block: &CollapsibleBlock<T>) -> Result<Linear<T>> {
    for (what, t) in [
        ("fc1.weight", &block.fc1.weight),
        ("fc1.bias", &block.fc1.bias),
        ("fc2.weight", &block.fc2.weight),
        ("fc2.bias", &block.fc2.bias),
    ] {
        t.ensure_finite(what)?;
    }
    if !block.alpha().is_finite() {
        return Err(Error::Numeric("non-finite activation slope".into()));
    }
    let plain = without_batchnorm(block)?;
    let (w1, b1) = (&plain.fc1.weight, &plain.fc1.bias);
    let (w2, b2) = (&plain.fc2.weight, &plain.fc2.bias);
    let weight = w2.matmul(w1)?;
    let bias = Tensor::from_vec(w2.matvec(b1.data())?).add(b2)?;
    weight.ensure_finite("fused weight")?;
    bias.ensure_finite("fused bias")?;
    Linear::new(weight, bias)
}

/// Fuses the block if its slope is within `tau` of 1.
pub fn collapse_block<T: Scalar>(block: &CollapsibleBlock<T>, cfg: &CollapseConfig) -> Result<CollapseOutcome<T>> {
    let alpha = block.alpha();
    if !alpha.is_finite() {
        return Err(Error::Numeric("non-finite activation slope".into()));
    }
    if !cfg.accepts(alpha.as_f64()) {
        return Ok(CollapseOutcome::Uncollapsible { alpha });
    }
    fold_block(block).map(CollapseOutcome::Collapsed)
}

/// One row per collapsible block visited by [`collapse_model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub layer_name: String,
    pub alpha_at_collapse: f64,
    pub collapsed: bool,
    pub params_before: u64,
    pub params_after: u64,
    /// Weight-only gain of the fused block; 0 when the block was left intact.
    pub gain_fraction: f64,
    pub macs_before: u64,
    pub macs_after: u64,
}

impl CollapseReport {
    pub fn params_removed(&self) -> i64 {
        self.params_before as i64 - self.params_after as i64
    }
}

fn report_for<T: Scalar>(name: &str, block: &CollapsibleBlock<T>, fused: Option<&Linear<T>>) -> CollapseReport {
    let (params_after, macs_after, gain) = match fused {
        Some(l) => (
            l.param_count(),
            l.macs(),
            dense_gain(&GainQuery {
                n_in: block.n_in(),
                n_hidden: block.hidden(),
                n_out: block.n_out(),
            }),
        ),
        None => (block.param_count(), block.macs(), 0.0),
    };
    CollapseReport {
        layer_name: name.to_string(),
        alpha_at_collapse: block.alpha().as_f64(),
        collapsed: fused.is_some(),
        params_before: block.param_count(),
        params_after,
        gain_fraction: gain,
        macs_before: block.macs(),
        macs_after,
    }
}

/// Collapses the named block in place. Returns its report.
pub fn collapse_named<T: Scalar>(m: &mut ModelGraph<T>, name: &str, cfg: &CollapseConfig) -> Result<CollapseReport> {
    let index = m.position(name).ok_or_else(|| Error::NoSuchLayer(name.to_string()))?;
    let block = match &m.layers()[index].layer {
        Layer::Block(b) => b.clone(),
        other => {
            return Err(Error::Contract(format!(
                "layer `{name}` is a {} layer, not a collapsible block",
                other.kind()
            )))
        }
    };
    let outcome = collapse_block(&block, cfg).map_err(|e| e.in_layer(name))?;
    let report = match outcome {
        CollapseOutcome::Collapsed(fused) => {
            let report = report_for(name, &block, Some(&fused));
            m.replace(index, Layer::Linear(fused))?;
            info!("collapsed {name} at alpha {:.6}", report.alpha_at_collapse);
            report
        }
        CollapseOutcome::Uncollapsible { alpha } => {
            debug!("{name} left intact, alpha {alpha} outside tau {}", cfg.tau);
            report_for(name, &block, None)
        }
    };
    Ok(report)
}

/// Replaces every block that passes the slope test by its fused linear
/// layer. Blocks that fail are left intact and still get a report row.
pub fn collapse_model<T: Scalar>(
    m: &ModelGraph<T>,
    cfg: &CollapseConfig,
) -> Result<(ModelGraph<T>, Vec<CollapseReport>)> {
    let mut out = m.clone();
    let reports = m
        .block_names()
        .iter()
        .map(|name| collapse_named(&mut out, name, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, reports))
}

/// Kernel of `conv(conv(x, k1) + b1, k2) + b2` as one convolution, with
/// both convolutions at stride 1 and without padding. `k1` is
/// `[c_h, c_in, k1, k1]`, `k2` is `[c_out, c_h, k2, k2]`; the result has
/// spatial size `k1 + k2 - 1`.
pub fn fuse_conv<T: Scalar>(
    k1: &Tensor<T>,
    b1: &Tensor<T>,
    k2: &Tensor<T>,
    b2: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (s1, s2) = (k1.shape(), k2.shape());
    if s1.len() != 4 || s2.len() != 4 || s2[1] != s1[0] || s1[2] != s1[3] || s2[2] != s2[3] {
        return Err(Error::Dimension {
            op: "fuse_conv (kernels [c_h, c_in, k1, k1] and [c_out, c_h, k2, k2])",
            left: s1.to_vec(),
            right: s2.to_vec(),
        });
    }
    let (ch, cin, ka) = (s1[0], s1[1], s1[2]);
    let (cout, kb) = (s2[0], s2[2]);
    if b1.shape() != [ch] || b2.shape() != [cout] {
        return Err(Error::Dimension {
            op: "fuse_conv biases",
            left: b1.shape().to_vec(),
            right: b2.shape().to_vec(),
        });
    }
    let k = ka + kb - 1;
    let mut kern = vec![T::zero(); cout * cin * k * k];
    let (d1, d2) = (k1.data(), k2.data());
    for o in 0..cout {
        for h in 0..ch {
            let base2 = (o * ch + h) * kb * kb;
            for i in 0..cin {
                let base1 = (h * cin + i) * ka * ka;
                let dst = (o * cin + i) * k * k;
                for uy in 0..ka {
                    for ux in 0..ka {
                        let a = d1[base1 + uy * ka + ux];
                        for vy in 0..kb {
                            for vx in 0..kb {
                                let at = dst + (uy + vy) * k + ux + vx;
                                kern[at] = kern[at] + a * d2[base2 + vy * kb + vx];
                            }
                        }
                    }
                }
            }
        }
    }
    let bias = (0..cout)
        .map(|o| {
            (0..ch).fold(b2.data()[o], |acc, h| {
                let base = (o * ch + h) * kb * kb;
                let tap_sum: T = d2[base..base + kb * kb].iter().copied().sum();
                acc + b1.data()[h] * tap_sum
            })
        })
        .collect();
    Ok((Tensor::new(vec![cout, cin, k, k], kern)?, Tensor::from_vec(bias)))
}

/// Fuses two conv layers with a linear activation between them. The fused
/// layer pads by `p1 + p2`, which matches the pair exactly on interior
/// pixels at least `p1 + p2` from every border.
pub fn fuse_conv_layers<T: Scalar>(c1: &Conv2d<T>, c2: &Conv2d<T>) -> Result<Conv2d<T>> {
    if c1.stride != 1 || c2.stride != 1 {
        return Err(Error::Unsupported(format!(
            "conv fusion needs stride 1, got strides {} and {}",
            c1.stride, c2.stride
        )));
    }
    let (k, b) = fuse_conv(&c1.kernel, &c1.bias, &c2.kernel, &c2.bias)?;
    Conv2d::new(k, b, 1, c1.padding + c2.padding)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GainQuery {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
}

impl GainQuery {
    pub fn new(n_in: usize, n_hidden: usize, n_out: usize) -> Result<Self> {
        if n_in == 0 || n_hidden == 0 || n_out == 0 {
            return Err(Error::Contract(format!(
                "layer widths must be positive, got {n_in}, {n_hidden}, {n_out}"
            )));
        }
        Ok(GainQuery { n_in, n_hidden, n_out })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGainQuery {
    pub k1: usize,
    pub k2: usize,
    pub c_in: usize,
    pub c_hidden: usize,
    pub c_out: usize,
}

impl ConvGainQuery {
    pub fn new(k1: usize, k2: usize, c_in: usize, c_hidden: usize, c_out: usize) -> Result<Self> {
        if [k1, k2, c_in, c_hidden, c_out].contains(&0) {
            return Err(Error::Contract(
                "kernel sizes and channel counts must be positive".into(),
            ));
        }
        Ok(ConvGainQuery {
            k1,
            k2,
            c_in,
            c_hidden,
            c_out,
        })
    }
}

/// Fraction of weights removed by fusing `n_in -> n_hidden -> n_out` into
/// `n_in -> n_out`, biases and BatchNorm excluded. Negative when the hidden
/// layer is a bottleneck.
pub fn dense_gain(q: &GainQuery) -> f64 {
    let (i, h, o) = (q.n_in as f64, q.n_hidden as f64, q.n_out as f64);
    1.0 - (i * o) / (h * (i + o))
}

/// Weight gain of fusing two stride-1 convolutions.
pub fn conv_gain(q: &ConvGainQuery) -> f64 {
    let (k1, k2) = (q.k1 as f64, q.k2 as f64);
    let (ci, ch, co) = (q.c_in as f64, q.c_hidden as f64, q.c_out as f64);
    let k = k1 + k2 - 1.0;
    1.0 - (k1 * k1 * ci * ch + k2 * k2 * ch * co) / (k * k * ci * co)
}

/// Exact trainable-parameter count.
pub trait CountParams {
    fn count_params(&self) -> u64;
}

impl<T: Scalar> CountParams for ModelGraph<T> {
    fn count_params(&self) -> u64 {
        self.param_count()
    }
}

impl<T: Scalar> CountParams for Linear<T> {
    fn count_params(&self) -> u64 {
        self.param_count()
    }
}

impl<T: Scalar> CountParams for CollapsibleBlock<T> {
    fn count_params(&self) -> u64 {
        self.param_count()
    }
}

pub fn count_params(x: &impl CountParams) -> u64 {
    x.count_params()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNorm, PRelu};

    fn lin(rows: &[Vec<f64>], b: &[f64]) -> Linear<f64> {
        Linear::new(Tensor::from_rows(rows).unwrap(), Tensor::from_vec(b.to_vec())).unwrap()
    }

    fn hand_block(alpha: f64) -> CollapsibleBlock<f64> {
        CollapsibleBlock::plain(
            lin(&[vec![1., 2.], vec![3., 4.]], &[1., 1.]),
            alpha,
            lin(&[vec![1., 1.], vec![1., -1.]], &[0., 0.]),
        )
        .unwrap()
    }

    #[test]
    fn hand_fusion() {
        let CollapseOutcome::Collapsed(l) = collapse_block(&hand_block(1.0), &CollapseConfig::default()).unwrap()
        else {
            panic!("expected a fusion");
        };
        assert_eq!(l.weight.data(), &[4., 6., -2., -2.]);
        assert_eq!(l.bias.data(), &[2., 0.]);
    }

    #[test]
    fn one_dimensional_batchnorm_fusion() {
        let bn = BatchNorm::from_parts(
            Tensor::from_vec(vec![2.0]),
            Tensor::from_vec(vec![1.0]),
            Tensor::from_vec(vec![0.5]),
            Tensor::from_vec(vec![1.0]),
            0.1,
            0.0,
        )
        .unwrap();
        let block = CollapsibleBlock::new(
            lin(&[vec![1.]], &[0.]),
            Some(bn),
            PRelu::new(1.0),
            None,
            lin(&[vec![3.]], &[0.]),
        )
        .unwrap();
        let l = fold_block(&block).unwrap();
        assert_eq!(l.weight.data(), &[6.]);
        assert_eq!(l.bias.data(), &[0.]);
    }

    #[test]
    fn slope_guard() {
        let cfg = CollapseConfig::default();
        assert!(matches!(
            collapse_block(&hand_block(0.5), &cfg).unwrap(),
            CollapseOutcome::Uncollapsible { .. }
        ));
        assert!(matches!(
            collapse_block(&hand_block(0.96), &cfg).unwrap(),
            CollapseOutcome::Collapsed(_)
        ));
        assert!(matches!(
            collapse_block(&hand_block(1.04), &cfg).unwrap(),
            CollapseOutcome::Collapsed(_)
        ));
        let strict = CollapseConfig::new(0.0).unwrap();
        assert!(matches!(
            collapse_block(&hand_block(0.999), &strict).unwrap(),
            CollapseOutcome::Uncollapsible { .. }
        ));
        assert!(CollapseConfig::new(-0.1).is_err());
    }

    #[test]
    fn non_finite_weights_are_numeric_errors() {
        let mut b = hand_block(1.0);
        b.fc2.weight.data_mut()[0] = f64::NAN;
        let err = collapse_block(&b, &CollapseConfig::default()).unwrap_err();
        assert_eq!(err.category(), "numeric");
    }

    #[test]
    fn mixed_model_fuses_one_block() {
        let mut m = ModelGraph::new(vec![2]);
        m.push("a", Layer::Block(hand_block(1.0))).unwrap();
        m.push("b", Layer::Block(hand_block(0.0))).unwrap();
        let (out, reports) = collapse_model(&m, &CollapseConfig::default()).unwrap();
        assert_eq!(reports.len(), 2);
        assert!(reports[0].collapsed && !reports[1].collapsed);
        assert!(matches!(out.layer("a"), Some(Layer::Linear(_))));
        assert!(matches!(out.layer("b"), Some(Layer::Block(_))));
        let removed: i64 = reports.iter().map(CollapseReport::params_removed).sum();
        assert_eq!(out.param_count() as i64, m.param_count() as i64 - removed);
        // 2x2 -> 2x2 -> 2: weight gain 1 - 4 / (2 * 4)
        assert_eq!(reports[0].gain_fraction, 0.5);
        assert_eq!(reports[0].params_after, 6);
    }

    #[test]
    fn model_without_blocks_unchanged() {
        let mut m = ModelGraph::new(vec![2]);
        m.push("fc", Layer::Linear(lin(&[vec![1., 2.]], &[0.]))).unwrap();
        let (out, reports) = collapse_model(&m, &CollapseConfig::default()).unwrap();
        assert_eq!(out, m);
        assert!(reports.is_empty());
    }

    #[test]
    fn one_by_one_conv_fusion_is_matmul() {
        let k1 = Tensor::new(vec![3, 2, 1, 1], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let k2 = Tensor::new(vec![2, 3, 1, 1], vec![1., 0., -1., 2., 1., 0.]).unwrap();
        let (k, b) = fuse_conv(
            &k1,
            &Tensor::from_vec(vec![1., 0., 2.]),
            &k2,
            &Tensor::from_vec(vec![0.5, 0.]),
        )
        .unwrap();
        let m1 = Tensor::new(vec![3, 2], k1.data().to_vec()).unwrap();
        let m2 = Tensor::new(vec![2, 3], k2.data().to_vec()).unwrap();
        assert_eq!(k.data(), m2.matmul(&m1).unwrap().data());
        assert_eq!(b.data(), &[0.5 + 1. - 2., 2.]);
    }

    #[test]
    fn three_by_three_pair_gives_five_by_five() {
        let (k, _) = fuse_conv(
            &Tensor::<f64>::ones(vec![1, 1, 3, 3]),
            &Tensor::zeros(vec![1]),
            &Tensor::ones(vec![1, 1, 3, 3]),
            &Tensor::zeros(vec![1]),
        )
        .unwrap();
        assert_eq!(k.shape(), &[1, 1, 5, 5]);
        // centre tap sees all 9 * 9 / 9 overlaps of two box filters
        assert_eq!(k.data()[12], 9.0);
        assert_eq!(k.data()[0], 1.0);
    }

    #[test]
    fn strided_conv_fusion_unsupported() {
        let c1 = Conv2d::new(Tensor::<f64>::ones(vec![1, 1, 3, 3]), Tensor::zeros(vec![1]), 2, 0).unwrap();
        let c2 = Conv2d::new(Tensor::ones(vec![1, 1, 3, 3]), Tensor::zeros(vec![1]), 1, 0).unwrap();
        assert_eq!(fuse_conv_layers(&c1, &c2).unwrap_err().category(), "unsupported");
    }

    #[test]
    fn gain_fixtures() {
        let g = |i, h, o| dense_gain(&GainQuery::new(i, h, o).unwrap());
        assert_eq!(g(2, 1, 2), 0.0);
        assert!((g(192, 768, 192) - 0.875).abs() < 1e-12);
        assert!((g(4, 1, 4) + 1.0).abs() < 1e-12);
        let c = |k1, k2, a, b, d| conv_gain(&ConvGainQuery::new(k1, k2, a, b, d).unwrap());
        assert!((c(1, 1, 8, 8, 8) + 1.0).abs() < 1e-12);
        assert!((c(3, 3, 64, 64, 64) - 0.28).abs() < 1e-12);
        assert!((c(3, 3, 64, 512, 64) + 4.76).abs() < 1e-12);
        assert!(GainQuery::new(0, 1, 1).is_err());
    }
}
