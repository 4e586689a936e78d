//! Slope regularizer and the training losses.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ModelGraph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    /// Strength of the `(1 - alpha)^2` penalty.
    #[serde(default = "default_lc")]
    pub lc: f64,
    /// Share of collapsible blocks regularized, counted from the end.
    #[serde(default = "default_fraction")]
    pub layer_fraction: f64,
}

fn default_lc() -> f64 {
    0.05
}

fn default_fraction() -> f64 {
    1.0
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            lc: default_lc(),
            layer_fraction: default_fraction(),
        }
    }
}

impl RegConfig {
    /// Strength used when fine-tuning an already trained model.
    pub const FINETUNE_LC: f64 = 0.2;
    /// Strength used when training from scratch.
    pub const SCRATCH_LC: f64 = 0.05;

    pub fn new(lc: f64, layer_fraction: f64) -> Result<Self> {
        let cfg = RegConfig { lc, layer_fraction };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lc >= 0.0 && self.lc.is_finite()) {
            return Err(Error::Contract(format!("lc must be finite and >= 0, got {}", self.lc)));
        }
        if !(0.0..=1.0).contains(&self.layer_fraction) {
            return Err(Error::Contract(format!(
                "layer_fraction must lie in [0, 1], got {}",
                self.layer_fraction
            )));
        }
        Ok(())
    }
}

/// Loss terms as they enter the total, i.e. already weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_term: f64,
    pub kl_term: f64,
    pub reg_term: f64,
}

/// `lc * sum (1 - alpha)^2` over the given slope variables.
pub fn reg_loss<T: Scalar>(tape: &mut Tape<T>, alphas: &[Var], cfg: &RegConfig) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(T::zero()));
    for &a in alphas {
        if tape.value(a).len() != 1 {
            return Err(Error::Dimension {
                op: "reg_loss slope",
                left: tape.value(a).shape().to_vec(),
                right: vec![],
            });
        }
        let a = tape.reshape(a, vec![])?;
        let gap = tape.neg(a);
        let gap = tape.add_scalar(gap, T::one());
        let sq = tape.square(gap)?;
        total = tape.add(total, sq)?;
    }
    Ok(tape.scale(total, T::lit(cfg.lc)))
}

/// The last `ceil(fraction * blocks)` collapsible blocks, in model order.
pub fn select_regularized_layers<T: Scalar>(m: &ModelGraph<T>, fraction: f64) -> Vec<String> {
    let blocks = m.block_names();
    let take = ((fraction.clamp(0.0, 1.0) * blocks.len() as f64) - 1e-9)
        .ceil()
        .max(0.0) as usize;
    blocks[blocks.len() - take.min(blocks.len())..].to_vec()
}

fn one_hot<T: Scalar>(labels: &[usize], rows: usize, classes: usize) -> Result<Tensor<T>> {
    if labels.len() != rows {
        return Err(Error::Dimension {
            op: "labels vs logits rows",
            left: vec![labels.len()],
            right: vec![rows, classes],
        });
    }
    let mut data = vec![T::zero(); rows * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Contract(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new(vec![rows, classes], data)
}

/// Batch mean of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let v = tape.value(logits);
    if v.rank() != 2 || v.rows() == 0 {
        return Err(Error::Dimension {
            op: "cross_entropy logits",
            left: v.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let (rows, classes) = (v.rows(), v.cols());
    let mask = tape.constant(one_hot(labels, rows, classes)?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, mask)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -T::one() / T::lit(rows as f64)))
}

/// Batch mean of `KL(teacher || softmax(student))` at temperature 1.
pub fn kl_divergence<T: Scalar>(tape: &mut Tape<T>, student_logits: Var, teacher_probs: &Tensor<T>) -> Result<Var> {
    let v = tape.value(student_logits);
    if v.shape() != teacher_probs.shape() || v.rank() != 2 || v.rows() == 0 {
        return Err(Error::Dimension {
            op: "kl_divergence (student vs teacher)",
            left: v.shape().to_vec(),
            right: teacher_probs.shape().to_vec(),
        });
    }
    let rows = T::lit(v.rows() as f64);
    // sum t log t with 0 log 0 = 0; constant with respect to the student
    let entropy_part = teacher_probs
        .data()
        .iter()
        .filter(|&&t| t > T::zero())
        .fold(T::zero(), |acc, &t| acc + t * t.ln());
    let logq = tape.log_softmax(student_logits)?;
    let t = tape.constant(teacher_probs.detached());
    let cross = tape.mul(logq, t)?;
    let cross = tape.sum(cross);
    let diff = tape.neg(cross);
    let diff = tape.add_scalar(diff, entropy_part);
    Ok(tape.scale(diff, T::one() / rows))
}

/// `CE/2 + KL/2 + reg` with a teacher, `CE + reg` without one.
pub fn composite_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student_logits: Var,
    labels: &[usize],
    teacher_probs: Option<&Tensor<T>>,
    alphas: &[Var],
    cfg: &RegConfig,
) -> Result<(Var, LossBreakdown)> {
    let ce = cross_entropy(tape, student_logits, labels)?;
    let reg = reg_loss(tape, alphas, cfg)?;
    let reg_term = tape.value(reg).item()?.as_f64();
    let (total, ce_term, kl_term) = match teacher_probs {
        Some(teacher) => {
            let kl = kl_divergence(tape, student_logits, teacher)?;
            let half = T::lit(0.5);
            let ce_w = tape.scale(ce, half);
            let kl_w = tape.scale(kl, half);
            let s = tape.add(ce_w, kl_w)?;
            let total = tape.add(s, reg)?;
            (
                total,
                tape.value(ce_w).item()?.as_f64(),
                tape.value(kl_w).item()?.as_f64(),
            )
        }
        None => (tape.add(ce, reg)?, tape.value(ce).item()?.as_f64(), 0.0),
    };
    let breakdown = LossBreakdown {
        total: tape.value(total).item()?.as_f64(),
        ce_term,
        kl_term,
        reg_term,
    };
    Ok((total, breakdown))
}

/// Mean squared error over all elements.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let t = tape.constant(target.detached());
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{CollapsibleBlock, Layer, Linear};

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn alpha_var(tape: &mut Tape<f64>, a: f64) -> Var {
        tape.leaf(Tensor::scalar(a).tracked())
    }

    #[test]
    fn reg_values_and_gradient() {
        let cfg = RegConfig::new(0.05, 1.0).unwrap();
        let mut tape = Tape::new();
        let a = alpha_var(&mut tape, 1.0);
        let r = reg_loss(&mut tape, &[a], &cfg).unwrap();
        assert_eq!(tape.value(r).item().unwrap(), 0.0);

        let mut tape = Tape::new();
        let a = alpha_var(&mut tape, 0.0);
        let r = reg_loss(&mut tape, &[a], &cfg).unwrap();
        close(tape.value(r).item().unwrap(), 0.05, 1e-15);

        let cfg = RegConfig::new(0.2, 1.0).unwrap();
        let mut tape = Tape::new();
        let a = alpha_var(&mut tape, 0.5);
        let r = reg_loss(&mut tape, &[a], &cfg).unwrap();
        tape.backward(r).unwrap();
        close(tape.grad(a).unwrap().item().unwrap(), -0.2, 1e-15);
    }

    #[test]
    fn layer_selection_counts_from_the_end() {
        let mut m = ModelGraph::<f64>::new(vec![1]);
        for i in 0..5 {
            let l = || Linear::new(Tensor::ones(vec![1, 1]), Tensor::zeros(vec![1])).unwrap();
            m.push(
                format!("b{i}"),
                Layer::Block(CollapsibleBlock::plain(l(), 0.3, l()).unwrap()),
            )
            .unwrap();
        }
        assert!(select_regularized_layers(&m, 0.0).is_empty());
        assert_eq!(select_regularized_layers(&m, 0.4), ["b3", "b4"]);
        assert_eq!(select_regularized_layers(&m, 0.01), ["b4"]);
        assert_eq!(select_regularized_layers(&m, 1.0).len(), 5);
    }

    fn ce_of(logits: Vec<Vec<f64>>, labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&logits).unwrap());
        let l = cross_entropy(&mut tape, x, labels).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn cross_entropy_fixtures() {
        close(ce_of(vec![vec![0.0; 4]], &[2]), 4f64.ln(), 1e-12);
        close(ce_of(vec![vec![100.0, 0.0, 0.0]], &[0]), 0.0, 1e-12);
        close(ce_of(vec![vec![0.0, 1.0]], &[0]), (1.0 + 1f64.exp()).ln(), 1e-12);
    }

    #[test]
    fn kl_fixtures() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let t = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = kl_divergence(&mut tape, x, &t).unwrap();
        close(tape.value(k).item().unwrap(), 2f64.ln(), 1e-12);

        let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 1.0, -0.5]]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(logits.clone());
        let k = kl_divergence(&mut tape, x, &logits.softmax_rows().unwrap()).unwrap();
        close(tape.value(k).item().unwrap(), 0.0, 1e-12);
    }

    #[test]
    fn composite_scalar_oracle() {
        let logits = vec![vec![0.5, -0.5], vec![2.0, 1.0]];
        let labels = [1, 0];
        let teacher = vec![vec![0.3, 0.7], vec![0.9, 0.1]];
        let alpha = 0.4;
        let lc = 0.2;

        // independent scalar evaluation
        let mut ce = 0.0;
        let mut kl = 0.0;
        for (row, (&l, t)) in logits.iter().zip(labels.iter().zip(&teacher)) {
            let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            let logq: Vec<f64> = row.iter().map(|v| v - z.ln()).collect();
            ce -= logq[l];
            kl += t
                .iter()
                .zip(&logq)
                .map(|(p, q): (&f64, &f64)| p * (p.ln() - q))
                .sum::<f64>();
        }
        ce /= 2.0;
        kl /= 2.0;
        let reg = lc * (1.0 - alpha) * (1.0 - alpha);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&logits).unwrap());
        let a = tape.leaf(Tensor::scalar(alpha));
        let t = Tensor::from_rows(&teacher).unwrap();
        let cfg = RegConfig::new(lc, 1.0).unwrap();
        let (_, b) = composite_loss(&mut tape, x, &labels, Some(&t), &[a], &cfg).unwrap();
        close(b.ce_term, ce / 2.0, 1e-12);
        close(b.kl_term, kl / 2.0, 1e-12);
        close(b.reg_term, reg, 1e-15);
        close(b.total, ce / 2.0 + kl / 2.0 + reg, 1e-12);
        close(b.total, b.ce_term + b.kl_term + b.reg_term, 1e-12);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&logits).unwrap());
        let a = tape.leaf(Tensor::scalar(1.0));
        let (_, b) = composite_loss(&mut tape, x, &labels, None, &[a], &cfg).unwrap();
        close(b.total, ce, 1e-12);
    }

    #[test]
    fn mse_fixture() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(vec![1.0, -1.0]));
        let l = mse_loss(&mut tape, p, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 1.0);
    }

    #[test]
    fn bad_labels_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 3]));
        assert!(cross_entropy(&mut tape, x, &[0]).is_err());
        assert!(cross_entropy(&mut tape, x, &[0, 3]).is_err());
    }
}
