//! Empirical check of the probabilistic error bound for collapsing a block
//! whose slope is close to, but not exactly, 1.
//!
//! For a plain block `Y_a = W2 prelu_a(W1 x + b1) + b2` and its linearized
//! form `Y_lin` (slope 1), the published constant is
//! `C = sigma_max(W2 W1)^2 |x_delta|^2 + |W2 b1|^2`, with the claim that
//! `|Y_lin - Y_a|^2 <= C (1 - a)^2` holds with probability above `1 - delta`.
//! That per-sample inequality does not hold pathwise in general (see the
//! fixture tests below), so the report also carries a constant that does:
//! `C_op = sigma_max(W2)^2 (sigma_max(W1) |x_delta| + |b1|)^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::CollapsibleBlock;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fewest samples [`verify_bound`] accepts.
pub const MIN_SAMPLES: usize = 100;

const POWER_TOL: f64 = 1e-8;
const POWER_MAX_ITERS: usize = 1000;
const POWER_SEED: u64 = 0x5eed_51a6;

/// Largest singular value, by power iteration on `MᵀM` from a seeded start.
/// Stops when the eigenvalue estimate changes by less than `1e-8` relative,
/// or after 1000 iterations.
pub fn sigma_max<T: Scalar>(m: &Tensor<T>) -> Result<f64> {
    power_sigma(m, POWER_TOL, POWER_MAX_ITERS)
}

/// Power iteration undershoots, so the pathwise comparisons, which are
/// tight up to rounding when `W2` is rank one, run it to convergence.
const PATHWISE_TOL: f64 = 1e-15;
const PATHWISE_MAX_ITERS: usize = 100_000;

fn power_sigma<T: Scalar>(m: &Tensor<T>, tol: f64, max_iters: usize) -> Result<f64> {
    if m.rank() != 2 {
        return Err(Error::Dimension {
            op: "sigma_max",
            left: m.shape().to_vec(),
            right: vec![2],
        });
    }
    m.ensure_finite("sigma_max input")?;
    let (rows, cols) = (m.rows(), m.cols());
    if rows == 0 || cols == 0 {
        return Ok(0.0);
    }
    let a: Vec<f64> = m.data().iter().map(|v| v.as_f64()).collect();
    let apply = |v: &[f64]| -> Vec<f64> {
        let mv: Vec<f64> = (0..rows)
            .map(|i| (0..cols).map(|j| a[i * cols + j] * v[j]).sum())
            .collect();
        (0..cols)
            .map(|j| (0..rows).map(|i| a[i * cols + j] * mv[i]).sum())
            .collect()
    };
    let mut rng = Rng::seed(POWER_SEED);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.uniform_in(-1.0, 1.0) + 1e-3).collect();
    let mut lambda = 0.0;
    for _ in 0..max_iters {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let w = apply(&v);
        let next: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let done = (next - lambda).abs() <= tol * next.abs();
        lambda = next;
        v = w;
        if done {
            break;
        }
    }
    Ok(lambda.max(0.0).sqrt())
}

fn row_norms<T: Scalar>(samples: &Tensor<T>) -> Result<Vec<f64>> {
    if samples.rank() != 2 {
        return Err(Error::Dimension {
            op: "samples (expected [n, features])",
            left: samples.shape().to_vec(),
            right: vec![],
        });
    }
    Ok((0..samples.rows())
        .map(|i| samples.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect())
}

fn nearest_rank(mut norms: Vec<f64>, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Contract(format!("delta must lie in (0, 1), got {delta}")));
    }
    if norms.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    norms.sort_by(f64::total_cmp);
    let n = norms.len();
    let rank = (((1.0 - delta) * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(norms[rank - 1])
}

/// Nearest-rank `(1 - delta)` quantile of the sample rows' Euclidean norms.
pub fn estimate_x_delta<T: Scalar>(samples: &Tensor<T>, delta: f64) -> Result<f64> {
    nearest_rank(row_norms(samples)?, delta)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn to_f64<T: Scalar>(t: &[T]) -> Vec<f64> {
    t.iter().map(|v| v.as_f64()).collect()
}

/// `sigma_max(W2 W1)^2 x_delta^2 + |W2 b1|^2`.
pub fn bound_constant<T: Scalar>(w1: &Tensor<T>, b1: &Tensor<T>, w2: &Tensor<T>, x_delta_norm: f64) -> Result<f64> {
    let s = sigma_max(&w2.matmul(w1)?)?;
    let w2b1 = to_f64(&w2.matvec(b1.data())?);
    Ok(s * s * x_delta_norm * x_delta_norm + norm(&w2b1).powi(2))
}

/// `sigma_max(W2)^2 (sigma_max(W1) x_delta + |b1|)^2`, which bounds the
/// per-sample squared error divided by `(1 - alpha)^2` for every input of
/// norm at most `x_delta`.
pub fn operator_constant<T: Scalar>(w1: &Tensor<T>, b1: &Tensor<T>, w2: &Tensor<T>, x_delta_norm: f64) -> Result<f64> {
    let s1 = sigma_max(w1)?;
    let s2 = sigma_max(w2)?;
    let inner = s1 * x_delta_norm + norm(&to_f64(b1.data()));
    Ok(s2 * s2 * inner * inner)
}

/// Per-sample quantities for the pathwise inequalities at one input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pathwise {
    /// `|Y_lin - Y_a|^2`.
    pub error_sq: f64,
    /// `(1-a)^2 (|W2 W1 x|^2 + |W2 b1|^2)`, the published per-sample form.
    pub published: f64,
    /// `(1-a)^2 (|W2 W1 x| + |W2 b1|)^2`.
    pub triangle: f64,
    /// `(1-a)^2 sigma_max(W2)^2 |min(0, W1 x + b1)|^2`.
    pub masked: f64,
    /// `(1-a)^2 sigma_max(W2)^2 (sigma_max(W1) |x| + |b1|)^2`.
    pub operator: f64,
}

/// Precomputed per-block terms for [`Pathwise`] evaluation.
#[derive(Clone, Debug)]
pub struct PathwiseBlock {
    w1: Tensor<f64>,
    b1: Vec<f64>,
    w2: Tensor<f64>,
    w21: Tensor<f64>,
    w2b1_norm: f64,
    b1_norm: f64,
    sigma1: f64,
    sigma2: f64,
    alpha: f64,
}

impl PathwiseBlock {
    pub fn new<T: Scalar>(block: &CollapsibleBlock<T>) -> Result<Self> {
        if block.bn.is_some() {
            return Err(Error::Contract("bound analysis covers blocks without BatchNorm".into()));
        }
        let cast = |t: &Tensor<T>| Tensor::new(t.shape().to_vec(), to_f64(t.data()));
        let w1 = cast(&block.fc1.weight)?;
        let w2 = cast(&block.fc2.weight)?;
        let b1 = to_f64(block.fc1.bias.data());
        let w21 = w2.matmul(&w1)?;
        Ok(PathwiseBlock {
            w2b1_norm: norm(&w2.matvec(&b1)?),
            b1_norm: norm(&b1),
            sigma1: power_sigma(&w1, PATHWISE_TOL, PATHWISE_MAX_ITERS)?,
            sigma2: power_sigma(&w2, PATHWISE_TOL, PATHWISE_MAX_ITERS)?,
            alpha: block.alpha().as_f64(),
            w1,
            b1,
            w2,
            w21,
        })
    }

    pub fn at(&self, x: &[f64]) -> Result<Pathwise> {
        let gap = (1.0 - self.alpha).powi(2);
        let h: Vec<f64> = self.w1.matvec(x)?.iter().zip(&self.b1).map(|(a, b)| a + b).collect();
        // Y_lin - Y_a = (1 - a) W2 min(0, h)
        let neg: Vec<f64> = h.iter().map(|v| v.min(0.0)).collect();
        let diff: Vec<f64> = self.w2.matvec(&neg)?.iter().map(|v| v * (1.0 - self.alpha)).collect();
        let lin = norm(&self.w21.matvec(x)?);
        let xn = norm(x);
        Ok(Pathwise {
            error_sq: norm(&diff).powi(2),
            published: gap * (lin * lin + self.w2b1_norm.powi(2)),
            triangle: gap * (lin + self.w2b1_norm).powi(2),
            masked: gap * self.sigma2.powi(2) * norm(&neg).powi(2),
            operator: gap * (self.sigma2 * (self.sigma1 * xn + self.b1_norm)).powi(2),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub delta: f64,
    pub x_delta_norm: f64,
    /// `sigma_max(W2 W1)`.
    pub sigma_max: f64,
    /// Published constant.
    pub c: f64,
    pub alpha: f64,
    /// Share of evaluation samples with `|Y_lin - Y_a|^2 > C (1 - a)^2`.
    pub violation_rate: f64,
    /// Constant from [`operator_constant`].
    pub c_operator: f64,
    /// Share of evaluation samples exceeding `C_op (1 - a)^2`.
    pub operator_violation_rate: f64,
    pub n_calibration: usize,
    pub n_evaluation: usize,
}

/// Calibrates `x_delta` on a seeded half of `samples` and counts bound
/// violations on the other half.
pub fn verify_bound<T: Scalar>(
    block: &CollapsibleBlock<T>,
    samples: &Tensor<T>,
    delta: f64,
    seed: u64,
) -> Result<BoundReport> {
    if block.bn.is_some() {
        return Err(Error::Contract(
            "bound verification covers blocks without BatchNorm; fold BN first".into(),
        ));
    }
    if samples.rank() != 2 || samples.cols() != block.n_in() {
        return Err(Error::Dimension {
            op: "verify_bound samples",
            left: samples.shape().to_vec(),
            right: vec![block.n_in()],
        });
    }
    let n = samples.rows();
    if n < MIN_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_SAMPLES,
            got: n,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::seed(seed).shuffle(&mut idx);
    let (cal, eval) = idx.split_at(n / 2);
    let x_delta = estimate_x_delta(&samples.select_rows(cal), delta)?;

    let (w1, b1, w2) = (&block.fc1.weight, &block.fc1.bias, &block.fc2.weight);
    let sigma = sigma_max(&w2.matmul(w1)?)?;
    let c = bound_constant(w1, b1, w2, x_delta)?;
    let c_op = operator_constant(w1, b1, w2, x_delta)?;

    let alpha = block.alpha();
    let mut linear = block.clone();
    linear.act.set_alpha(T::one());
    let xs = samples.select_rows(eval);
    let y_a = block.infer(&xs)?;
    let y_lin = linear.infer(&xs)?;
    let gap = (1.0 - alpha.as_f64()).powi(2);
    let (mut over_c, mut over_op) = (0usize, 0usize);
    for i in 0..xs.rows() {
        let err: f64 = y_a
            .row(i)
            .iter()
            .zip(y_lin.row(i))
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        over_c += usize::from(err > c * gap);
        over_op += usize::from(err > c_op * gap);
    }
    let m = eval.len() as f64;
    Ok(BoundReport {
        delta,
        x_delta_norm: x_delta,
        sigma_max: sigma,
        c,
        alpha: alpha.as_f64(),
        violation_rate: over_c as f64 / m,
        c_operator: c_op,
        operator_violation_rate: over_op as f64 / m,
        n_calibration: cal.len(),
        n_evaluation: eval.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    fn lin(rows: &[Vec<f64>], b: &[f64]) -> Linear<f64> {
        Linear::new(Tensor::from_rows(rows).unwrap(), Tensor::from_vec(b.to_vec())).unwrap()
    }

    #[test]
    fn sigma_of_simple_matrices() {
        let d = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap();
        assert!((sigma_max(&d).unwrap() - 4.0).abs() < 1e-7);
        assert!((sigma_max(&Tensor::<f64>::eye(5)).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(sigma_max(&Tensor::<f64>::zeros(vec![3, 2])).unwrap(), 0.0);
    }

    #[test]
    fn nearest_rank_quantile() {
        let xs = Tensor::new(vec![100, 1], (1..=100).map(f64::from).collect()).unwrap();
        assert_eq!(estimate_x_delta(&xs, 0.1).unwrap(), 90.0);
        assert_eq!(estimate_x_delta(&xs, 1e-6).unwrap(), 100.0);
        let same = Tensor::from_rows(&vec![vec![3.0, 4.0]; 7]).unwrap();
        assert_eq!(estimate_x_delta(&same, 0.3).unwrap(), 5.0);
        assert!(estimate_x_delta(&xs, 0.0).is_err());
    }

    #[test]
    fn constant_fixtures() {
        let eye = Tensor::<f64>::eye(2);
        let c = bound_constant(&eye, &Tensor::zeros(vec![2]), &eye, 2.0).unwrap();
        assert!((c - 4.0).abs() < 1e-9);
        // W1 = [[1],[2]], b1 = [1, -1], W2 = [[1, 1]]: W2 W1 = [[3]], W2 b1 = [0]
        let w1 = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let w2 = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let b1 = Tensor::from_vec(vec![1.0, -1.0]);
        assert!((bound_constant(&w1, &b1, &w2, 0.5).unwrap() - 9.0 * 0.25).abs() < 1e-9);
        let c1 = bound_constant(&w1, &Tensor::zeros(vec![2]), &w2, 0.5).unwrap();
        let c2 = bound_constant(&w1.scale(2.0), &Tensor::zeros(vec![2]), &w2, 0.5).unwrap();
        assert!((c2 - 4.0 * c1).abs() < 1e-9);
    }

    #[test]
    fn too_few_samples() {
        let b = CollapsibleBlock::plain(lin(&[vec![1.0]], &[0.0]), 0.5, lin(&[vec![1.0]], &[0.0])).unwrap();
        let xs = Tensor::zeros(vec![99, 1]);
        assert!(matches!(
            verify_bound(&b, &xs, 0.1, 0),
            Err(Error::InsufficientData { needed: 100, got: 99 })
        ));
    }

    // Counterexamples to the per-sample forms; the operator form holds.
    #[test]
    fn published_form_fails_in_one_dimension() {
        let b = CollapsibleBlock::plain(lin(&[vec![1.0]], &[-1.0]), 0.0, lin(&[vec![1.0]], &[0.0])).unwrap();
        let p = PathwiseBlock::new(&b).unwrap().at(&[-1.0]).unwrap();
        assert_eq!(p.error_sq, 4.0);
        assert_eq!(p.published, 2.0);
        assert_eq!(p.triangle, 4.0);
        assert!(p.error_sq <= p.masked && p.masked <= p.operator);
    }

    #[test]
    fn triangle_form_fails_with_cancelling_hidden_units() {
        let b = CollapsibleBlock::plain(
            lin(&[vec![0.0], vec![0.0]], &[-1.0, 1.0]),
            0.0,
            lin(&[vec![1.0, 1.0]], &[0.0]),
        )
        .unwrap();
        let p = PathwiseBlock::new(&b).unwrap().at(&[0.0]).unwrap();
        // W2 b1 = 0 and W1 = 0, so both published forms are 0
        assert_eq!(p.error_sq, 1.0);
        assert_eq!(p.triangle, 0.0);
        assert_eq!(p.published, 0.0);
        assert!(p.error_sq <= p.masked + 1e-12 && p.masked <= p.operator + 1e-12);
    }

    #[test]
    fn exact_linearity_never_violates() {
        let b = CollapsibleBlock::plain(
            lin(&[vec![0.3, -1.0], vec![2.0, 0.5]], &[0.4, -0.2]),
            1.0,
            lin(&[vec![1.0, -1.0]], &[0.1]),
        )
        .unwrap();
        let mut rng = Rng::seed(4);
        let xs = Tensor::new(vec![200, 2], (0..400).map(|_| rng.normal()).collect()).unwrap();
        for delta in [0.01, 0.1, 0.5] {
            let r = verify_bound(&b, &xs, delta, 9).unwrap();
            assert_eq!(r.violation_rate, 0.0);
            assert_eq!(r.n_calibration + r.n_evaluation, 200);
        }
    }
}
