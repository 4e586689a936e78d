use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch normalization over the feature axis of `[batch×h]` inputs.
///
/// Training mode normalizes with the batch mean and the biased (population)
/// variance and folds them into the running statistics as
/// `running = (1 - momentum) * running + momentum * batch`. Eval mode
/// normalizes with `running_mean` and `running_var + eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(vec![width]).tracked(),
            beta: Tensor::zeros(vec![width]).tracked(),
            running_mean: Tensor::zeros(vec![width]),
            running_var: Tensor::ones(vec![width]),
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    pub fn from_parts(
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
        momentum: T,
        eps: T,
    ) -> Result<Self> {
        let h = gamma.len();
        for t in [&beta, &running_mean, &running_var] {
            if t.len() != h || t.rank() != 1 {
                return Err(Error::Dimension {
                    op: "batchnorm parameters",
                    left: gamma.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        if running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::Contract("batchnorm running_var must be >= 0".into()));
        }
        if !(momentum > T::zero() && momentum <= T::one()) || !(eps >= T::zero()) {
            return Err(Error::Contract(format!(
                "batchnorm momentum {momentum} must lie in (0, 1] and eps {eps} must be >= 0"
            )));
        }
        Ok(BatchNorm {
            gamma: gamma.tracked(),
            beta: beta.tracked(),
            running_mean,
            running_var,
            momentum,
            eps,
        })
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn param_count(&self) -> u64 {
        (self.gamma.len() + self.beta.len()) as u64
    }

    /// Per-feature eval-mode scale `gamma / sqrt(running_var + eps)`.
    pub fn scale(&self) -> Tensor<T> {
        let eps = self.eps;
        self.gamma
            .zip_with(&self.running_var, "bn scale", |g, v| g / (v + eps).sqrt())
            .expect("batchnorm vectors share a width")
    }

    fn check_width(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.width() {
            return Err(Error::Dimension {
                op: "batchnorm",
                left: x.shape().to_vec(),
                right: vec![self.width()],
            });
        }
        Ok(())
    }

    pub fn forward_train(&mut self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        self.check_width(tape.value(x))?;
        let m = tape.value(x).rows();
        if m < 2 {
            return Err(Error::Contract(format!(
                "batchnorm in training mode needs a batch of at least 2, got {m}"
            )));
        }
        let gamma = tape.param(&format!("{name}.gamma"), &self.gamma);
        let beta = tape.param(&format!("{name}.beta"), &self.beta);

        let mean = tape.mean_rows(x)?;
        let neg_mean = tape.neg(mean);
        let centered = tape.add_row(x, neg_mean)?;
        let sq = tape.square(centered)?;
        let var = tape.mean_rows(sq)?;
        let shifted = tape.add_scalar(var, self.eps);
        let inv_std = tape.powf(shifted, T::lit(-0.5));
        let xhat = tape.mul_row(centered, inv_std)?;
        let scaled = tape.mul_row(xhat, gamma)?;
        let y = tape.add_row(scaled, beta)?;

        let mom = self.momentum;
        let keep = T::one() - mom;
        let batch_mean = tape.value(mean).detached();
        let batch_var = tape.value(var).detached();
        self.running_mean = self
            .running_mean
            .zip_with(&batch_mean, "bn running mean", |r, b| keep * r + mom * b)?;
        self.running_var = self
            .running_var
            .zip_with(&batch_var, "bn running var", |r, b| keep * r + mom * b)?;
        Ok(y)
    }

    pub fn forward_eval(&self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        self.check_width(tape.value(x))?;
        let gamma = tape.param(&format!("{name}.gamma"), &self.gamma);
        let beta = tape.param(&format!("{name}.beta"), &self.beta);
        let neg_mean = tape.constant(self.running_mean.scale(-T::one()));
        let eps = self.eps;
        let inv_std = tape.constant(self.running_var.map(|v| T::one() / (v + eps).sqrt()));
        let centered = tape.add_row(x, neg_mean)?;
        let xhat = tape.mul_row(centered, inv_std)?;
        let scaled = tape.mul_row(xhat, gamma)?;
        tape.add_row(scaled, beta)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(x)?;
        let neg_mean = self.running_mean.scale(-T::one());
        x.add_row_vector(&neg_mean)?
            .mul_row_vector(&self.scale())?
            .add_row_vector(&self.beta)
    }

    pub(crate) fn params(&self) -> [(&'static str, &Tensor<T>); 2] {
        [("gamma", &self.gamma), ("beta", &self.beta)]
    }

    pub(crate) fn params_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 2] {
        [("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }
}
