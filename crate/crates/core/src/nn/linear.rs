use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fully connected layer `y = x Wᵀ + b` with `W: [out×in]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || bias.len() != weight.shape()[0] {
            return Err(Error::Dimension {
                op: "linear (weight rows vs bias length)",
                left: weight.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Linear {
            weight: weight.tracked(),
            bias: bias.tracked(),
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> u64 {
        (self.weight.len() + self.bias.len()) as u64
    }

    pub fn macs(&self) -> u64 {
        self.weight.len() as u64
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        let w = tape.param(&format!("{name}.weight"), &self.weight);
        let b = tape.param(&format!("{name}.bias"), &self.bias);
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        tape.add_row(y, b)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight.transpose()?)?.add_row_vector(&self.bias)
    }

    pub(crate) fn params(&self) -> [(&'static str, &Tensor<T>); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }

    pub(crate) fn params_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}
