use crate::autograd::{prelu, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parametric ReLU with one scalar slope shared by all units.
///
/// `alpha = 0` is ReLU and `alpha = 1` is the identity. The slope is never
/// clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct PRelu<T> {
    pub alpha: Tensor<T>,
}

impl<T: Scalar> PRelu<T> {
    pub fn new(alpha: T) -> Self {
        PRelu {
            alpha: Tensor::scalar(alpha).tracked(),
        }
    }

    /// A slope that is not updated by training.
    pub fn frozen(alpha: T) -> Self {
        PRelu {
            alpha: Tensor::scalar(alpha),
        }
    }

    pub fn alpha(&self) -> T {
        self.alpha.data()[0]
    }

    pub fn set_alpha(&mut self, alpha: T) {
        self.alpha.data_mut()[0] = alpha;
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        let a = tape.param(&format!("{name}.alpha"), &self.alpha);
        tape.prelu(x, a)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let a = self.alpha();
        x.map(|z| prelu(z, a))
    }
}
