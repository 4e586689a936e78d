use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inverted dropout: in training, each unit is zeroed with probability `p`
/// and survivors are scaled by `1 / (1 - p)`. Eval mode is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} must lie in [0, 1)")));
        }
        Ok(Dropout { p })
    }

    pub fn forward_train<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, rng: &mut Rng) -> Result<Var> {
        if self.p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        let shape = tape.value(x).shape().to_vec();
        let n = tape.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.uniform() < self.p { T::zero() } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }
}
