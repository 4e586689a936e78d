use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ModelGraph;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Heavy-ball update: `v <- momentum v + g`, then `w <- w - lr v`.
pub fn sgd_step<T: Scalar>(w: &mut Tensor<T>, g: &Tensor<T>, v: &mut Tensor<T>, lr: T, momentum: T) -> Result<()> {
    if w.shape() != g.shape() || w.shape() != v.shape() {
        return Err(Error::Dimension {
            op: "sgd_step (weight vs gradient)",
            left: w.shape().to_vec(),
            right: g.shape().to_vec(),
        });
    }
    for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
        *vi = momentum * *vi + gi;
        *wi = *wi - lr * *vi;
    }
    Ok(())
}

/// Momentum SGD over a model's tracked parameters, with velocity kept per
/// parameter name. No weight decay, no Nesterov.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Contract(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update to every tracked parameter that has a gradient.
    pub fn step(&mut self, model: &mut ModelGraph<T>) -> Result<()> {
        let (lr, momentum) = (T::lit(self.lr), T::lit(self.momentum));
        for (name, w) in model.named_params_mut() {
            if !w.requires_grad() {
                continue;
            }
            let Some(g) = w.grad().cloned() else {
                continue;
            };
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            sgd_step(w, &g, v, lr, momentum)?;
        }
        Ok(())
    }

    /// Drops all velocity, e.g. when the parameter set changes.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}
