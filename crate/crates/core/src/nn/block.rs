use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{BatchNorm, Ctx, Dropout, Linear, Mode, PRelu};

/// `fc1 → [BatchNorm] → PReLU → [Dropout] → fc2`, the unit that fuses into
/// a single linear layer once its activation is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct CollapsibleBlock<T> {
    pub fc1: Linear<T>,
    pub bn: Option<BatchNorm<T>>,
    pub act: PRelu<T>,
    pub drop: Option<Dropout>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> CollapsibleBlock<T> {
    pub fn new(
        fc1: Linear<T>,
        bn: Option<BatchNorm<T>>,
        act: PRelu<T>,
        drop: Option<Dropout>,
        fc2: Linear<T>,
    ) -> Result<Self> {
        let h = fc1.out_features();
        if fc2.in_features() != h {
            return Err(Error::Dimension {
                op: "collapsible block (fc1 out vs fc2 in)",
                left: fc1.weight.shape().to_vec(),
                right: fc2.weight.shape().to_vec(),
            });
        }
        if let Some(bn) = &bn {
            if bn.width() != h {
                return Err(Error::Dimension {
                    op: "collapsible block (fc1 out vs batchnorm width)",
                    left: vec![h],
                    right: vec![bn.width()],
                });
            }
        }
        Ok(CollapsibleBlock {
            fc1,
            bn,
            act,
            drop,
            fc2,
        })
    }

    /// Block without BatchNorm or Dropout.
    pub fn plain(fc1: Linear<T>, alpha: T, fc2: Linear<T>) -> Result<Self> {
        CollapsibleBlock::new(fc1, None, PRelu::new(alpha), None, fc2)
    }

    pub fn n_in(&self) -> usize {
        self.fc1.in_features()
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features()
    }

    pub fn n_out(&self) -> usize {
        self.fc2.out_features()
    }

    pub fn alpha(&self) -> T {
        self.act.alpha()
    }

    pub fn param_count(&self) -> u64 {
        self.fc1.param_count() + self.bn.as_ref().map_or(0, BatchNorm::param_count) + 1 + self.fc2.param_count()
    }

    pub fn macs(&self) -> u64 {
        self.fc1.macs() + self.fc2.macs()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, ctx: &mut Ctx, name: &str) -> Result<Var> {
        let width = tape.value(x).cols();
        if tape.value(x).rank() != 2 || width != self.n_in() {
            return Err(Error::Dimension {
                op: "block input width",
                left: tape.value(x).shape().to_vec(),
                right: vec![self.n_in()],
            });
        }
        let mut h = self.fc1.forward(tape, x, &format!("{name}.fc1"))?;
        if let Some(bn) = &mut self.bn {
            let bn_name = format!("{name}.bn");
            h = match ctx.mode {
                Mode::Train => bn.forward_train(tape, h, &bn_name)?,
                Mode::Eval => bn.forward_eval(tape, h, &bn_name)?,
            };
        }
        h = self.act.forward(tape, h, &format!("{name}.act"))?;
        if let (Some(drop), Mode::Train) = (&self.drop, ctx.mode) {
            h = drop.forward_train(tape, h, &mut ctx.rng)?;
        }
        self.fc2.forward(tape, h, &format!("{name}.fc2"))
    }

    /// Eval-mode forward without a tape.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.cols() != self.n_in() {
            return Err(Error::Dimension {
                op: "block input width",
                left: x.shape().to_vec(),
                right: vec![self.n_in()],
            });
        }
        let mut h = self.fc1.infer(x)?;
        if let Some(bn) = &self.bn {
            h = bn.infer(&h)?;
        }
        let h = self.act.infer(&h);
        self.fc2.infer(&h)
    }

    pub(crate) fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.extend(self.fc1.params().map(|(n, t)| (format!("fc1.{n}"), t)));
        if let Some(bn) = &self.bn {
            out.extend(bn.params().map(|(n, t)| (format!("bn.{n}"), t)));
        }
        out.push(("act.alpha".to_string(), &self.act.alpha));
        out.extend(self.fc2.params().map(|(n, t)| (format!("fc2.{n}"), t)));
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.extend(self.fc1.params_mut().map(|(n, t)| (format!("fc1.{n}"), t)));
        if let Some(bn) = &mut self.bn {
            out.extend(bn.params_mut().map(|(n, t)| (format!("bn.{n}"), t)));
        }
        out.push(("act.alpha".to_string(), &mut self.act.alpha));
        out.extend(self.fc2.params_mut().map(|(n, t)| (format!("fc2.{n}"), t)));
        out
    }
}
