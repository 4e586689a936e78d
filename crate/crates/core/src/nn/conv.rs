use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2-D convolution (cross-correlation) with a `[out, in, k, k]` kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != 4 || ks[2] != ks[3] || bias.rank() != 1 || bias.len() != ks[0] {
            return Err(Error::Dimension {
                op: "conv2d (kernel [out, in, k, k] vs bias [out])",
                left: ks.to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Unsupported("conv2d stride must be >= 1".into()));
        }
        Ok(Conv2d {
            kernel: kernel.tracked(),
            bias: bias.tracked(),
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn param_count(&self) -> u64 {
        (self.kernel.len() + self.bias.len()) as u64
    }

    /// Output `[c, h, w]` for a `[c, h, w]` sample.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let k = self.kernel_size();
        if input.len() != 3 || input[0] != self.in_channels() {
            return Err(Error::Dimension {
                op: "conv2d input channels",
                left: input.to_vec(),
                right: self.kernel.shape().to_vec(),
            });
        }
        if input[1] + 2 * self.padding < k || input[2] + 2 * self.padding < k {
            return Err(Error::Dimension {
                op: "conv2d (kernel larger than padded input)",
                left: input.to_vec(),
                right: self.kernel.shape().to_vec(),
            });
        }
        let out = |n: usize| (n + 2 * self.padding - k) / self.stride + 1;
        Ok(vec![self.out_channels(), out(input[1]), out(input[2])])
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        let k = tape.param(&format!("{name}.kernel"), &self.kernel);
        let b = tape.param(&format!("{name}.bias"), &self.bias);
        let y = tape.conv2d(x, k, self.stride, self.padding)?;
        tape.add_channel_bias(y, b)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.conv2d(&self.kernel, self.stride, self.padding)?;
        let s = y.shape().to_vec();
        let plane = s[2] * s[3];
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = *v + self.bias.data()[(i / plane) % s[1]];
        }
        Ok(y)
    }

    pub(crate) fn params(&self) -> [(&'static str, &Tensor<T>); 2] {
        [("kernel", &self.kernel), ("bias", &self.bias)]
    }

    pub(crate) fn params_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 2] {
        [("kernel", &mut self.kernel), ("bias", &mut self.bias)]
    }
}
