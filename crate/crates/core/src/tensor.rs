//! Dense row-major tensors and the numeric kernels the tape builds on.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array stored in row-major order.
///
/// A tensor optionally participates in gradient tracking: `requires_grad`
/// marks it as a trainable leaf, and `grad` accumulates its gradient across
/// backward passes until cleared with [`Tensor::zero_grad`].
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Box<Tensor<T>>>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl<T: PartialEq> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::Dimension {
                op: "tensor construction",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// 1-D tensor from a vector.
    pub fn from_vec(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Convenience constructor from `f64` values.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, T::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            self.data.len()
        } else {
            self.data.len() / self.shape[0].max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    /// Builder form of [`Tensor::set_requires_grad`]`(true)`.
    pub fn tracked(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient.
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape != self.shape {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                left: self.shape.clone(),
                right: g.shape.clone(),
            });
        }
        match &mut self.grad {
            Some(acc) => {
                for (a, &b) in acc.data.iter_mut().zip(&g.data) {
                    *a = *a + b;
                }
            }
            None => self.grad = Some(Box::new(g.detached())),
        }
        Ok(())
    }

    /// Copy of the values without gradient state.
    pub fn detached(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zip_with(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len().max(1)).unwrap()
    }

    /// Euclidean norm of all elements.
    pub fn norm2(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what} contains NaN or Inf")))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        let d = self.zip_with(other, "max_abs_diff", |a, b| (a - b).abs())?;
        Ok(d.data.iter().fold(T::zero(), |m, &v| m.max(v)))
    }

    fn expect_rank(&self, rank: usize, op: &'static str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: vec![rank],
            });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        self.expect_rank(2, "transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Matrix-vector product for a 2-D tensor and a slice.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if self.rank() != 2 || self.shape[1] != v.len() {
            return Err(Error::Dimension {
                op: "matvec",
                left: self.shape.clone(),
                right: vec![v.len()],
            });
        }
        Ok((0..self.shape[0])
            .map(|i| self.row(i).iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
            .collect())
    }

    fn check_row_vector(&self, v: &Tensor<T>, op: &'static str) -> Result<usize> {
        let n = self.cols();
        if self.rank() != 2 || v.len() != n {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: v.shape.clone(),
            });
        }
        Ok(n)
    }

    /// Broadcasts `v` (length = column count) over every row and adds it.
    pub fn add_row_vector(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_row_vector(v, "add_row_vector")?;
        let mut out = self.detached();
        for (i, x) in out.data.iter_mut().enumerate() {
            *x = *x + v.data[i % n];
        }
        Ok(out)
    }

    pub fn mul_row_vector(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_row_vector(v, "mul_row_vector")?;
        let mut out = self.detached();
        for (i, x) in out.data.iter_mut().enumerate() {
            *x = *x * v.data[i % n];
        }
        Ok(out)
    }

    /// Column sums of a 2-D tensor.
    pub fn sum_rows(&self) -> Result<Tensor<T>> {
        self.expect_rank(2, "sum_rows")?;
        let n = self.shape[1];
        let mut out = vec![T::zero(); n];
        for (i, &x) in self.data.iter().enumerate() {
            out[i % n] = out[i % n] + x;
        }
        Ok(Tensor::from_vec(out))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        self.expect_rank(2, "softmax")?;
        let n = self.shape[1];
        let mut out = self.detached();
        for row in out.data.chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        Ok(out)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax_rows(&self) -> Result<Tensor<T>> {
        self.expect_rank(2, "log_softmax")?;
        let n = self.shape[1];
        let mut out = self.detached();
        for row in out.data.chunks_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        Ok(out)
    }

    /// Index of the largest entry in each row.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        self.expect_rank(2, "argmax")?;
        let n = self.shape[1];
        Ok(self
            .data
            .chunks(n)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Gathers rows by index into a new 2-D tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor<T> {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape = vec![idx.len()];
        } else {
            shape[0] = idx.len();
        }
        Tensor::new(shape, data).expect("row selection preserves element count")
    }

    /// Cross-correlation of a `[N, C, H, W]` input with a `[O, C, k, k]`
    /// kernel, zero padding `padding` on each border.
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let g = ConvGeometry::new(self.shape(), kernel.shape(), stride, padding)?;
        let mut out = vec![T::zero(); g.n * g.o * g.ho * g.wo];
        g.for_each_tap(|oi, ii, ki| out[oi] = out[oi] + self.data[ii] * kernel.data[ki]);
        Tensor::new(vec![g.n, g.o, g.ho, g.wo], out)
    }

    pub(crate) fn conv2d_grad_input(
        grad_out: &Tensor<T>,
        input_shape: &[usize],
        kernel: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let g = ConvGeometry::new(input_shape, kernel.shape(), stride, padding)?;
        let mut out = vec![T::zero(); numel(input_shape)];
        g.for_each_tap(|oi, ii, ki| out[ii] = out[ii] + grad_out.data[oi] * kernel.data[ki]);
        Tensor::new(input_shape.to_vec(), out)
    }

    pub(crate) fn conv2d_grad_kernel(
        grad_out: &Tensor<T>,
        input: &Tensor<T>,
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let g = ConvGeometry::new(input.shape(), kernel_shape, stride, padding)?;
        let mut out = vec![T::zero(); numel(kernel_shape)];
        g.for_each_tap(|oi, ii, ki| out[ki] = out[ki] + grad_out.data[oi] * input.data[ii]);
        Tensor::new(kernel_shape.to_vec(), out)
    }
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Unsupported("conv2d stride must be >= 1".into()));
        }
        let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension {
                op: "conv2d (kernel larger than padded input)",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        Ok(ConvGeometry {
            n: input[0],
            c: input[1],
            h,
            w,
            o: kernel[0],
            kh,
            kw,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    /// Visits every (output index, input index, kernel index) triple that
    /// contributes a product to the cross-correlation.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for n in 0..self.n {
            for o in 0..self.o {
                for y in 0..self.ho {
                    for x in 0..self.wo {
                        let oi = ((n * self.o + o) * self.ho + y) * self.wo + x;
                        for c in 0..self.c {
                            for i in 0..self.kh {
                                let yy = (y * self.stride + i) as isize - self.padding as isize;
                                if yy < 0 || yy >= self.h as isize {
                                    continue;
                                }
                                for j in 0..self.kw {
                                    let xx = (x * self.stride + j) as isize - self.padding as isize;
                                    if xx < 0 || xx >= self.w as isize {
                                        continue;
                                    }
                                    let ii = ((n * self.c + c) * self.h + yy as usize) * self.w + xx as usize;
                                    let ki = ((o * self.c + c) * self.kh + i) * self.kw + j;
                                    f(oi, ii, ki);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f64>::scalar(2.0).len(), 1);
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_matmul() {
        let a = t(&[2, 2], &[1., 1., 1., -1.]);
        let b = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(a.matmul(&b).unwrap(), t(&[2, 2], &[4., 6., -2., -2.]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 3], &[1., 2., 3., -50., 0., 50.]);
        let s = x.softmax_rows().unwrap();
        for i in 0..2 {
            let total: f64 = s.row(i).iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = t(&[1, 1, 1, 1], &[1.]);
        assert_eq!(x.conv2d(&k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_valid_and_padded_shapes() {
        let x = Tensor::<f64>::ones(vec![2, 3, 8, 8]);
        let k = Tensor::<f64>::ones(vec![4, 3, 3, 3]);
        assert_eq!(x.conv2d(&k, 1, 0).unwrap().shape(), &[2, 4, 6, 6]);
        assert_eq!(x.conv2d(&k, 1, 1).unwrap().shape(), &[2, 4, 8, 8]);
        assert_eq!(x.conv2d(&k, 2, 1).unwrap().shape(), &[2, 4, 4, 4]);
        // interior of an all-ones input sums 27 taps
        assert_eq!(x.conv2d(&k, 1, 0).unwrap().data()[0], 27.0);
    }

    #[test]
    fn grad_accumulates() {
        let mut w = Tensor::<f64>::zeros(vec![2]).tracked();
        let g = t(&[2], &[1., 2.]);
        w.accumulate_grad(&g).unwrap();
        w.accumulate_grad(&g).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[2., 4.]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }
}
