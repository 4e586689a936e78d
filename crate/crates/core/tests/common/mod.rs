#![allow(dead_code)]

use layercollapse::nn::{BatchNorm, CollapsibleBlock, Linear, PRelu};
use layercollapse::rng::Rng;
use layercollapse::tensor::Tensor;

pub fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-scale, scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rand_normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn rand_linear(rng: &mut Rng, n_in: usize, n_out: usize) -> Linear<f64> {
    let s = (1.0 / n_in as f64).sqrt();
    Linear::new(rand_tensor(rng, &[n_out, n_in], s), rand_tensor(rng, &[n_out], 0.5)).unwrap()
}

pub fn rand_bn(rng: &mut Rng, h: usize) -> BatchNorm<f64> {
    let gamma = Tensor::from_vec((0..h).map(|_| rng.uniform_in(0.5, 1.5)).collect());
    let beta = rand_tensor(rng, &[h], 0.5);
    let mean = rand_tensor(rng, &[h], 0.5);
    let var = Tensor::from_vec((0..h).map(|_| rng.uniform_in(0.2, 2.0)).collect());
    BatchNorm::from_parts(gamma, beta, mean, var, 0.1, 1e-5).unwrap()
}

pub fn rand_block(rng: &mut Rng, n_in: usize, h: usize, n_out: usize, bn: bool, alpha: f64) -> CollapsibleBlock<f64> {
    let fc1 = rand_linear(rng, n_in, h);
    let bn = bn.then(|| rand_bn(rng, h));
    let fc2 = rand_linear(rng, h, n_out);
    CollapsibleBlock::new(fc1, bn, PRelu::new(alpha), None, fc2).unwrap()
}
