//! Execution backends and parameter plumbing shared by every block.
//!
//! A block's forward pass is written once against [`Exec`]. The same code then
//! runs eagerly ([`Eager`]), on a gradient tape ([`crate::autodiff::Tape`]), or
//! through the shape-only accounting pass in [`crate::analysis`]. Learnable
//! tensors enter the graph through named ops so every backend sees the same
//! parameter names as [`Module::visit_params`].

use crate::error::Result;
use crate::tensor::{self, Activation, ChannelReduce, ConvSpec, PoolMode, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

pub trait Exec<T: Scalar> {
    type V: Clone;

    fn shape(&self, v: &Self::V) -> crate::tensor::Shape;

    /// Convolution whose weight (and bias, if any) are the parameters
    /// `{name}.weight` / `{name}.bias`.
    fn conv(
        &mut self,
        x: &Self::V,
        name: &str,
        weight: &Tensor<T>,
        bias: Option<&[T]>,
        spec: &ConvSpec,
    ) -> Result<Self::V>;

    /// Batch norm with learnable `{name}.gamma` / `{name}.beta`.
    fn batchnorm(&mut self, x: &Self::V, name: &str, bn: &BatchNorm<T>) -> Result<Self::V>;

    fn act(&mut self, x: &Self::V, kind: Activation) -> Result<Self::V>;

    fn pool(&mut self, x: &Self::V, mode: PoolMode, spec: &ConvSpec) -> Result<Self::V>;

    fn global_avg_pool(&mut self, x: &Self::V) -> Result<Self::V>;

    /// Cross-channel 1-D convolution with learnable `{name}.weight`.
    fn conv1d_channels(&mut self, x: &Self::V, name: &str, weight: &[T]) -> Result<Self::V>;

    fn reduce_channels(&mut self, x: &Self::V, how: ChannelReduce) -> Result<Self::V>;

    fn concat(&mut self, xs: &[&Self::V]) -> Result<Self::V>;

    fn scale(&mut self, x: &Self::V, gate: &Self::V) -> Result<Self::V>;

    fn upsample2x(&mut self, x: &Self::V) -> Result<Self::V>;

    /// Marks the start of a named top-level layer. Only the accounting pass
    /// cares.
    fn enter(&mut self, _layer: &str) {}

    fn exit(&mut self) {}
}

/// Plain forward evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<T: Scalar> Exec<T> for Eager {
    type V = Tensor<T>;

    fn shape(&self, v: &Tensor<T>) -> crate::tensor::Shape {
        v.shape()
    }

    fn conv(
        &mut self,
        x: &Tensor<T>,
        _name: &str,
        weight: &Tensor<T>,
        bias: Option<&[T]>,
        spec: &ConvSpec,
    ) -> Result<Tensor<T>> {
        tensor::conv2d(x, weight, bias, spec)
    }

    fn batchnorm(&mut self, x: &Tensor<T>, _name: &str, bn: &BatchNorm<T>) -> Result<Tensor<T>> {
        tensor::batchnorm_inference(x, &bn.gamma, &bn.beta, &bn.mean, &bn.var, bn.eps)
    }

    fn act(&mut self, x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
        Ok(tensor::activation(x, kind))
    }

    fn pool(&mut self, x: &Tensor<T>, mode: PoolMode, spec: &ConvSpec) -> Result<Tensor<T>> {
        tensor::pool2d(x, mode, spec)
    }

    fn global_avg_pool(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::global_avg_pool(x)
    }

    fn conv1d_channels(&mut self, x: &Tensor<T>, _name: &str, weight: &[T]) -> Result<Tensor<T>> {
        tensor::conv1d_channels(x, weight)
    }

    fn reduce_channels(&mut self, x: &Tensor<T>, how: ChannelReduce) -> Result<Tensor<T>> {
        tensor::reduce_channels(x, how)
    }

    fn concat(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        tensor::concat_channels(xs)
    }

    fn scale(&mut self, x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::scale(x, gate)
    }

    fn upsample2x(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(tensor::upsample_nearest2x(x))
    }
}

/// Per-channel batch normalization. Only `gamma` and `beta` are learnable.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNorm<T> {
    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            eps: T::lit(BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Rewrite `gamma`/`beta` so that the layer computes the same function
    /// with canonical statistics (mean 0, var 1). The learnable vectors then
    /// carry everything a checkpoint needs.
    pub fn bake_statistics(&mut self) {
        let canon = (T::one() + self.eps).sqrt();
        for c in 0..self.channels() {
            let inv = T::one() / (self.var[c] + self.eps).sqrt();
            let g = self.gamma[c];
            self.gamma[c] = g * inv * canon;
            self.beta[c] = self.beta[c] - self.mean[c] * g * inv;
            self.mean[c] = T::zero();
            self.var[c] = T::one();
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN))).collect();
        BatchNorm {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            mean: c(&self.mean),
            var: c(&self.var),
            eps: U::lit(self.eps.to_f64().unwrap_or(BN_EPS)),
        }
    }
}

/// Anything owning learnable tensors.
///
/// Both visitors walk parameters in the same, stable order; that order is the
/// checkpoint order.
pub trait Module<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T]));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, _, d| n += d.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _, _| names.push(name.to_string()));
        names
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_bn<T: Scalar>(bn: &BatchNorm<T>, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
    let c = bn.channels();
    f(&join(prefix, "gamma"), &[c], &bn.gamma);
    f(&join(prefix, "beta"), &[c], &bn.beta);
}

pub(crate) fn visit_bn_mut<T: Scalar>(
    bn: &mut BatchNorm<T>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &[usize], &mut [T]),
) {
    let c = bn.channels();
    f(&join(prefix, "gamma"), &[c], &mut bn.gamma);
    f(&join(prefix, "beta"), &[c], &mut bn.beta);
}

pub(crate) fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN))).collect()
}
