//! Reverse-mode differentiation over the tensor-core op set.
//!
//! A [`Tape`] records every op as it is evaluated. [`Tape::backward`] then
//! walks the records in reverse, summing gradients at shared nodes. The tape
//! implements [`Exec`], so blocks record themselves without any extra code.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Exec};
use crate::tensor::ops::{broadcast_kind, reduce_channels_with_argmax, Broadcast};
use crate::tensor::pool::avg_pool_backward;
use crate::tensor::{
    self, conv2d_backward, pool2d_with_argmax, Activation, ChannelReduce, ConvSpec, PoolMode, Scalar, Shape, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How batch norm layers normalize while recording.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Stored running statistics.
    Inference,
    /// Statistics of the current batch (biased variance).
    Batch,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BnInference {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    },
    BnBatch {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        spec: ConvSpec,
    },
    GlobalAvgPool {
        x: Var,
    },
    Conv1dChannels {
        x: Var,
        w: Var,
    },
    ChannelMean {
        x: Var,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
    },
    Scale {
        x: Var,
        gate: Var,
        kind: Broadcast,
    },
    Upsample {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    MulScalar {
        x: Var,
        k: T,
    },
    Sum {
        x: Var,
    },
    Dot {
        x: Var,
        w: Tensor<T>,
    },
    /// Scalar node whose partials were computed by the caller.
    Custom {
        inputs: Vec<Var>,
        partials: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-layer batch statistics observed in [`BnMode::Batch`].
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    bn_mode: BnMode,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    batch_stats: Vec<BatchStats<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new(BnMode::Inference)
    }
}

/// Gradients of one scalar with respect to every recorded node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(bn_mode: BnMode) -> Self {
        Tape {
            nodes: Vec::new(),
            bn_mode,
            params: HashMap::new(),
            param_order: Vec::new(),
            batch_stats: Vec::new(),
        }
    }

    pub fn bn_mode(&self) -> BnMode {
        self.bn_mode
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf for a named parameter; asking twice for the same name returns the
    /// same leaf so its gradient accumulates.
    pub fn param(&mut self, name: &str, shape: Shape, data: &[T]) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.leaf(Tensor::from_vec(shape, data.to_vec())?);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        Ok(v)
    }

    /// Names of parameters in first-use order.
    pub fn param_names(&self) -> &[String] {
        &self.param_order
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn batch_stats(&self) -> &[BatchStats<T>] {
        &self.batch_stats
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn mul_scalar(&mut self, x: Var, k: T) -> Var {
        let v = self.value(x).map(|e| e * k);
        self.push(v, Op::MulScalar { x, k })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::full([1, 1, 1, 1], s), Op::Sum { x })
    }

    /// `sum(x * w)` with `w` held constant.
    pub fn dot(&mut self, x: Var, w: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != w.shape() {
            return Err(Error::dim("dot", format!("{} vs {}", xv.shape(), w.shape())));
        }
        let s = xv.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::full([1, 1, 1, 1], s), Op::Dot { x, w }))
    }

    /// Record a scalar `value` whose partial derivative with respect to each
    /// input was computed externally.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: T, partials: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(Error::Usage("one partial per input required".into()));
        }
        for (v, p) in inputs.iter().zip(&partials) {
            if self.value(*v).shape() != p.shape() {
                return Err(Error::dim("custom_scalar", "partial shape differs from input"));
            }
        }
        Ok(self.push(
            Tensor::full([1, 1, 1, 1], value),
            Op::Custom {
                inputs: inputs.to_vec(),
                partials,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node before it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (target, contrib) in self.local_grads(node, &g)? {
                accumulate(&mut grads[target.0], contrib)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, spec } => {
                let (gx, gw, gb) = conv2d_backward(val(*x), val(*w), spec, g)?;
                let mut v = vec![(*x, gx), (*w, gw)];
                if let (Some(b), Some(gb)) = (b, gb) {
                    v.push((*b, Tensor::from_vec(val(*b).shape(), gb)?));
                }
                v
            }
            Op::BnInference {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let xv = val(*x);
                let s = xv.shape();
                let gam = val(*gamma).data();
                let mut gx = g.clone();
                let mut dg = vec![T::zero(); s.c];
                let mut db = vec![T::zero(); s.c];
                let p = s.plane();
                for (i, chunk) in gx.data_mut().chunks_mut(p).enumerate() {
                    let c = i % s.c;
                    let inv = T::one() / (var[c] + *eps).sqrt();
                    let xs = &xv.data()[i * p..(i + 1) * p];
                    for (gv, &xe) in chunk.iter_mut().zip(xs) {
                        dg[c] += *gv * (xe - mean[c]) * inv;
                        db[c] += *gv;
                        *gv = *gv * gam[c] * inv;
                    }
                }
                let vs = val(*gamma).shape();
                vec![
                    (*x, gx),
                    (*gamma, Tensor::from_vec(vs, dg)?),
                    (*beta, Tensor::from_vec(vs, db)?),
                ]
            }
            Op::BnBatch {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = xhat.shape();
                let p = s.plane();
                let m = T::from_usize_lossy(s.n * p);
                let gam = val(*gamma).data();
                let mut sum_g = vec![T::zero(); s.c];
                let mut sum_gx = vec![T::zero(); s.c];
                for (i, (gc, xc)) in g.data().chunks(p).zip(xhat.data().chunks(p)).enumerate() {
                    let c = i % s.c;
                    for (&gv, &xh) in gc.iter().zip(xc) {
                        sum_g[c] += gv;
                        sum_gx[c] += gv * xh;
                    }
                }
                let mut gx = Tensor::zeros(s);
                for (i, chunk) in gx.data_mut().chunks_mut(p).enumerate() {
                    let c = i % s.c;
                    let k = gam[c] * inv_std[c] / m;
                    let gs = &g.data()[i * p..(i + 1) * p];
                    let xs = &xhat.data()[i * p..(i + 1) * p];
                    for ((d, &gv), &xh) in chunk.iter_mut().zip(gs).zip(xs) {
                        *d = k * (m * gv - sum_g[c] - xh * sum_gx[c]);
                    }
                }
                let vs = val(*gamma).shape();
                vec![
                    (*x, gx),
                    (*gamma, Tensor::from_vec(vs, sum_gx)?),
                    (*beta, Tensor::from_vec(vs, sum_g)?),
                ]
            }
            Op::Act { x, kind } => {
                let gx = val(*x).zip_map(g, |xv, gv| gv * kind.derivative(xv))?;
                vec![(*x, gx)]
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[src] += gv;
                }
                vec![(*x, gx)]
            }
            Op::AvgPool { x, spec } => vec![(*x, avg_pool_backward(val(*x).shape(), spec, g))],
            Op::GlobalAvgPool { x } => {
                let s = val(*x).shape();
                let p = s.plane();
                let denom = T::from_usize_lossy(p);
                let mut gx = Tensor::zeros(s);
                for (chunk, &gv) in gx.data_mut().chunks_mut(p).zip(g.data()) {
                    chunk.iter_mut().for_each(|d| *d = gv / denom);
                }
                vec![(*x, gx)]
            }
            Op::Conv1dChannels { x, w } => {
                let xv = val(*x);
                let wv = val(*w).data();
                let s = xv.shape();
                let half = (wv.len() / 2) as isize;
                let mut gx = Tensor::zeros(s);
                let mut gw = vec![T::zero(); wv.len()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let gv = g.data()[n * s.c + c];
                        for (j, &wj) in wv.iter().enumerate() {
                            let src = c as isize + j as isize - half;
                            if src >= 0 && (src as usize) < s.c {
                                let si = n * s.c + src as usize;
                                gx.data_mut()[si] += wj * gv;
                                gw[j] += gv * xv.data()[si];
                            }
                        }
                    }
                }
                vec![(*x, gx), (*w, Tensor::from_vec(val(*w).shape(), gw)?)]
            }
            Op::ChannelMean { x } => {
                let s = val(*x).shape();
                let p = s.plane();
                let denom = T::from_usize_lossy(s.c);
                let mut gx = Tensor::zeros(s);
                for (i, chunk) in gx.data_mut().chunks_mut(p).enumerate() {
                    let n = i / s.c;
                    for (d, &gv) in chunk.iter_mut().zip(&g.data()[n * p..(n + 1) * p]) {
                        *d = gv / denom;
                    }
                }
                vec![(*x, gx)]
            }
            Op::ChannelMax { x, argmax } => {
                let s = val(*x).shape();
                let p = s.plane();
                let mut gx = Tensor::zeros(s);
                for (k, (&c, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    let (n, i) = (k / p, k % p);
                    gx.data_mut()[(n * s.c + c) * p + i] += gv;
                }
                vec![(*x, gx)]
            }
            Op::Concat { xs } => {
                let mut start = 0;
                let mut v = Vec::with_capacity(xs.len());
                for x in xs {
                    let c = val(*x).shape().c;
                    v.push((*x, tensor::slice_channels(g, start, c)?));
                    start += c;
                }
                v
            }
            Op::Scale { x, gate, kind } => {
                let xv = val(*x);
                let gv = val(*gate);
                let s = xv.shape();
                let p = s.plane();
                let gx = tensor::scale(g, gv)?;
                let mut gg = Tensor::zeros(gv.shape());
                for (i, (gc, xc)) in g.data().chunks(p).zip(xv.data().chunks(p)).enumerate() {
                    match kind {
                        Broadcast::Channel => {
                            gg.data_mut()[i] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                        }
                        Broadcast::Spatial => {
                            let n = i / s.c;
                            let dst = &mut gg.data_mut()[n * p..(n + 1) * p];
                            for ((d, &a), &b) in dst.iter_mut().zip(gc).zip(xc) {
                                *d += a * b;
                            }
                        }
                    }
                }
                vec![(*x, gx), (*gate, gg)]
            }
            Op::Upsample { x } => {
                let s = val(*x).shape();
                let mut gx = Tensor::zeros(s);
                let gs = g.shape();
                for (i, plane) in g.data().chunks(gs.plane()).enumerate() {
                    let dst = &mut gx.data_mut()[i * s.plane()..(i + 1) * s.plane()];
                    for oy in 0..gs.h {
                        for ox in 0..gs.w {
                            dst[(oy / 2) * s.w + ox / 2] += plane[oy * gs.w + ox];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::MulScalar { x, k } => vec![(*x, g.map(|v| v * *k))],
            Op::Sum { x } => {
                let gv = g.data()[0];
                vec![(*x, Tensor::full(val(*x).shape(), gv))]
            }
            Op::Dot { x, w } => {
                let gv = g.data()[0];
                vec![(*x, w.map(|v| v * gv))]
            }
            Op::Custom { inputs, partials } => {
                let gv = g.data()[0];
                inputs
                    .iter()
                    .zip(partials)
                    .map(|(v, p)| (*v, p.map(|e| e * gv)))
                    .collect()
            }
        };
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            if acc.shape() != contrib.shape() {
                return Err(Error::dim("backward", "gradient shape mismatch"));
            }
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += *c;
            }
        }
    }
    Ok(())
}

fn vec_shape(len: usize) -> Shape {
    Shape::new(1, len, 1, 1)
}

impl<T: Scalar> Exec<T> for Tape<T> {
    type V = Var;

    fn shape(&self, v: &Var) -> Shape {
        self.value(*v).shape()
    }

    fn conv(&mut self, x: &Var, name: &str, weight: &Tensor<T>, bias: Option<&[T]>, spec: &ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"), weight.shape(), weight.data())?;
        let b = match bias {
            Some(b) => Some(self.param(&format!("{name}.bias"), vec_shape(b.len()), b)?),
            None => None,
        };
        let bias_data = b.map(|b| self.value(b).data().to_vec());
        let y = tensor::conv2d(self.value(*x), self.value(w), bias_data.as_deref(), spec)?;
        Ok(self.push(
            y,
            Op::Conv {
                x: *x,
                w,
                b,
                spec: *spec,
            },
        ))
    }

    fn batchnorm(&mut self, x: &Var, name: &str, bn: &BatchNorm<T>) -> Result<Var> {
        let c = bn.channels();
        if self.value(*x).shape().c != c {
            return Err(Error::dim(
                "batchnorm",
                format!("{} channels vs {c} parameters", self.value(*x).shape().c),
            ));
        }
        let gamma = self.param(&format!("{name}.gamma"), vec_shape(c), &bn.gamma)?;
        let beta = self.param(&format!("{name}.beta"), vec_shape(c), &bn.beta)?;
        let gam = self.value(gamma).data().to_vec();
        let bet = self.value(beta).data().to_vec();
        match self.bn_mode {
            BnMode::Inference => {
                let y = tensor::batchnorm_inference(self.value(*x), &gam, &bet, &bn.mean, &bn.var, bn.eps)?;
                Ok(self.push(
                    y,
                    Op::BnInference {
                        x: *x,
                        gamma,
                        beta,
                        mean: bn.mean.clone(),
                        var: bn.var.clone(),
                        eps: bn.eps,
                    },
                ))
            }
            BnMode::Batch => {
                let xv = self.value(*x);
                let s = xv.shape();
                let p = s.plane();
                let m = T::from_usize_lossy(s.n * p);
                let mut mean = vec![T::zero(); c];
                for (i, chunk) in xv.data().chunks(p).enumerate() {
                    mean[i % c] += chunk.iter().copied().sum::<T>();
                }
                mean.iter_mut().for_each(|v| *v = *v / m);
                let mut var = vec![T::zero(); c];
                for (i, chunk) in xv.data().chunks(p).enumerate() {
                    let mu = mean[i % c];
                    var[i % c] += chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
                var.iter_mut().for_each(|v| *v = *v / m);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + bn.eps).sqrt()).collect();
                let mut xhat = xv.clone();
                for (i, chunk) in xhat.data_mut().chunks_mut(p).enumerate() {
                    let ch = i % c;
                    chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
                }
                let mut y = xhat.clone();
                for (i, chunk) in y.data_mut().chunks_mut(p).enumerate() {
                    let ch = i % c;
                    chunk.iter_mut().for_each(|v| *v = *v * gam[ch] + bet[ch]);
                }
                self.batch_stats.push(BatchStats {
                    name: name.to_string(),
                    mean,
                    var,
                });
                Ok(self.push(
                    y,
                    Op::BnBatch {
                        x: *x,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                ))
            }
        }
    }

    fn act(&mut self, x: &Var, kind: Activation) -> Result<Var> {
        let y = tensor::activation(self.value(*x), kind);
        Ok(self.push(y, Op::Act { x: *x, kind }))
    }

    fn pool(&mut self, x: &Var, mode: PoolMode, spec: &ConvSpec) -> Result<Var> {
        match mode {
            PoolMode::Max => {
                let (y, argmax) = pool2d_with_argmax(self.value(*x), spec)?;
                Ok(self.push(y, Op::MaxPool { x: *x, argmax }))
            }
            PoolMode::Avg => {
                let y = tensor::pool2d(self.value(*x), PoolMode::Avg, spec)?;
                Ok(self.push(y, Op::AvgPool { x: *x, spec: *spec }))
            }
        }
    }

    fn global_avg_pool(&mut self, x: &Var) -> Result<Var> {
        let y = tensor::global_avg_pool(self.value(*x))?;
        Ok(self.push(y, Op::GlobalAvgPool { x: *x }))
    }

    fn conv1d_channels(&mut self, x: &Var, name: &str, weight: &[T]) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"), vec_shape(weight.len()), weight)?;
        let y = tensor::conv1d_channels(self.value(*x), self.value(w).data())?;
        Ok(self.push(y, Op::Conv1dChannels { x: *x, w }))
    }

    fn reduce_channels(&mut self, x: &Var, how: ChannelReduce) -> Result<Var> {
        let (y, argmax) = reduce_channels_with_argmax(self.value(*x), how)?;
        let op = match how {
            ChannelReduce::Mean => Op::ChannelMean { x: *x },
            ChannelReduce::Max => Op::ChannelMax { x: *x, argmax },
        };
        Ok(self.push(y, op))
    }

    fn concat(&mut self, xs: &[&Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|v| self.value(**v)).collect();
        let y = tensor::concat_channels(&vals)?;
        Ok(self.push(
            y,
            Op::Concat {
                xs: xs.iter().map(|v| **v).collect(),
            },
        ))
    }

    fn scale(&mut self, x: &Var, gate: &Var) -> Result<Var> {
        let kind = broadcast_kind(self.value(*x).shape(), self.value(*gate).shape())?;
        let y = tensor::scale(self.value(*x), self.value(*gate))?;
        Ok(self.push(
            y,
            Op::Scale {
                x: *x,
                gate: *gate,
                kind,
            },
        ))
    }

    fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        let y = tensor::upsample_nearest2x(self.value(*x));
        Ok(self.push(y, Op::Upsample { x: *x }))
    }
}

/// Options for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Smallest denominator of the relative error. Central differences in
    /// f64 cannot resolve derivatives much below `1e-10`, so an exactly-zero
    /// gradient would otherwise read as a large relative error.
    pub floor: f64,
    /// Coordinates to probe; all of them when `None`.
    pub coords: Option<Vec<usize>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_coord: usize,
    pub checked: usize,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, floor)`
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compare `analytic` against central differences
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` coordinate by coordinate.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if opts.epsilon <= 0.0 || opts.floor <= 0.0 {
        return Err(Error::Usage(
            "finite difference epsilon and floor must be positive".into(),
        ));
    }
    if analytic.len() != point.len() {
        return Err(Error::dim(
            "finite_diff_check",
            format!("{} gradient entries for {} coordinates", analytic.len(), point.len()),
        ));
    }
    let coords: Vec<usize> = match &opts.coords {
        Some(c) => c.clone(),
        None => (0..point.len()).collect(),
    };
    let mut x = point.to_vec();
    let mut worst = (0.0f64, coords.first().copied().unwrap_or(0));
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + opts.epsilon;
        let up = f(&x)?;
        x[i] = orig - opts.epsilon;
        let down = f(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * opts.epsilon);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Numeric {
                location: format!("coordinate {i}"),
            });
        }
        let err = relative_error(analytic[i], numeric, opts.floor);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_coord: worst.1,
        checked: coords.len(),
        passed: worst.0 < opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    /// Check d/dx of `build(tape, x)` against central differences.
    fn check_input_grad(x0: Tensor<f64>, bn_mode: BnMode, build: impl Fn(&mut Tape<f64>, Var) -> Var) -> f64 {
        let mut tape = Tape::new(bn_mode);
        let x = tape.leaf(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<f64> = grads
            .wrt(x)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x0.numel()]);
        let f = |p: &[f64]| {
            let mut t = Tape::new(bn_mode);
            let xv = t.leaf(Tensor::from_vec(x0.shape(), p.to_vec())?);
            let l = build(&mut t, xv);
            Ok(t.value(l).data()[0])
        };
        // Batch-mode BN gradients nearly cancel per channel; a smaller step
        // is dominated by roundoff there.
        let rep = finite_diff_check(f, x0.data(), &analytic, &GradCheckOptions::default()).unwrap();
        rep.max_rel_error
    }

    fn projection(shape: Shape) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        Tensor::random_uniform(shape, -1.0, 1.0, &mut r)
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = Tape::<f64>::default();
        let x = t.leaf(Tensor::random_uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng()));
        let l = t.sum(x);
        let g = t.backward(l).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn silu_gradient_at_zero_is_half() {
        let mut t = Tape::<f64>::default();
        let x = t.leaf(Tensor::zeros([1, 1, 2, 2]));
        let y = t.act(&x, Activation::Silu).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let mut t = Tape::<f64>::default();
        let x = t.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn linear_and_sigmoid_closed_forms() {
        let rep = finite_diff_check(|p| Ok(3.0 * p[0]), &[0.7], &[3.0], &GradCheckOptions::default()).unwrap();
        assert!(rep.max_rel_error < 1e-10 && rep.passed);
        let rep = finite_diff_check(
            |p| Ok(tensor::sigmoid(p[0])),
            &[0.0],
            &[Activation::Sigmoid.derivative(0.0)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed);
    }

    #[test]
    fn non_finite_is_reported_with_coordinate() {
        let err = finite_diff_check(
            |p| Ok(p[0] + p[1].ln()),
            &[1.0, 1e-4],
            &[1.0, 1e4],
            &GradCheckOptions {
                epsilon: 1e-3,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng();
        let w = Tensor::<f64>::random_uniform([4, 2, 3, 3], -1.0, 1.0, &mut r);
        let spec = ConvSpec::new(3, 2, 1).with_groups(2).with_bias();
        let bias = vec![0.1, -0.2, 0.3, 0.4];
        let x0 = Tensor::random_uniform([2, 4, 5, 5], -1.0, 1.0, &mut r);
        let err = check_input_grad(x0.clone(), BnMode::Inference, |t, x| {
            let y = t.conv(&x, "c", &w, Some(&bias), &spec).unwrap();
            t.sum(y)
        });
        assert!(err < 1e-6, "input grad {err}");

        // weight and bias gradients
        let mut t = Tape::<f64>::default();
        let x = t.leaf(x0.clone());
        let y = t.conv(&x, "c", &w, Some(&bias), &spec).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        let gw = g.wrt(t.param_var("c.weight").unwrap()).unwrap().data().to_vec();
        let gb = g.wrt(t.param_var("c.bias").unwrap()).unwrap().data().to_vec();
        let mut point = w.data().to_vec();
        point.extend_from_slice(&bias);
        let mut analytic = gw;
        analytic.extend_from_slice(&gb);
        let nw = w.numel();
        let rep = finite_diff_check(
            |p| {
                let wt = Tensor::from_vec(w.shape(), p[..nw].to_vec())?;
                let y = tensor::conv2d(&x0, &wt, Some(&p[nw..]), &spec)?;
                Ok(y.sum())
            },
            &point,
            &analytic,
            &GradCheckOptions {
                epsilon: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut r = rng();
        let x0 = Tensor::<f64>::random_uniform([2, 4, 6, 6], -1.0, 1.0, &mut r);
        let bn = BatchNorm::<f64> {
            gamma: vec![0.5, 1.5, -1.0, 2.0],
            beta: vec![0.1, -0.2, 0.3, 0.0],
            mean: vec![0.1, -0.3, 0.2, 0.0],
            var: vec![0.5, 2.0, 1.5, 1.0],
            eps: 1e-5,
        };
        type Build = Box<dyn Fn(&mut Tape<f64>, Var) -> Var>;
        let bn_a = bn.clone();
        let bn_b = bn.clone();
        let cases: Vec<(&str, BnMode, Build)> = vec![
            (
                "silu",
                BnMode::Inference,
                Box::new(|t, x| t.act(&x, Activation::Silu).unwrap()),
            ),
            (
                "sigmoid",
                BnMode::Inference,
                Box::new(|t, x| t.act(&x, Activation::Sigmoid).unwrap()),
            ),
            (
                "bn-inference",
                BnMode::Inference,
                Box::new(move |t, x| t.batchnorm(&x, "bn", &bn_a).unwrap()),
            ),
            (
                "bn-batch",
                BnMode::Batch,
                Box::new(move |t, x| t.batchnorm(&x, "bn", &bn_b).unwrap()),
            ),
            (
                "maxpool",
                BnMode::Inference,
                Box::new(|t, x| t.pool(&x, PoolMode::Max, &ConvSpec::new(5, 1, 2)).unwrap()),
            ),
            (
                "avgpool",
                BnMode::Inference,
                Box::new(|t, x| t.pool(&x, PoolMode::Avg, &ConvSpec::new(3, 2, 1)).unwrap()),
            ),
            (
                "gap",
                BnMode::Inference,
                Box::new(|t, x| t.global_avg_pool(&x).unwrap()),
            ),
            (
                "conv1d",
                BnMode::Inference,
                Box::new(|t, x| {
                    let d = t.global_avg_pool(&x).unwrap();
                    t.conv1d_channels(&d, "ca", &[0.3, -0.7, 0.5]).unwrap()
                }),
            ),
            (
                "mean-map",
                BnMode::Inference,
                Box::new(|t, x| t.reduce_channels(&x, ChannelReduce::Mean).unwrap()),
            ),
            (
                "max-map",
                BnMode::Inference,
                Box::new(|t, x| t.reduce_channels(&x, ChannelReduce::Max).unwrap()),
            ),
            (
                "concat",
                BnMode::Inference,
                Box::new(|t, x| {
                    let s = t.act(&x, Activation::Sigmoid).unwrap();
                    t.concat(&[&x, &s, &x]).unwrap()
                }),
            ),
            (
                "scale-channel",
                BnMode::Inference,
                Box::new(|t, x| {
                    let d = t.global_avg_pool(&x).unwrap();
                    let g = t.act(&d, Activation::Sigmoid).unwrap();
                    t.scale(&x, &g).unwrap()
                }),
            ),
            (
                "scale-spatial",
                BnMode::Inference,
                Box::new(|t, x| {
                    let m = t.reduce_channels(&x, ChannelReduce::Mean).unwrap();
                    let g = t.act(&m, Activation::Sigmoid).unwrap();
                    t.scale(&x, &g).unwrap()
                }),
            ),
            (
                "upsample",
                BnMode::Inference,
                Box::new(|t, x| t.upsample2x(&x).unwrap()),
            ),
        ];
        for (name, mode, build) in cases {
            let err = check_input_grad(x0.clone(), mode, |t, x| {
                let y = build(t, x);
                let shape = t.value(y).shape();
                t.dot(y, projection(shape)).unwrap()
            });
            assert!(err < 1e-6, "{name}: max relative error {err}");
        }
    }

    #[test]
    fn shared_leaves_accumulate_and_grads_are_linear() {
        let mut r = rng();
        let x0 = Tensor::<f64>::random_uniform([1, 3, 4, 4], -1.0, 1.0, &mut r);
        let grad_of = |a: f64, b: f64| {
            let mut t = Tape::<f64>::default();
            let x = t.leaf(x0.clone());
            let f = t.act(&x, Activation::Silu).unwrap();
            let g = t.act(&x, Activation::Sigmoid).unwrap();
            let fa = t.mul_scalar(f, a);
            let gb = t.mul_scalar(g, b);
            let s = t.add(fa, gb).unwrap();
            let l = t.sum(s);
            t.backward(l).unwrap().wrt(x).unwrap().clone()
        };
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combo = grad_of(2.5, -1.5);
        let expect = gf.zip_map(&gg, |p, q| 2.5 * p - 1.5 * q).unwrap();
        assert!(combo.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn max_pool_routes_each_window_to_one_cell() {
        let x0 = Tensor::<f64>::from_vec([1, 1, 2, 4], vec![1., 1., 0., 3., 1., 0., 3., 2.]).unwrap();
        let mut t = Tape::<f64>::default();
        let x = t.leaf(x0);
        let y = t.pool(&x, PoolMode::Max, &ConvSpec::new(2, 2, 0)).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        // left window ties on value 1 -> lowest index 0; right window: two 3s -> index 3
        assert_eq!(g.wrt(x).unwrap().data(), &[1., 0., 0., 1., 0., 0., 0., 0.]);
    }
}
