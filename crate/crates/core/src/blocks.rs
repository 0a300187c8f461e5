//! The detector's composite layers: CBS, SPPF, EAConv and EADown, plus the
//! channel and spatial attention gates they share.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{cast_vec, join, visit_bn, visit_bn_mut, BatchNorm, Exec, Module};
use crate::tensor::{Activation, ChannelReduce, ConvSpec, PoolMode, Scalar, Tensor};

/// He-uniform bound for a layer with the given fan-in.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

pub(crate) fn he_uniform<T: Scalar>(shape: [usize; 4], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let b = he_bound(fan_in);
    Tensor::random_uniform(shape, -b, b, rng)
}

/// Conv → BatchNorm → activation (SiLU by default). The conv has no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Cbs<T> {
    pub weight: Tensor<T>,
    pub bn: BatchNorm<T>,
    pub spec: ConvSpec,
    pub act: Activation,
}

impl<T: Scalar> Cbs<T> {
    /// `k x k` conv with "same" padding.
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, groups: usize, rng: &mut impl Rng) -> Self {
        let spec = ConvSpec::same(k, stride).with_groups(groups);
        let fan_in = cin / groups * k * k;
        Cbs {
            weight: he_uniform([cout, cin / groups, k, k], fan_in, rng),
            bn: BatchNorm::new(cout),
            spec,
            act: Activation::Silu,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c * self.spec.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn forward<E: Exec<T>>(&self, e: &mut E, x: &E::V, name: &str) -> Result<E::V> {
        let y = e.conv(x, &join(name, "conv"), &self.weight, None, &self.spec)?;
        let y = e.batchnorm(&y, &join(name, "bn"), &self.bn)?;
        e.act(&y, self.act)
    }

    pub fn cast<U: Scalar>(&self) -> Cbs<U> {
        Cbs {
            weight: self.weight.cast(),
            bn: self.bn.cast(),
            spec: self.spec,
            act: self.act,
        }
    }
}

impl<T: Scalar> Module<T> for Cbs<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(
            &join(prefix, "conv.weight"),
            &self.weight.shape().dims(),
            self.weight.data(),
        );
        visit_bn(&self.bn, &join(prefix, "bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let dims = self.weight.shape().dims();
        f(&join(prefix, "conv.weight"), &dims, self.weight.data_mut());
        visit_bn_mut(&mut self.bn, &join(prefix, "bn"), f);
    }
}

/// Mixing-kernel length for channel attention over `channels` channels:
/// `t = floor(|(log2(c) + 1) / 2|)`, bumped to the next odd number.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = (((channels.max(1) as f64).log2() + 1.0) / 2.0).abs() as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

/// Global-average descriptor, odd-length cross-channel conv, sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention<T> {
    pub weight: Vec<T>,
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let k = eca_kernel_size(channels);
        let b = he_bound(k);
        ChannelAttention {
            weight: (0..k).map(|_| T::lit(rng.gen_range(-b..b))).collect(),
        }
    }

    /// Gate of shape `(n, c, 1, 1)` with values in (0, 1).
    pub fn gate<E: Exec<T>>(&self, e: &mut E, x: &E::V, name: &str) -> Result<E::V> {
        if self.weight.len().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: channel attention kernel length {} is even",
                self.weight.len()
            )));
        }
        let d = e.global_avg_pool(x)?;
        let d = e.conv1d_channels(&d, name, &self.weight)?;
        e.act(&d, Activation::Sigmoid)
    }
}

impl<T: Scalar> Module<T> for ChannelAttention<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "weight"), &[self.weight.len()], &self.weight);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let k = self.weight.len();
        f(&join(prefix, "weight"), &[k], &mut self.weight);
    }
}

pub const SPATIAL_KERNEL: usize = 7;

/// `[mean; max]` channel maps, 7x7 conv (padding 3, with bias), sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttention<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> SpatialAttention<T> {
    pub fn new(rng: &mut impl Rng) -> Self {
        let k = SPATIAL_KERNEL;
        SpatialAttention {
            weight: he_uniform([1, 2, k, k], 2 * k * k, rng),
            bias: vec![T::zero()],
        }
    }

    pub fn spec() -> ConvSpec {
        ConvSpec::same(SPATIAL_KERNEL, 1).with_bias()
    }

    /// Gate of shape `(n, 1, h, w)` with values in (0, 1).
    pub fn gate<E: Exec<T>>(&self, e: &mut E, x: &E::V, name: &str) -> Result<E::V> {
        let mean = e.reduce_channels(x, ChannelReduce::Mean)?;
        let max = e.reduce_channels(x, ChannelReduce::Max)?;
        let m = e.concat(&[&mean, &max])?;
        let y = e.conv(&m, name, &self.weight, Some(&self.bias), &Self::spec())?;
        e.act(&y, Activation::Sigmoid)
    }
}

impl<T: Scalar> Module<T> for SpatialAttention<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "weight"), &self.weight.shape().dims(), self.weight.data());
        f(&join(prefix, "bias"), &[1], &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        let dims = self.weight.shape().dims();
        f(&join(prefix, "weight"), &dims, self.weight.data_mut());
        f(&join(prefix, "bias"), &[1], &mut self.bias);
    }
}

/// Which attention gate is applied first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum GateOrder {
    #[default]
    ChannelFirst,
    SpatialFirst,
}

/// Channel then spatial gating (or the reverse), each gate computed from the
/// tensor it is about to modulate.
#[derive(Clone, Debug, PartialEq)]
pub struct Gates<T> {
    pub channel: ChannelAttention<T>,
    pub spatial: SpatialAttention<T>,
    pub order: GateOrder,
}

impl<T: Scalar> Gates<T> {
    pub fn new(channels: usize, order: GateOrder, rng: &mut impl Rng) -> Self {
        Gates {
            channel: ChannelAttention::new(channels, rng),
            spatial: SpatialAttention::new(rng),
            order,
        }
    }

    pub fn apply<E: Exec<T>>(&self, e: &mut E, y: &E::V, name: &str) -> Result<E::V> {
        let channel = |e: &mut E, v: &E::V| -> Result<E::V> {
            let g = self.channel.gate(e, v, &join(name, "ca"))?;
            e.scale(v, &g)
        };
        let spatial = |e: &mut E, v: &E::V| -> Result<E::V> {
            let g = self.spatial.gate(e, v, &join(name, "sa"))?;
            e.scale(v, &g)
        };
        match self.order {
            GateOrder::ChannelFirst => {
                let v = channel(e, y)?;
                spatial(e, &v)
            }
            GateOrder::SpatialFirst => {
                let v = spatial(e, y)?;
                channel(e, &v)
            }
        }
    }

    fn cast<U: Scalar>(&self) -> Gates<U> {
        Gates {
            channel: ChannelAttention {
                weight: cast_vec(&self.channel.weight),
            },
            spatial: SpatialAttention {
                weight: self.spatial.weight.cast(),
                bias: cast_vec(&self.spatial.bias),
            },
            order: self.order,
        }
    }
}

impl<T: Scalar> Module<T> for Gates<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.channel.visit_params(&join(prefix, "ca"), f);
        self.spatial.visit_params(&join(prefix, "sa"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.channel.visit_params_mut(&join(prefix, "ca"), f);
        self.spatial.visit_params_mut(&join(prefix, "sa"), f);
    }
}

/// Depthwise CBS → pointwise CBS → attention gates.
#[derive(Clone, Debug, PartialEq)]
pub struct EaConv<T> {
    pub dw: Cbs<T>,
    pub pw: Cbs<T>,
    pub gates: Gates<T>,
}

impl<T: Scalar> EaConv<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, order: GateOrder, rng: &mut impl Rng) -> Self {
        EaConv {
            dw: Cbs::new(cin, cin, k, stride, cin, rng),
            pw: Cbs::new(cin, cout, 1, 1, 1, rng),
            gates: Gates::new(cout, order, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.pw.out_channels()
    }

    pub fn forward<E: Exec<T>>(&self, e: &mut E, x: &E::V, name: &str) -> Result<E::V> {
        let y = self.dw.forward(e, x, &join(name, "dw"))?;
        let y = self.pw.forward(e, &y, &join(name, "pw"))?;
        self.gates.apply(e, &y, name)
    }

    pub fn cast<U: Scalar>(&self) -> EaConv<U> {
        EaConv {
            dw: self.dw.cast(),
            pw: self.pw.cast(),
            gates: self.gates.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for EaConv<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.dw.visit_params(&join(prefix, "dw"), f);
        self.pw.visit_params(&join(prefix, "pw"), f);
        self.gates.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.dw.visit_params_mut(&join(prefix, "dw"), f);
        self.pw.visit_params_mut(&join(prefix, "pw"), f);
        self.gates.visit_params_mut(prefix, f);
    }
}

/// Parallel 2x2/stride-2 max and average pooling, concatenated, fused by a
/// 1x1 CBS, then gated.
#[derive(Clone, Debug, PartialEq)]
pub struct EaDown<T> {
    pub fuse: Cbs<T>,
    pub gates: Gates<T>,
}

impl<T: Scalar> EaDown<T> {
    pub const POOL: ConvSpec = ConvSpec::new(2, 2, 0);

    pub fn new(cin: usize, cout: usize, order: GateOrder, rng: &mut impl Rng) -> Self {
        EaDown {
            fuse: Cbs::new(2 * cin, cout, 1, 1, 1, rng),
            gates: Gates::new(cout, order, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.out_channels()
    }

    pub fn forward<E: Exec<T>>(&self, e: &mut E, x: &E::V, name: &str) -> Result<E::V> {
        let s = e.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::geometry(
                "eadown",
                format!("{name}: input {s} must have even height and width"),
            ));
        }
        let mx = e.pool(x, PoolMode::Max, &Self::POOL)?;
        let av = e.pool(x, PoolMode::Avg, &Self::POOL)?;
        let cat = e.concat(&[&mx, &av])?;
        let y = self.fuse.forward(e, &cat, &join(name, "fuse"))?;
        self.gates.apply(e, &y, name)
    }

    pub fn cast<U: Scalar>(&self) -> EaDown<U> {
        EaDown {
            fuse: self.fuse.cast(),
            gates: self.gates.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for EaDown<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.fuse.visit_params(&join(prefix, "fuse"), f);
        self.gates.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.fuse.visit_params_mut(&join(prefix, "fuse"), f);
        self.gates.visit_params_mut(prefix, f);
    }
}

/// Entry 1x1 CBS, three chained 5x5/stride-1 max pools, concatenation of the
/// pooled maps (optionally with the entry output), exit 1x1 CBS.
#[derive(Clone, Debug, PartialEq)]
pub struct Sppf<T> {
    pub entry: Cbs<T>,
    pub exit: Cbs<T>,
    pub identity_branch: bool,
}

impl<T: Scalar> Sppf<T> {
    pub const POOL: ConvSpec = ConvSpec::new(5, 1, 2);

    pub fn new(cin: usize, hidden: usize, cout: usize, identity_branch: bool, rng: &mut impl Rng) -> Self {
        let branches = if identity_branch { 4 } else { 3 };
        Sppf {
            entry: Cbs::new(cin, hidden, 1, 1, 1, rng),
            exit: Cbs::new(branches * hidden, cout, 1, 1, 1, rng),
            identity_branch,
        }
    }

    pub fn concat_width(&self) -> usize {
        let branches = if self.identity_branch { 4 } else { 3 };
        branches * self.entry.out_channels()
    }

    /// Entry output and the three pooled branches, in order.
    pub fn branches<E: Exec<T>>(&self, e: &mut E, x: &E::V, name: &str) -> Result<[E::V; 4]> {
        let y0 = self.entry.forward(e, x, &join(name, "entry"))?;
        let y1 = e.pool(&y0, PoolMode::Max, &Self::POOL)?;
        let y2 = e.pool(&y1, PoolMode::Max, &Self::POOL)?;
        let y3 = e.pool(&y2, PoolMode::Max, &Self::POOL)?;
        Ok([y0, y1, y2, y3])
    }

    pub fn forward<E: Exec<T>>(&self, e: &mut E, x: &E::V, name: &str) -> Result<E::V> {
        if self.exit.in_channels() != self.concat_width() {
            return Err(Error::Config(format!(
                "{name}: exit conv expects {} channels but the concatenation has {}",
                self.exit.in_channels(),
                self.concat_width()
            )));
        }
        let [y0, y1, y2, y3] = self.branches(e, x, name)?;
        let cat = if self.identity_branch {
            e.concat(&[&y0, &y1, &y2, &y3])?
        } else {
            e.concat(&[&y1, &y2, &y3])?
        };
        self.exit.forward(e, &cat, &join(name, "exit"))
    }

    pub fn cast<U: Scalar>(&self) -> Sppf<U> {
        Sppf {
            entry: self.entry.cast(),
            exit: self.exit.cast(),
            identity_branch: self.identity_branch,
        }
    }
}

impl<T: Scalar> Module<T> for Sppf<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.entry.visit_params(&join(prefix, "entry"), f);
        self.exit.visit_params(&join(prefix, "exit"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.entry.visit_params_mut(&join(prefix, "entry"), f);
        self.exit.visit_params_mut(&join(prefix, "exit"), f);
    }
}
