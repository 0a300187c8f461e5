use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Exec};
use crate::tensor::{Activation, ChannelReduce, ConvSpec, PoolMode, Scalar, Shape, Tensor};

/// One top-level layer of the accounting table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    pub params: usize,
    pub flops: u64,
    pub out_shape: Shape,
}

/// Shape-only backend that tallies learnable scalars and FLOPs.
///
/// Conventions: a multiply-accumulate is 2 FLOPs; batch norm costs 2 and any
/// activation 1 per element; pooling costs `k^2` per output element; global
/// pooling and channel reductions cost 1 per input element; gating costs 1
/// per gated element. Concatenation and upsampling are free.
#[derive(Debug, Default)]
pub struct Counter {
    rows: Vec<LayerRow>,
    open: Option<LayerRow>,
}

impl Counter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[LayerRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<LayerRow> {
        self.rows
    }

    fn row(&mut self) -> &mut LayerRow {
        self.open.get_or_insert_with(|| LayerRow {
            name: "(unnamed)".into(),
            params: 0,
            flops: 0,
            out_shape: Shape::new(0, 0, 0, 0),
        })
    }

    fn record(&mut self, params: usize, flops: u64, out: Shape) -> Shape {
        let r = self.row();
        r.params += params;
        r.flops += flops;
        r.out_shape = out;
        out
    }
}

fn n64(v: usize) -> u64 {
    v as u64
}

impl<T: Scalar> Exec<T> for Counter {
    type V = Shape;

    fn shape(&self, v: &Shape) -> Shape {
        *v
    }

    fn conv(
        &mut self,
        x: &Shape,
        name: &str,
        weight: &Tensor<T>,
        bias: Option<&[T]>,
        spec: &ConvSpec,
    ) -> Result<Shape> {
        let w = weight.shape();
        if x.c != w.c * spec.groups || !w.n.is_multiple_of(spec.groups) {
            return Err(Error::dim(
                "count_conv",
                format!("{name}: input {x} does not fit weight {w} with groups {}", spec.groups),
            ));
        }
        let out = Shape::new(x.n, w.n, spec.out_dim(x.h)?, spec.out_dim(x.w)?);
        let macs = n64(spec.kernel * spec.kernel * w.c * w.n) * n64(out.n * out.plane());
        let params = weight.numel() + bias.map_or(0, |b| b.len());
        Ok(self.record(params, 2 * macs, out))
    }

    fn batchnorm(&mut self, x: &Shape, _name: &str, bn: &BatchNorm<T>) -> Result<Shape> {
        Ok(self.record(2 * bn.channels(), 2 * n64(x.numel()), *x))
    }

    fn act(&mut self, x: &Shape, _kind: Activation) -> Result<Shape> {
        Ok(self.record(0, n64(x.numel()), *x))
    }

    fn pool(&mut self, x: &Shape, _mode: PoolMode, spec: &ConvSpec) -> Result<Shape> {
        let out = Shape::new(x.n, x.c, spec.out_dim(x.h)?, spec.out_dim(x.w)?);
        Ok(self.record(0, n64(spec.kernel * spec.kernel * out.numel()), out))
    }

    fn global_avg_pool(&mut self, x: &Shape) -> Result<Shape> {
        Ok(self.record(0, n64(x.numel()), Shape::new(x.n, x.c, 1, 1)))
    }

    fn conv1d_channels(&mut self, x: &Shape, _name: &str, weight: &[T]) -> Result<Shape> {
        Ok(self.record(weight.len(), 2 * n64(weight.len() * x.numel()), *x))
    }

    fn reduce_channels(&mut self, x: &Shape, _how: ChannelReduce) -> Result<Shape> {
        Ok(self.record(0, n64(x.numel()), Shape::new(x.n, 1, x.h, x.w)))
    }

    fn concat(&mut self, xs: &[&Shape]) -> Result<Shape> {
        let first = **xs.first().ok_or_else(|| Error::dim("count_concat", "no inputs"))?;
        let c = xs.iter().map(|s| s.c).sum();
        Ok(self.record(0, 0, Shape { c, ..first }))
    }

    fn scale(&mut self, x: &Shape, _gate: &Shape) -> Result<Shape> {
        Ok(self.record(0, n64(x.numel()), *x))
    }

    fn upsample2x(&mut self, x: &Shape) -> Result<Shape> {
        Ok(self.record(0, 0, Shape::new(x.n, x.c, 2 * x.h, 2 * x.w)))
    }

    fn enter(&mut self, layer: &str) {
        if let Some(r) = self.open.take() {
            self.rows.push(r);
        }
        self.open = Some(LayerRow {
            name: layer.to_string(),
            params: 0,
            flops: 0,
            out_shape: Shape::new(0, 0, 0, 0),
        });
    }

    fn exit(&mut self) {
        if let Some(r) = self.open.take() {
            self.rows.push(r);
        }
    }
}
