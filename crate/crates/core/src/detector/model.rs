use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Cbs, EaConv, EaDown, GateOrder, Sppf};
use crate::error::{Error, Result};
use crate::nn::{cast_vec, join, Eager, Exec, Module};
use crate::tensor::{ConvSpec, Scalar, Shape, Tensor};

use super::config::{ConvBlockKind, DownBlockKind, ModelConfig};

/// Head output strides, finest first.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Initial bias of the class logits: a 1% prior so training starts from
/// near-empty predictions.
pub const CLASS_PRIOR: f64 = 0.01;

/// Initial bias of the ltrb distance outputs, in stride units.
pub const BOX_BIAS_INIT: f64 = 0.75;

/// Bound of the uniform init of the final prediction conv. Small, so the
/// initial outputs sit at their biases.
pub const OUT_WEIGHT_BOUND: f64 = 0.01;

/// Stage feature block.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvBlock<T> {
    Ea(EaConv<T>),
    Dense(Cbs<T>),
}

impl<T: Scalar> ConvBlock<T> {
    fn new(kind: ConvBlockKind, cin: usize, cout: usize, order: GateOrder, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            ConvBlockKind::EaConv => ConvBlock::Ea(EaConv::new(cin, cout, 3, 1, order, rng)),
            ConvBlockKind::Dense => ConvBlock::Dense(Cbs::new(cin, cout, 3, 1, 1, rng)),
        }
    }

    pub fn forward<E: Exec<T>>(&self, e: &mut E, x: &E::V, name: &str) -> Result<E::V> {
        match self {
            ConvBlock::Ea(b) => b.forward(e, x, name),
            ConvBlock::Dense(b) => b.forward(e, x, name),
        }
    }

    fn cast<U: Scalar>(&self) -> ConvBlock<U> {
        match self {
            ConvBlock::Ea(b) => ConvBlock::Ea(b.cast()),
            ConvBlock::Dense(b) => ConvBlock::Dense(b.cast()),
        }
    }
}

impl<T: Scalar> Module<T> for ConvBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        match self {
            ConvBlock::Ea(b) => b.visit_params(prefix, f),
            ConvBlock::Dense(b) => b.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        match self {
            ConvBlock::Ea(b) => b.visit_params_mut(prefix, f),
            ConvBlock::Dense(b) => b.visit_params_mut(prefix, f),
        }
    }
}

/// Stride-2 downsampler.
#[derive(Clone, Debug, PartialEq)]
pub enum DownBlock<T> {
    Ea(EaDown<T>),
    Strided(Cbs<T>),
}

impl<T: Scalar> DownBlock<T> {
    fn new(kind: DownBlockKind, cin: usize, cout: usize, order: GateOrder, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            DownBlockKind::EaDown => DownBlock::Ea(EaDown::new(cin, cout, order, rng)),
            DownBlockKind::Strided => DownBlock::Strided(Cbs::new(cin, cout, 3, 2, 1, rng)),
        }
    }

    pub fn forward<E: Exec<T>>(&self, e: &mut E, x: &E::V, name: &str) -> Result<E::V> {
        match self {
            DownBlock::Ea(b) => b.forward(e, x, name),
            DownBlock::Strided(b) => b.forward(e, x, name),
        }
    }

    fn cast<U: Scalar>(&self) -> DownBlock<U> {
        match self {
            DownBlock::Ea(b) => DownBlock::Ea(b.cast()),
            DownBlock::Strided(b) => DownBlock::Strided(b.cast()),
        }
    }
}

impl<T: Scalar> Module<T> for DownBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        match self {
            DownBlock::Ea(b) => b.visit_params(prefix, f),
            DownBlock::Strided(b) => b.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        match self {
            DownBlock::Ea(b) => b.visit_params_mut(prefix, f),
            DownBlock::Strided(b) => b.visit_params_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub down: DownBlock<T>,
    pub blocks: Vec<ConvBlock<T>>,
}

/// Two 3x3 CBS layers and a biased 1x1 conv to `4 + num_classes` maps:
/// ltrb distances first, then class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub cv1: Cbs<T>,
    pub cv2: Cbs<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Head<T> {
    pub const OUT_SPEC: ConvSpec = ConvSpec::new(1, 1, 0).with_bias();

    pub fn new(cin: usize, hidden: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let cv1 = Cbs::new(cin, hidden, 3, 1, 1, rng);
        let cv2 = Cbs::new(hidden, hidden, 3, 1, 1, rng);
        let weight = Tensor::random_uniform(
            [4 + num_classes, hidden, 1, 1],
            -OUT_WEIGHT_BOUND,
            OUT_WEIGHT_BOUND,
            rng,
        );
        let class_bias = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        let bias = (0..4 + num_classes)
            .map(|i| T::lit(if i < 4 { BOX_BIAS_INIT } else { class_bias }))
            .collect();
        Head { cv1, cv2, weight, bias }
    }

    pub fn forward<E: Exec<T>>(&self, e: &mut E, x: &E::V, name: &str) -> Result<E::V> {
        let y = self.cv1.forward(e, x, &join(name, "cv1"))?;
        let y = self.cv2.forward(e, &y, &join(name, "cv2"))?;
        e.conv(&y, &join(name, "out"), &self.weight, Some(&self.bias), &Self::OUT_SPEC)
    }

    pub fn cast<U: Scalar>(&self) -> Head<U> {
        Head {
            cv1: self.cv1.cast(),
            cv2: self.cv2.cast(),
            weight: self.weight.cast(),
            bias: cast_vec(&self.bias),
        }
    }
}

impl<T: Scalar> Module<T> for Head<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        self.cv2.visit_params(&join(prefix, "cv2"), f);
        f(
            &join(prefix, "out.weight"),
            &self.weight.shape().dims(),
            self.weight.data(),
        );
        f(&join(prefix, "out.bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
        let dims = self.weight.shape().dims();
        f(&join(prefix, "out.weight"), &dims, self.weight.data_mut());
        let n = self.bias.len();
        f(&join(prefix, "out.bias"), &[n], &mut self.bias);
    }
}

/// Two top-down fusions (upsample, concat skip, fuse) and two bottom-up
/// fusions (downsample, concat, fuse).
#[derive(Clone, Debug, PartialEq)]
pub struct Neck<T> {
    pub td1: ConvBlock<T>,
    pub td2: ConvBlock<T>,
    pub bu1_down: DownBlock<T>,
    pub bu1: ConvBlock<T>,
    pub bu2_down: DownBlock<T>,
    pub bu2: ConvBlock<T>,
}

/// Raw head maps at strides 8, 16 and 32, each `(n, 4 + nc, S/l, S/l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction<T = f32> {
    pub levels: [Tensor<T>; 3],
}

impl<T: Scalar> RawPrediction<T> {
    pub fn batch(&self) -> usize {
        self.levels[0].shape().n
    }

    pub fn num_classes(&self) -> usize {
        self.levels[0].shape().c - 4
    }

    /// Side of the (square) network input these maps came from.
    pub fn input_size(&self) -> usize {
        self.levels[0].shape().h * STRIDES[0]
    }
}

/// The assembled detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub cfg: ModelConfig,
    pub stem: Cbs<T>,
    pub stages: Vec<Stage<T>>,
    pub sppf: Sppf<T>,
    pub neck: Neck<T>,
    pub heads: Vec<Head<T>>,
}

impl<T: Scalar> Model<T> {
    /// Build with deterministic seeded initialization.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate().map_err(|e| Error::Config(e.message))?;
        let ch = cfg.channels().map_err(|e| Error::Config(e.message))?;
        let depths = cfg.depths();
        let order = cfg.gate_order;
        let rng = &mut ChaCha8Rng::seed_from_u64(cfg.seed);

        let stem = Cbs::new(3, ch[0], 3, 2, 1, rng);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let (cin, cout) = (ch[s], ch[s + 1]);
            let down = DownBlock::new(cfg.down_block, cin, cout, order, rng);
            let blocks = (0..depths[s])
                .map(|_| ConvBlock::new(cfg.conv_block, cout, cout, order, rng))
                .collect();
            stages.push(Stage { down, blocks });
        }
        let (c2, c3, c4) = (ch[2], ch[3], ch[4]);
        let sppf = Sppf::new(c4, c4 / 2, c4, cfg.sppf_identity_branch, rng);
        let neck = Neck {
            td1: ConvBlock::new(cfg.conv_block, c4 + c3, c3, order, rng),
            td2: ConvBlock::new(cfg.conv_block, c3 + c2, c2, order, rng),
            bu1_down: DownBlock::new(cfg.down_block, c2, c2, order, rng),
            bu1: ConvBlock::new(cfg.conv_block, c2 + c3, c3, order, rng),
            bu2_down: DownBlock::new(cfg.down_block, c3, c3, order, rng),
            bu2: ConvBlock::new(cfg.conv_block, c3 + c4, c4, order, rng),
        };
        let hidden = c2;
        let heads = [c2, c3, c4]
            .iter()
            .map(|&c| Head::new(c, hidden, cfg.num_classes, rng))
            .collect();
        Ok(Model {
            cfg: cfg.clone(),
            stem,
            stages,
            sppf,
            neck,
            heads,
        })
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, 3, self.cfg.input_size, self.cfg.input_size)
    }

    /// Run the graph on any backend, at any valid square input size. Layer
    /// boundaries are reported through [`Exec::enter`] / [`Exec::exit`].
    pub fn forward_with<E: Exec<T>>(&self, e: &mut E, x: &E::V) -> Result<[E::V; 3]> {
        let s = e.shape(x);
        if s.n == 0 || s.c != 3 || s.h != s.w || s.h < 64 || s.h % 32 != 0 {
            return Err(Error::dim(
                "model",
                format!("input is {s}, expected a batch of 3-channel squares with side a multiple of 32"),
            ));
        }
        fn layer<T: Scalar, E: Exec<T>>(e: &mut E, name: &str, f: impl FnOnce(&mut E) -> Result<E::V>) -> Result<E::V> {
            e.enter(name);
            let out = f(e);
            e.exit();
            out
        }

        let mut y = layer(e, "stem", |e| self.stem.forward(e, x, "stem"))?;
        let mut taps = Vec::with_capacity(4);
        for (si, stage) in self.stages.iter().enumerate() {
            let prefix = format!("stage{}", si + 1);
            let name = join(&prefix, "down");
            y = layer(e, &name, |e| stage.down.forward(e, &y, &name))?;
            for (bi, block) in stage.blocks.iter().enumerate() {
                let name = join(&prefix, &format!("block{}", bi + 1));
                y = layer(e, &name, |e| block.forward(e, &y, &name))?;
            }
            taps.push(y.clone());
        }
        let p5 = layer(e, "sppf", |e| self.sppf.forward(e, &taps[3], "sppf"))?;
        let n = &self.neck;
        let t4 = layer(e, "neck.td1", |e| {
            let up = e.upsample2x(&p5)?;
            let cat = e.concat(&[&up, &taps[2]])?;
            n.td1.forward(e, &cat, "neck.td1")
        })?;
        let out3 = layer(e, "neck.td2", |e| {
            let up = e.upsample2x(&t4)?;
            let cat = e.concat(&[&up, &taps[1]])?;
            n.td2.forward(e, &cat, "neck.td2")
        })?;
        let out4 = layer(e, "neck.bu1", |e| {
            let d = n.bu1_down.forward(e, &out3, "neck.bu1_down")?;
            let cat = e.concat(&[&d, &t4])?;
            n.bu1.forward(e, &cat, "neck.bu1")
        })?;
        let out5 = layer(e, "neck.bu2", |e| {
            let d = n.bu2_down.forward(e, &out4, "neck.bu2_down")?;
            let cat = e.concat(&[&d, &p5])?;
            n.bu2.forward(e, &cat, "neck.bu2")
        })?;
        let feats = [out3, out4, out5];
        let mut outs = Vec::with_capacity(3);
        for (i, (head, f)) in self.heads.iter().zip(feats.iter()).enumerate() {
            let name = format!("head.p{}", i + 3);
            outs.push(layer(e, &name, |e| head.forward(e, f, &name))?);
        }
        let [a, b, c]: [E::V; 3] = outs.try_into().map_err(|_| Error::Usage("head count".into()))?;
        Ok([a, b, c])
    }

    /// Eager forward pass. The input must be exactly `(n, 3, S, S)` with `S`
    /// the configured input size.
    pub fn forward(&self, x: &Tensor<T>) -> Result<RawPrediction<T>> {
        let want = self.input_shape(x.shape().n);
        if x.shape() != want {
            return Err(Error::dim(
                "model",
                format!(
                    "input is {}, expected {want} (images must be letterboxed first)",
                    x.shape()
                ),
            ));
        }
        let levels = self.forward_with(&mut Eager, x)?;
        for (l, t) in levels.iter().enumerate() {
            if !t.all_finite() {
                return Err(Error::Numeric {
                    location: format!("head output at stride {}", STRIDES[l]),
                });
            }
        }
        Ok(RawPrediction { levels })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            stem: self.stem.cast(),
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    down: s.down.cast(),
                    blocks: s.blocks.iter().map(|b| b.cast()).collect(),
                })
                .collect(),
            sppf: self.sppf.cast(),
            neck: Neck {
                td1: self.neck.td1.cast(),
                td2: self.neck.td2.cast(),
                bu1_down: self.neck.bu1_down.cast(),
                bu1: self.neck.bu1.cast(),
                bu2_down: self.neck.bu2_down.cast(),
                bu2: self.neck.bu2.cast(),
            },
            heads: self.heads.iter().map(|h| h.cast()).collect(),
        }
    }

    /// Every batch norm in the model, in parameter order, with its name.
    pub fn batchnorms_mut(&mut self) -> Vec<(String, &mut crate::nn::BatchNorm<T>)> {
        fn cbs<'a, T>(out: &mut Vec<(String, &'a mut crate::nn::BatchNorm<T>)>, c: &'a mut Cbs<T>, name: String) {
            out.push((join(&name, "bn"), &mut c.bn));
        }
        fn conv<'a, T>(
            out: &mut Vec<(String, &'a mut crate::nn::BatchNorm<T>)>,
            b: &'a mut ConvBlock<T>,
            name: String,
        ) {
            match b {
                ConvBlock::Ea(b) => {
                    cbs(out, &mut b.dw, join(&name, "dw"));
                    cbs(out, &mut b.pw, join(&name, "pw"));
                }
                ConvBlock::Dense(c) => cbs(out, c, name),
            }
        }
        fn down<'a, T>(
            out: &mut Vec<(String, &'a mut crate::nn::BatchNorm<T>)>,
            b: &'a mut DownBlock<T>,
            name: String,
        ) {
            match b {
                DownBlock::Ea(b) => cbs(out, &mut b.fuse, join(&name, "fuse")),
                DownBlock::Strided(c) => cbs(out, c, name),
            }
        }
        let mut out = Vec::new();
        cbs(&mut out, &mut self.stem, "stem".into());
        for (si, s) in self.stages.iter_mut().enumerate() {
            let p = format!("stage{}", si + 1);
            down(&mut out, &mut s.down, join(&p, "down"));
            for (bi, b) in s.blocks.iter_mut().enumerate() {
                conv(&mut out, b, join(&p, &format!("block{}", bi + 1)));
            }
        }
        cbs(&mut out, &mut self.sppf.entry, "sppf.entry".into());
        cbs(&mut out, &mut self.sppf.exit, "sppf.exit".into());
        let n = &mut self.neck;
        conv(&mut out, &mut n.td1, "neck.td1".into());
        conv(&mut out, &mut n.td2, "neck.td2".into());
        down(&mut out, &mut n.bu1_down, "neck.bu1_down".into());
        conv(&mut out, &mut n.bu1, "neck.bu1".into());
        down(&mut out, &mut n.bu2_down, "neck.bu2_down".into());
        conv(&mut out, &mut n.bu2, "neck.bu2".into());
        for (i, h) in self.heads.iter_mut().enumerate() {
            let p = format!("head.p{}", i + 3);
            cbs(&mut out, &mut h.cv1, join(&p, "cv1"));
            cbs(&mut out, &mut h.cv2, join(&p, "cv2"));
        }
        out
    }

    /// Fold every batch norm's running statistics into its gamma/beta.
    pub fn bake_statistics(&mut self) {
        for (_, bn) in self.batchnorms_mut() {
            bn.bake_statistics();
        }
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (si, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{}", si + 1));
            s.down.visit_params(&join(&p, "down"), f);
            for (bi, b) in s.blocks.iter().enumerate() {
                b.visit_params(&join(&p, &format!("block{}", bi + 1)), f);
            }
        }
        self.sppf.visit_params(&join(prefix, "sppf"), f);
        let n = &self.neck;
        n.td1.visit_params(&join(prefix, "neck.td1"), f);
        n.td2.visit_params(&join(prefix, "neck.td2"), f);
        n.bu1_down.visit_params(&join(prefix, "neck.bu1_down"), f);
        n.bu1.visit_params(&join(prefix, "neck.bu1"), f);
        n.bu2_down.visit_params(&join(prefix, "neck.bu2_down"), f);
        n.bu2.visit_params(&join(prefix, "neck.bu2"), f);
        for (i, h) in self.heads.iter().enumerate() {
            h.visit_params(&join(prefix, &format!("head.p{}", i + 3)), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        for (si, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{}", si + 1));
            s.down.visit_params_mut(&join(&p, "down"), f);
            for (bi, b) in s.blocks.iter_mut().enumerate() {
                b.visit_params_mut(&join(&p, &format!("block{}", bi + 1)), f);
            }
        }
        self.sppf.visit_params_mut(&join(prefix, "sppf"), f);
        let n = &mut self.neck;
        n.td1.visit_params_mut(&join(prefix, "neck.td1"), f);
        n.td2.visit_params_mut(&join(prefix, "neck.td2"), f);
        n.bu1_down.visit_params_mut(&join(prefix, "neck.bu1_down"), f);
        n.bu1.visit_params_mut(&join(prefix, "neck.bu1"), f);
        n.bu2_down.visit_params_mut(&join(prefix, "neck.bu2_down"), f);
        n.bu2.visit_params_mut(&join(prefix, "neck.bu2"), f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_params_mut(&join(prefix, &format!("head.p{}", i + 3)), f);
        }
    }
}
