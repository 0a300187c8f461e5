use super::{sigmoid, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    Sigmoid,
    /// Pass-through; used to bypass the nonlinearity in tests and ablations.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Silu => v * sigmoid(v),
            Activation::Sigmoid => sigmoid(v),
            Activation::Identity => v,
        }
    }

    /// Derivative at `v` (the pre-activation input).
    #[inline]
    pub fn derivative<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Silu => {
                let s = sigmoid(v);
                s + v * s * (T::one() - s)
            }
            Activation::Sigmoid => {
                let s = sigmoid(v);
                s * (T::one() - s)
            }
            Activation::Identity => T::one(),
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta`, per channel.
pub fn batchnorm_inference<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if [gamma.len(), beta.len(), mean.len(), var.len()]
        .iter()
        .any(|&l| l != s.c)
    {
        return Err(Error::dim(
            "batchnorm",
            format!("parameter vectors must have length {} (channels)", s.c),
        ));
    }
    let mut out = x.clone();
    let p = s.plane();
    for (i, chunk) in out.data_mut().chunks_mut(p).enumerate() {
        let c = i % s.c;
        let k = gamma[c] / (var[c] + eps).sqrt();
        let b = beta[c] - mean[c] * k;
        chunk.iter_mut().for_each(|v| *v = *v * k + b);
    }
    Ok(out)
}

pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::dim("concat_channels", "no inputs"))?
        .shape();
    let mut c = 0;
    for t in xs {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::dim("concat_channels", format!("{s} vs {first}")));
        }
        c += s.c;
    }
    let out_shape = Shape::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for t in xs {
            let per = t.shape().c * first.plane();
            data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Channels `[start, start + len)` of every batch entry.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.c {
        return Err(Error::dim(
            "slice_channels",
            format!("[{start}, {}) out of {} channels", start + len, s.c),
        ));
    }
    let p = s.plane();
    let mut data = Vec::with_capacity(s.n * len * p);
    for n in 0..s.n {
        let base = (n * s.c + start) * p;
        data.extend_from_slice(&x.data()[base..base + len * p]);
    }
    Tensor::from_vec(Shape::new(s.n, len, s.h, s.w), data)
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::dim("global_avg_pool", "empty spatial extent"));
    }
    let denom = T::from_usize_lossy(s.plane());
    let data = x
        .data()
        .chunks(s.plane())
        .map(|plane| plane.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)
}

/// Odd-length 1-D convolution along the channel axis of a `(n, c, 1, 1)`
/// descriptor, zero-padded by `(k - 1) / 2` on both ends.
pub fn conv1d_channels<T: Scalar>(desc: &Tensor<T>, weight: &[T]) -> Result<Tensor<T>> {
    let k = weight.len();
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "channel mixing kernel length must be odd, got {k}"
        )));
    }
    let s = desc.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::dim(
            "conv1d_channels",
            format!("descriptor must be (n, c, 1, 1), got {s}"),
        ));
    }
    let half = (k / 2) as isize;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let row = &desc.data()[n * s.c..(n + 1) * s.c];
        for c in 0..s.c {
            let mut acc = T::zero();
            for (j, &wv) in weight.iter().enumerate() {
                let src = c as isize + j as isize - half;
                if src >= 0 && (src as usize) < s.c {
                    acc += wv * row[src as usize];
                }
            }
            out.data_mut()[n * s.c + c] = acc;
        }
    }
    Ok(out)
}

/// How a gate tensor broadcasts against the gated tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    /// `(n, c, 1, 1)`
    Channel,
    /// `(n, 1, h, w)`
    Spatial,
}

pub(crate) fn broadcast_kind(x: Shape, w: Shape) -> Result<Broadcast> {
    if w == Shape::new(x.n, x.c, 1, 1) {
        Ok(Broadcast::Channel)
    } else if w == Shape::new(x.n, 1, x.h, x.w) {
        Ok(Broadcast::Spatial)
    } else {
        Err(Error::dim(
            "scale",
            format!("weights {w} broadcast neither per-channel nor per-position over {x}"),
        ))
    }
}

/// Elementwise product with a per-channel or per-position gate.
pub fn scale<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let kind = broadcast_kind(s, weights.shape())?;
    let p = s.plane();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(p).enumerate() {
        match kind {
            Broadcast::Channel => {
                let g = weights.data()[i];
                chunk.iter_mut().for_each(|v| *v *= g);
            }
            Broadcast::Spatial => {
                let n = i / s.c;
                let gate = &weights.data()[n * p..(n + 1) * p];
                chunk.iter_mut().zip(gate).for_each(|(v, &g)| *v *= g);
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(os);
    let mut k = 0;
    for src in x.data().chunks(s.plane().max(1)).take(s.n * s.c) {
        for oy in 0..os.h {
            let row = &src[(oy / 2) * s.w..(oy / 2 + 1) * s.w];
            for ox in 0..os.w {
                out.data_mut()[k] = row[ox / 2];
                k += 1;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelReduce {
    Mean,
    Max,
}

/// Reduce over the channel axis to `(n, 1, h, w)`.
pub fn reduce_channels<T: Scalar>(x: &Tensor<T>, how: ChannelReduce) -> Result<Tensor<T>> {
    reduce_channels_with_argmax(x, how).map(|(t, _)| t)
}

/// As [`reduce_channels`]; for `Max` also returns the winning channel per
/// position (lowest channel on ties).
pub(crate) fn reduce_channels_with_argmax<T: Scalar>(
    x: &Tensor<T>,
    how: ChannelReduce,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.c == 0 {
        return Err(Error::dim("reduce_channels", "no channels"));
    }
    let p = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    let mut arg = vec![0usize; if how == ChannelReduce::Max { s.n * p } else { 0 }];
    let denom = T::from_usize_lossy(s.c);
    for n in 0..s.n {
        for i in 0..p {
            let v = match how {
                ChannelReduce::Mean => {
                    let mut acc = T::zero();
                    for c in 0..s.c {
                        acc += x.data()[(n * s.c + c) * p + i];
                    }
                    acc / denom
                }
                ChannelReduce::Max => {
                    let mut best = x.data()[n * s.c * p + i];
                    let mut bc = 0;
                    for c in 1..s.c {
                        let v = x.data()[(n * s.c + c) * p + i];
                        if v > best {
                            best = v;
                            bc = c;
                        }
                    }
                    arg[n * p + i] = bc;
                    best
                }
            };
            out.data_mut()[n * p + i] = v;
        }
    }
    Ok((out, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_closed_forms() {
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((Activation::Silu.apply(1.0f64) - expect).abs() < 1e-15);
        assert!((expect - 0.731059).abs() < 1e-6);
        assert_eq!(Activation::Sigmoid.derivative(0.0f64), 0.25);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(Activation::Sigmoid.apply(-1000.0f32), 0.0);
        assert_eq!(Activation::Sigmoid.apply(1000.0f32), 1.0);
    }

    #[test]
    fn batchnorm_identity_and_affine() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![3.0, -1.0]).unwrap();
        let y = batchnorm_inference(&x, &[1.0], &[0.0], &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(y, x);
        let y = batchnorm_inference(&x, &[2.0], &[1.0], &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(y.data()[0], 7.0);
        assert!(batchnorm_inference(&x, &[1.0, 2.0], &[0.0], &[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn concat_preserves_order() {
        let a = Tensor::<f32>::full([1, 2, 2, 2], 1.0);
        let b = Tensor::<f32>::full([1, 3, 2, 2], 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 5, 2, 2));
        assert!(y.data()[..8].iter().all(|&v| v == 1.0));
        assert!(y.data()[8..].iter().all(|&v| v == 2.0));
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let bad = Tensor::<f32>::full([1, 1, 3, 2], 0.0);
        assert!(matches!(concat_channels(&[&a, &bad]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv1d_channels_cases() {
        let d = Tensor::<f32>::from_vec([1, 5, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(conv1d_channels(&d, &[1.0]).unwrap(), d);
        assert_eq!(conv1d_channels(&d, &[0.0, 1.0, 0.0]).unwrap(), d);
        assert_eq!(
            conv1d_channels(&d, &[1.0, 1.0, 1.0]).unwrap().data(),
            &[3.0, 6.0, 9.0, 12.0, 9.0]
        );
        assert!(matches!(conv1d_channels(&d, &[1.0, 1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn global_avg_pool_cases() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f32>::full([2, 3, 4, 5], 0.75);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn scale_broadcast_forms() {
        let x = Tensor::<f32>::from_vec([1, 2, 1, 1], vec![5.0, 7.0]).unwrap();
        let w = Tensor::<f32>::from_vec([1, 2, 1, 1], vec![2.0, 3.0]).unwrap();
        assert_eq!(scale(&x, &w).unwrap().data(), &[10.0, 21.0]);

        let x = Tensor::<f32>::full([2, 3, 2, 2], 4.0);
        assert_eq!(scale(&x, &Tensor::full([2, 1, 2, 2], 1.0)).unwrap(), x);
        assert_eq!(
            scale(&x, &Tensor::full([2, 3, 1, 1], 0.0)).unwrap(),
            Tensor::zeros([2, 3, 2, 2])
        );
        assert!(scale(&x, &Tensor::full([2, 3, 2, 1], 1.0)).is_err());
        assert!(scale(&x, &Tensor::full([1, 3, 1, 1], 1.0)).is_err());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(upsample_nearest2x(&x).data(), &[5.0; 4]);
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            upsample_nearest2x(&x).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn channel_reductions() {
        let x = Tensor::<f32>::from_vec([1, 3, 1, 2], vec![1.0, 5.0, 4.0, 2.0, 4.0, 0.0]).unwrap();
        assert_eq!(
            reduce_channels(&x, ChannelReduce::Mean).unwrap().data(),
            &[3.0, 7.0 / 3.0]
        );
        let (m, arg) = reduce_channels_with_argmax(&x, ChannelReduce::Max).unwrap();
        assert_eq!(m.data(), &[4.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
    }
}
