use super::{ConvSpec, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    /// Padded cells are excluded from the divisor.
    Avg,
}

fn out_shape<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec) -> Result<Shape> {
    if spec.padding >= spec.kernel {
        return Err(Error::geometry(
            "pool2d",
            format!(
                "padding {} >= kernel {} leaves windows entirely in padding",
                spec.padding, spec.kernel
            ),
        ));
    }
    let s = x.shape();
    Ok(Shape::new(s.n, s.c, spec.out_dim(s.h)?, spec.out_dim(s.w)?))
}

/// Clamp the window starting at `o * stride - padding` to `[0, len)`.
#[inline]
pub(crate) fn window(o: usize, len: usize, spec: &ConvSpec) -> (usize, usize) {
    let start = (o * spec.stride) as isize - spec.padding as isize;
    let end = start + spec.kernel as isize;
    (start.max(0) as usize, end.min(len as isize) as usize)
}

pub fn pool2d<T: Scalar>(x: &Tensor<T>, mode: PoolMode, spec: &ConvSpec) -> Result<Tensor<T>> {
    match mode {
        PoolMode::Max => pool2d_with_argmax(x, spec).map(|(t, _)| t),
        PoolMode::Avg => {
            let os = out_shape(x, spec)?;
            let s = x.shape();
            let mut out = Tensor::zeros(os);
            let mut k = 0;
            for n in 0..s.n {
                for c in 0..s.c {
                    let plane = x.plane(n, c);
                    for oy in 0..os.h {
                        let (y0, y1) = window(oy, s.h, spec);
                        for ox in 0..os.w {
                            let (x0, x1) = window(ox, s.w, spec);
                            let mut acc = T::zero();
                            for iy in y0..y1 {
                                for v in &plane[iy * s.w + x0..iy * s.w + x1] {
                                    acc += *v;
                                }
                            }
                            let count = (y1 - y0) * (x1 - x0);
                            out.data_mut()[k] = acc / T::from_usize_lossy(count);
                            k += 1;
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Max pooling plus, for every output cell, the flat input offset it came
/// from. Ties go to the lowest flat index.
pub fn pool2d_with_argmax<T: Scalar>(x: &Tensor<T>, spec: &ConvSpec) -> Result<(Tensor<T>, Vec<usize>)> {
    let os = out_shape(x, spec)?;
    let s = x.shape();
    let mut out = Tensor::zeros(os);
    let mut arg = vec![0usize; os.numel()];
    let mut k = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = x.offset(n, c, 0, 0);
            let plane = x.plane(n, c);
            for oy in 0..os.h {
                let (y0, y1) = window(oy, s.h, spec);
                for ox in 0..os.w {
                    let (x0, x1) = window(ox, s.w, spec);
                    let mut best = T::neg_infinity();
                    let mut best_i = y0 * s.w + x0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let v = plane[iy * s.w + ix];
                            if v > best {
                                best = v;
                                best_i = iy * s.w + ix;
                            }
                        }
                    }
                    out.data_mut()[k] = plane[best_i];
                    arg[k] = base + best_i;
                    k += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

/// Spread `grad_out` uniformly over each (unpadded) average-pool window.
pub(crate) fn avg_pool_backward<T: Scalar>(input_shape: Shape, spec: &ConvSpec, grad_out: &Tensor<T>) -> Tensor<T> {
    let os = grad_out.shape();
    let s = input_shape;
    let mut gx = Tensor::zeros(s);
    let mut k = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = gx.offset(n, c, 0, 0);
            for oy in 0..os.h {
                let (y0, y1) = window(oy, s.h, spec);
                for ox in 0..os.w {
                    let (x0, x1) = window(ox, s.w, spec);
                    let count = T::from_usize_lossy((y1 - y0) * (x1 - x0));
                    let g = grad_out.data()[k] / count;
                    k += 1;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            gx.data_mut()[base + iy * s.w + ix] += g;
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t22() -> Tensor<f32> {
        Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn max_and_avg_on_two_by_two() {
        let spec = ConvSpec::new(2, 2, 0);
        assert_eq!(pool2d(&t22(), PoolMode::Max, &spec).unwrap().data(), &[4.0]);
        assert_eq!(pool2d(&t22(), PoolMode::Avg, &spec).unwrap().data(), &[2.5]);
    }

    #[test]
    fn padding_only_window_is_rejected() {
        let err = pool2d(&t22(), PoolMode::Max, &ConvSpec::new(2, 1, 2)).unwrap_err();
        assert!(matches!(err, Error::Geometry { .. }));
    }

    #[test]
    fn avg_excludes_padding_so_constants_are_fixed_points() {
        let x = Tensor::<f32>::full([1, 2, 5, 7], 3.25);
        let y = pool2d(&x, PoolMode::Avg, &ConvSpec::new(5, 1, 2)).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.25).abs() < 1e-6));
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        let x = Tensor::<f32>::full([1, 1, 2, 2], 1.0);
        let (_, arg) = pool2d_with_argmax(&x, &ConvSpec::new(2, 2, 0)).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn avg_pool_preserves_global_mean_when_tiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::random_uniform([2, 3, 8, 12], -1.0, 1.0, &mut rng);
        let y = pool2d(&x, PoolMode::Avg, &ConvSpec::new(4, 4, 0)).unwrap();
        let mx = x.sum() / x.numel() as f64;
        let my = y.sum() / y.numel() as f64;
        assert!((mx - my).abs() < 1e-12);
    }
}
