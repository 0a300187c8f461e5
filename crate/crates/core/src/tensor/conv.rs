use rayon::prelude::*;

use super::{ConvSpec, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Below this many multiply-adds a GEMM runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `out[m x n] += a[m x k] * b[k x n]`, all row-major.
///
/// Rows of `out` are independent, so splitting them across threads does not
/// change the summation order of any element.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

struct Geometry {
    cin: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn check<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    let xs = x.shape();
    let ws = weight.shape();
    let g = spec.groups;
    if g == 0 || !xs.c.is_multiple_of(g) || !ws.n.is_multiple_of(g) {
        return Err(Error::dim(
            op,
            format!(
                "groups {g} must divide input channels {} and output channels {}",
                xs.c, ws.n
            ),
        ));
    }
    if ws.c != xs.c / g || ws.h != spec.kernel || ws.w != spec.kernel {
        return Err(Error::dim(
            op,
            format!(
                "weight {ws} inconsistent with input {xs}, kernel {}, groups {g}",
                spec.kernel
            ),
        ));
    }
    match (bias, spec.has_bias) {
        (Some(b), true) if b.len() != ws.n => {
            return Err(Error::dim(op, format!("bias length {} for {} outputs", b.len(), ws.n)))
        }
        (Some(_), false) => return Err(Error::dim(op, "bias given but spec has no bias")),
        (None, true) => return Err(Error::dim(op, "spec requires a bias")),
        _ => {}
    }
    Ok(Geometry {
        cin: xs.c,
        cout: ws.n,
        cin_g: xs.c / g,
        cout_g: ws.n / g,
        h: xs.h,
        w: xs.w,
        ho: spec.out_dim(xs.h)?,
        wo: spec.out_dim(xs.w)?,
    })
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1 && spec.padding == 0
}

/// Unfold `channels` planes of one sample into a `(channels * k * k) x (ho * wo)` matrix.
fn im2col<T: Scalar>(src: &[T], channels: usize, g: &Geometry, spec: &ConvSpec) -> Vec<T> {
    let k = spec.kernel;
    let p = g.ho * g.wo;
    let mut col = vec![T::zero(); channels * k * k * p];
    for c in 0..channels {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Inverse of [`im2col`]: scatter-add columns back into `channels` planes.
fn col2im<T: Scalar>(col: &[T], dst: &mut [T], channels: usize, g: &Geometry, spec: &ConvSpec) {
    let k = spec.kernel;
    let p = g.ho * g.wo;
    for c in 0..channels {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution with zero padding.
///
/// `weight` is `(c_out, c_in / groups, k, k)`; `bias` must be present exactly
/// when `spec.has_bias` is set.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let g = check("conv2d", x, weight, bias, spec)?;
    let n = x.shape().n;
    let p = g.ho * g.wo;
    let kk = g.cin_g * spec.kernel * spec.kernel;
    let mut out = Tensor::zeros(Shape::new(n, g.cout, g.ho, g.wo));
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    for b in 0..n {
        let src = &x.data()[b * in_per..(b + 1) * in_per];
        let dst = &mut out.data_mut()[b * out_per..(b + 1) * out_per];
        for grp in 0..spec.groups {
            let chans = &src[grp * g.cin_g * g.h * g.w..(grp + 1) * g.cin_g * g.h * g.w];
            let w = &weight.data()[grp * g.cout_g * kk..(grp + 1) * g.cout_g * kk];
            let o = &mut dst[grp * g.cout_g * p..(grp + 1) * g.cout_g * p];
            if is_pointwise(spec) {
                gemm_acc(w, chans, o, g.cout_g, kk, p);
            } else {
                let col = im2col(chans, g.cin_g, &g, spec);
                gemm_acc(w, &col, o, g.cout_g, kk, p);
            }
        }
        if let Some(bias) = bias {
            for (row, &bv) in dst.chunks_mut(p).zip(bias) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Vec<T>>)> {
    let bias_probe: Option<Vec<T>> = spec.has_bias.then(|| vec![T::zero(); weight.shape().n]);
    let g = check("conv2d_backward", x, weight, bias_probe.as_deref(), spec)?;
    let n = x.shape().n;
    let p = g.ho * g.wo;
    let kk = g.cin_g * spec.kernel * spec.kernel;
    if grad_out.shape() != Shape::new(n, g.cout, g.ho, g.wo) {
        return Err(Error::dim("conv2d_backward", "gradient shape differs from output"));
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = bias_probe;
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    for b in 0..n {
        let src = &x.data()[b * in_per..(b + 1) * in_per];
        let go = &grad_out.data()[b * out_per..(b + 1) * out_per];
        for grp in 0..spec.groups {
            let plane_len = g.cin_g * g.h * g.w;
            let chans = &src[grp * plane_len..(grp + 1) * plane_len];
            let col = if is_pointwise(spec) {
                chans.to_vec()
            } else {
                im2col(chans, g.cin_g, &g, spec)
            };
            let go_g = &go[grp * g.cout_g * p..(grp + 1) * g.cout_g * p];
            let w = &weight.data()[grp * g.cout_g * kk..(grp + 1) * g.cout_g * kk];

            let gw_g = &mut gw.data_mut()[grp * g.cout_g * kk..(grp + 1) * g.cout_g * kk];
            for (co, gw_row) in gw_g.chunks_mut(kk).enumerate() {
                let go_row = &go_g[co * p..(co + 1) * p];
                for (r, gwv) in gw_row.iter_mut().enumerate() {
                    let col_row = &col[r * p..(r + 1) * p];
                    let mut acc = T::zero();
                    for (&a, &c) in go_row.iter().zip(col_row) {
                        acc += a * c;
                    }
                    *gwv += acc;
                }
            }

            let mut gcol = vec![T::zero(); kk * p];
            for co in 0..g.cout_g {
                let go_row = &go_g[co * p..(co + 1) * p];
                for r in 0..kk {
                    let wv = w[co * kk + r];
                    let dst = &mut gcol[r * p..(r + 1) * p];
                    for (d, &gv) in dst.iter_mut().zip(go_row) {
                        *d += wv * gv;
                    }
                }
            }
            let gx_b = &mut gx.data_mut()[b * in_per..(b + 1) * in_per];
            let gx_g = &mut gx_b[grp * plane_len..(grp + 1) * plane_len];
            if is_pointwise(spec) {
                for (d, &v) in gx_g.iter_mut().zip(&gcol) {
                    *d += v;
                }
            } else {
                col2im(&gcol, gx_g, g.cin_g, &g, spec);
            }
        }
        if let Some(gb) = gb.as_mut() {
            for (co, row) in go.chunks(p).enumerate() {
                gb[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Fold inference batch-norm statistics into a bias-free conv weight.
///
/// Returns `(weight', bias')` with `conv(x, weight', bias') == bn(conv(x, weight))`.
pub fn fold_batchnorm<T: Scalar>(
    weight: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    let cout = weight.shape().n;
    if [gamma.len(), beta.len(), mean.len(), var.len()]
        .iter()
        .any(|&l| l != cout)
    {
        return Err(Error::dim("fold_batchnorm", format!("vectors must have length {cout}")));
    }
    let per = weight.numel() / cout.max(1);
    let mut w = weight.clone();
    let mut bias = Vec::with_capacity(cout);
    for co in 0..cout {
        let s = gamma[co] / (var[co] + eps).sqrt();
        w.data_mut()[co * per..(co + 1) * per].iter_mut().for_each(|v| *v *= s);
        bias.push(beta[co] - mean[co] * s);
    }
    Ok((w, bias))
}
