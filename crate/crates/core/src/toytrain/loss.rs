use crate::detector::{BBox, STRIDES};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Weight of each negative cell's classification term.
pub const NEG_WEIGHT: f64 = 0.05;

/// Head level and cell responsible for a ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

/// Coarsest stride whose cell still fits inside the box's short side
/// (stride 8 when none does), at the cell containing the box center.
pub fn assign(b: &BBox, size: usize) -> Assignment {
    let short = b.width().min(b.height());
    let level = (0..STRIDES.len())
        .rev()
        .find(|&l| STRIDES[l] as f32 <= short)
        .unwrap_or(0);
    let s = STRIDES[level] as f32;
    let cells = size / STRIDES[level];
    let (cx, cy) = b.center();
    Assignment {
        level,
        row: ((cy / s) as usize).min(cells - 1),
        col: ((cx / s) as usize).min(cells - 1),
    }
}

/// `log(1 + e^z) - y z`, computed without overflow.
fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// IoU of `p` with `t` and its partials with respect to `(x1, y1, x2, y2)`
/// of `p`.
pub(crate) fn iou_with_grad(p: [f64; 4], t: [f64; 4]) -> (f64, [f64; 4]) {
    let iw = p[2].min(t[2]) - p[0].max(t[0]);
    let ih = p[3].min(t[3]) - p[1].max(t[1]);
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let ap = pw * ph;
    let at = (t[2] - t[0]) * (t[3] - t[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = ap + at - inter;
    let v = inter / union;
    // d(I/U) = dI (U + I) / U^2 - dAp I / U^2
    let d_inter = (union + inter) / (union * union);
    let d_ap = -inter / (union * union);
    let di = [
        if p[0] > t[0] { -ih } else { 0.0 },
        if p[1] > t[1] { -iw } else { 0.0 },
        if p[2] < t[2] { ih } else { 0.0 },
        if p[3] < t[3] { iw } else { 0.0 },
    ];
    let dap = [-ph, -pw, ph, pw];
    (v, std::array::from_fn(|k| d_inter * di[k] + d_ap * dap[k]))
}

/// Loss of one batch item and its gradient with respect to the three raw
/// head maps.
///
/// Terms: binary cross-entropy on every class logit (positive at each
/// truth's assigned cell, negatives weighted by [`NEG_WEIGHT`]) plus
/// `1 - IoU` of the decoded box at each assigned cell. A cell claimed by two
/// truths keeps the first.
pub fn toy_loss<T: Scalar>(levels: &[Tensor<T>; 3], n: usize, truths: &[BBox]) -> Result<(f64, [Tensor<T>; 3])> {
    let size = levels[0].shape().h * STRIDES[0];
    let nc = levels[0].shape().c - 4;
    for b in truths {
        let s = size as f32;
        if !(b.is_valid() && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= s && b.y2 <= s) {
            return Err(Error::Input(format!(
                "truth {b:?} lies outside the {size}x{size} image"
            )));
        }
    }
    let mut grads: [Tensor<T>; 3] = std::array::from_fn(|l| Tensor::zeros(levels[l].shape()));
    let mut assigned: Vec<(Assignment, &BBox)> = Vec::new();
    for b in truths {
        let a = assign(b, size);
        if !assigned.iter().any(|(o, _)| *o == a) {
            assigned.push((a, b));
        }
    }

    let mut loss = 0.0;
    for l in 0..3 {
        let sh = levels[l].shape();
        let raw = levels[l].data();
        let g = grads[l].data_mut();
        let at = |c: usize, i: usize, j: usize| ((n * sh.c + c) * sh.h + i) * sh.w + j;
        for i in 0..sh.h {
            for j in 0..sh.w {
                let pos = assigned
                    .iter()
                    .find(|(a, _)| a.level == l && a.row == i && a.col == j)
                    .map(|(_, b)| *b);
                for k in 0..nc {
                    let idx = at(4 + k, i, j);
                    let z = raw[idx].to_f64().unwrap_or(f64::NAN);
                    let (y, w) = if pos.is_some() && k == 0 {
                        (1.0, 1.0)
                    } else {
                        (0.0, NEG_WEIGHT)
                    };
                    loss += w * bce_with_logits(z, y);
                    g[idx] = T::lit(w * (sigmoid(z) - y));
                }
                let Some(b) = pos else { continue };
                let st = STRIDES[l] as f64;
                let (cx, cy) = ((j as f64 + 0.5) * st, (i as f64 + 0.5) * st);
                let r: [f64; 4] = std::array::from_fn(|c| raw[at(c, i, j)].to_f64().unwrap_or(f64::NAN));
                let d: [f64; 4] = std::array::from_fn(|c| r[c].max(0.0) * st);
                let p = [cx - d[0], cy - d[1], cx + d[2], cy + d[3]];
                let t = [b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64];
                let (v, dv) = iou_with_grad(p, t);
                loss += 1.0 - v;
                let sign = [-1.0, -1.0, 1.0, 1.0];
                for c in 0..4 {
                    if r[c] > 0.0 {
                        g[at(c, i, j)] = T::lit(-dv[c] * sign[c] * st);
                    }
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric {
            location: "toy loss".into(),
        });
    }
    Ok((loss, grads))
}
