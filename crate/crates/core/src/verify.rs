//! Finite-difference checks of every block's backward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, BnMode, GradCheckOptions, Tape, Var};
use crate::blocks::{Cbs, EaConv, EaDown, GateOrder, Sppf};
use crate::detector::Head;
use crate::error::Result;
use crate::nn::Module;
use crate::tensor::{Shape, Tensor};

/// Input every block is checked on.
pub const CHECK_SHAPE: Shape = Shape::new(1, 4, 6, 6);
pub const CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub block: &'static str,
    /// Input and parameter coordinates probed.
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `sum(block(x) * r)` for a fixed random `r`, differentiated with respect to
/// the input and every parameter at once. Batch norm uses batch statistics,
/// the path training exercises.
fn check_block<M: Module<f64> + Clone>(
    name: &'static str,
    block: &M,
    seed: u64,
    forward: impl Fn(&M, &mut Tape<f64>, Var) -> Result<Var>,
) -> Result<BlockCheck> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::<f64>::random_uniform(CHECK_SHAPE, -1.0, 1.0, rng);

    let eval = |m: &M, x: Tensor<f64>, r: &Tensor<f64>| -> Result<(Tape<f64>, Var, Var)> {
        let mut tape = Tape::new(BnMode::Batch);
        let xv = tape.leaf(x);
        let y = forward(m, &mut tape, xv)?;
        let loss = tape.dot(y, r.clone())?;
        Ok((tape, xv, loss))
    };

    let out_shape = {
        let mut t = Tape::new(BnMode::Batch);
        let xv = t.leaf(x0.clone());
        let y = forward(block, &mut t, xv)?;
        t.value(y).shape()
    };
    let r = Tensor::random_uniform(out_shape, -1.0, 1.0, rng);
    let (tape, xv, loss) = eval(block, x0.clone(), &r)?;
    let grads = tape.backward(loss)?;
    let mut point = x0.data().to_vec();
    let mut analytic = grads
        .wrt(xv)
        .map_or_else(|| vec![0.0; x0.numel()], |g| g.data().to_vec());
    block.visit_params("", &mut |pname, _, data| {
        point.extend_from_slice(data);
        match tape.param_var(pname).and_then(|v| grads.wrt(v)) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, data.len())),
        }
    });

    let f = |p: &[f64]| {
        let mut m = block.clone();
        let mut off = CHECK_SHAPE.numel();
        m.visit_params_mut("", &mut |_, _, data| {
            data.copy_from_slice(&p[off..off + data.len()]);
            off += data.len();
        });
        let x = Tensor::from_vec(CHECK_SHAPE, p[..CHECK_SHAPE.numel()].to_vec())?;
        let (tape, _, loss) = eval(&m, x, &r)?;
        Ok(tape.value(loss).data()[0])
    };
    let opts = GradCheckOptions {
        tolerance: CHECK_TOLERANCE,
        ..Default::default()
    };
    let rep = finite_diff_check(f, &point, &analytic, &opts)?;
    Ok(BlockCheck {
        block: name,
        checked: rep.checked,
        max_rel_error: rep.max_rel_error,
        passed: rep.passed,
    })
}

/// CBS, SPPF, EAConv, EADown and a detection head, each on a `1x4x6x6`
/// input in f64.
pub fn check_all_blocks(seed: u64) -> Result<Vec<BlockCheck>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let cbs = Cbs::<f64>::new(4, 4, 3, 1, 1, rng);
    let sppf = Sppf::<f64>::new(4, 2, 4, false, rng);
    let eaconv = EaConv::<f64>::new(4, 4, 3, 1, GateOrder::ChannelFirst, rng);
    let eadown = EaDown::<f64>::new(4, 4, GateOrder::ChannelFirst, rng);
    let head = Head::<f64>::new(4, 4, 2, rng);
    Ok(vec![
        check_block("CBS", &cbs, seed, |b, t, x| b.forward(t, &x, ""))?,
        check_block("SPPF", &sppf, seed, |b, t, x| b.forward(t, &x, ""))?,
        check_block("EAConv", &eaconv, seed, |b, t, x| b.forward(t, &x, ""))?,
        check_block("EADown", &eadown, seed, |b, t, x| b.forward(t, &x, ""))?,
        check_block("Head", &head, seed, |b, t, x| b.forward(t, &x, ""))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes() {
        for c in check_all_blocks(42).unwrap() {
            assert!(c.passed, "{c:?}");
            assert!(c.checked > CHECK_SHAPE.numel());
        }
    }
}
