//! Quick property suite behind the `selftest` command. Each check compares a
//! library routine with a slow, obviously-correct reference or with a stated
//! invariant, on a small seeded sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::metrics::average_precision;
use crate::analysis::{count_params, evaluate_detections, GroundTruth, ImageRecord};
use crate::detector::{iou, nms, BBox, Detection, Letterbox, Model, ModelConfig};
use crate::io::weights::collect_tensors;
use crate::io::{decode_weights, encode_weights, parse_config, print_config, Precision};
use crate::tensor::{conv2d, pool2d, ConvSpec, PoolMode, Tensor};
use crate::toytrain::{gen_dataset, BG_MAX, BLOB_MARGIN};
use crate::verify::check_all_blocks;

#[derive(Clone, Debug, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
    let (s, ws) = (x.shape(), w.shape());
    let ho = (s.h + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    let wo = (s.w + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    let cout_g = ws.n / spec.groups;
    Tensor::from_fn([s.n, ws.n, ho, wo], |n, co, i, j| {
        let g = co / cout_g;
        let mut acc = 0.0;
        for ci in 0..ws.c {
            for ki in 0..spec.kernel {
                for kj in 0..spec.kernel {
                    let y = (i * spec.stride + ki) as isize - spec.padding as isize;
                    let xx = (j * spec.stride + kj) as isize - spec.padding as isize;
                    if y >= 0 && xx >= 0 && (y as usize) < s.h && (xx as usize) < s.w {
                        acc += x.at(n, g * ws.c + ci, y as usize, xx as usize) * w.at(co, ci, ki, kj);
                    }
                }
            }
        }
        acc
    })
}

fn conv_oracle(rng: &mut ChaCha8Rng) -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..40 {
        let c = 2 * rng.gen_range(1..=4);
        let depthwise = i % 2 == 1;
        let (cout, groups) = if depthwise { (c, c) } else { (rng.gen_range(1..=8), 1) };
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let spec = ConvSpec::new(k, rng.gen_range(1..=2), k / 2).with_groups(groups);
        let hw = rng.gen_range(k.max(2)..=16);
        let x = Tensor::<f64>::random_uniform([rng.gen_range(1..=2), c, hw, hw], -1.0, 1.0, rng);
        let w = Tensor::<f64>::random_uniform([cout, c / groups, k, k], -1.0, 1.0, rng);
        let got = conv2d(&x, &w, None, &spec).map_err(|e| e.to_string())?;
        let want = naive_conv(&x, &w, &spec);
        worst = worst.max(
            got.max_abs_diff(&want)
                .ok_or("conv output shape differs from the loop nest")?,
        );
    }
    check(
        worst < 1e-9,
        format!("40 instances, max diff {worst:.1e}"),
        format!("max diff {worst:.1e}"),
    )
}

fn pool_composition(rng: &mut ChaCha8Rng) -> Outcome {
    let p5 = ConvSpec::new(5, 1, 2);
    for _ in 0..50 {
        let hw = rng.gen_range(1..=12);
        let x = Tensor::<f64>::random_uniform([1, rng.gen_range(1..=3), hw, hw], -1.0, 1.0, rng);
        let pool = |t: &Tensor<f64>, s: &ConvSpec| pool2d(t, PoolMode::Max, s).map_err(|e| e.to_string());
        let two = pool(&pool(&x, &p5)?, &p5)?;
        let three = pool(&two, &p5)?;
        if two != pool(&x, &ConvSpec::new(9, 1, 4))? || three != pool(&x, &ConvSpec::new(13, 1, 6))? {
            return Err(format!("stacked 5x5 pools differ from a single pool at {hw}x{hw}"));
        }
    }
    Ok("50 tensors, exact".into())
}

fn block_gradients() -> Outcome {
    let checks = check_all_blocks(42).map_err(|e| e.to_string())?;
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    match checks.iter().find(|c| !c.passed) {
        Some(c) => Err(format!("{} max relative error {:.1e}", c.block, c.max_rel_error)),
        None => Ok(format!("{} blocks, max relative error {worst:.1e}", checks.len())),
    }
}

fn random_det(rng: &mut ChaCha8Rng) -> Detection {
    let x1 = rng.gen_range(0.0..50.0f32);
    let y1 = rng.gen_range(0.0..50.0f32);
    Detection {
        class_id: rng.gen_range(0..2),
        score: (rng.gen_range(0..20) as f32) / 20.0,
        bbox: BBox::new(
            x1,
            y1,
            x1 + rng.gen_range(1.0..30.0f32),
            y1 + rng.gen_range(1.0..30.0f32),
        ),
    }
}

/// Classic suppression loop: take the best remaining box, drop everything of
/// its class that overlaps it too much, repeat.
fn reference_nms(cands: &[Detection], thr: f64) -> Vec<Detection> {
    let mut left = cands.to_vec();
    let mut out = Vec::new();
    while !left.is_empty() {
        let best = (0..left.len())
            .min_by(|&a, &b| crate::detector::nms_order(&left[a], &left[b]))
            .expect("non-empty");
        let b = left.remove(best);
        left.retain(|d| d.class_id != b.class_id || iou(&d.bbox, &b.bbox) <= thr);
        out.push(b);
    }
    out
}

fn nms_oracle(rng: &mut ChaCha8Rng) -> Outcome {
    for case in 0..200 {
        let cands: Vec<Detection> = (0..rng.gen_range(0..25)).map(|_| random_det(rng)).collect();
        let thr = rng.gen_range(0.1..0.9);
        if nms(&cands, thr) != reference_nms(&cands, thr) {
            return Err(format!("case {case} differs from the reference"));
        }
    }
    Ok("200 candidate sets, identical".into())
}

fn metrics_fixture() -> Outcome {
    let ap = average_precision(&[true, false, true, true], 3);
    let gt = |b: [f32; 4]| GroundTruth {
        class_id: 0,
        bbox: BBox::new(b[0], b[1], b[2], b[3]),
    };
    let truths = vec![gt([0.0, 0.0, 10.0, 10.0]), gt([20.0, 20.0, 30.0, 30.0])];
    let preds = truths
        .iter()
        .map(|t| Detection {
            class_id: 0,
            score: 0.9,
            bbox: t.bbox,
        })
        .collect();
    let r = evaluate_detections(
        &[ImageRecord {
            image_id: "a".into(),
            preds,
            truths,
        }],
        0.25,
    )
    .map_err(|e| e.to_string())?;
    check(
        (ap - 5.0 / 6.0).abs() < 1e-12 && r.map50_95 == 1.0 && r.recall == 1.0,
        format!("AP {ap:.7}, perfect image mAP {}", r.map50_95),
        format!("AP {ap} (want 0.8333333), perfect image mAP {}", r.map50_95),
    )
}

fn letterbox_roundtrip(rng: &mut ChaCha8Rng) -> Outcome {
    let mut worst = 0.0f32;
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(16..2000), rng.gen_range(16..2000));
        let lb = Letterbox::new(w, h, 640);
        let x1 = rng.gen_range(0.0..w as f32 - 1.0);
        let y1 = rng.gen_range(0.0..h as f32 - 1.0);
        let b = BBox::new(
            x1,
            y1,
            rng.gen_range(x1 + 1.0..=w as f32),
            rng.gen_range(y1 + 1.0..=h as f32),
        );
        let back = lb.inverse(&lb.forward(&b));
        for d in [back.x1 - b.x1, back.y1 - b.y1, back.x2 - b.x2, back.y2 - b.y2] {
            worst = worst.max(d.abs());
        }
    }
    check(
        worst < 0.01,
        format!("200 boxes, max drift {worst:.1e} px"),
        format!("max drift {worst} px"),
    )
}

fn budget() -> Outcome {
    let m = Model::<f32>::new(&ModelConfig::default()).map_err(|e| e.to_string())?;
    let p = count_params(&m);
    check(
        (1_350_000..1_450_000).contains(&p),
        format!("{p} parameters"),
        format!("{p} parameters, outside [1.35M, 1.45M)"),
    )
}

fn weights_roundtrip() -> Outcome {
    let m = Model::<f32>::new(&ModelConfig::toy(64, 0.25)).map_err(|e| e.to_string())?;
    let tensors = collect_tensors(&m);
    let bytes = encode_weights(&tensors, Precision::Fp32).map_err(|e| e.to_string())?;
    let back = decode_weights(&bytes).map_err(|e| e.to_string())?;
    let exact = back.len() == tensors.len()
        && back.iter().zip(&tensors).all(|(a, b)| {
            a.name == b.name && a.dims == b.dims && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let again = encode_weights(&back, Precision::Fp32).map_err(|e| e.to_string())?;
    check(
        exact && again == bytes,
        format!("{} tensors, {} bytes, bit-exact", tensors.len(), bytes.len()),
        "fp32 round trip is not bit-exact".into(),
    )
}

fn config_fixed_point() -> Outcome {
    for wm in [0.25, 0.5, 1.0] {
        let cfg = ModelConfig {
            width_mult: wm,
            base_channels: vec![16, 32, 64, 128, 256],
            ..Default::default()
        };
        let text = print_config(&cfg);
        let parsed = parse_config(&text).map_err(|e| e.to_string())?;
        if parsed != cfg || print_config(&parsed) != text {
            return Err(format!("print/parse is not a fixed point at width_mult {wm}"));
        }
    }
    Ok("3 configs".into())
}

fn toy_data() -> Outcome {
    let size = 64;
    for (i, s) in gen_dataset(7, 100, size).map_err(|e| e.to_string())?.iter().enumerate() {
        for b in &s.boxes {
            let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= size as f32 && b.y2 <= size as f32;
            let bright = (0..3).all(|c| s.image.at(0, c, b.y1 as usize, b.x1 as usize) >= BG_MAX + BLOB_MARGIN);
            if !inside || !bright || b.width() < 4.0 || b.height() < 4.0 {
                return Err(format!("sample {i} violates the blob invariants"));
            }
        }
    }
    Ok("100 samples".into())
}

/// Run every check. Never panics; failures are reported per check.
pub fn run_selftest() -> Vec<SelfCheck> {
    let rng = &mut ChaCha8Rng::seed_from_u64(42);
    let results: Vec<(&'static str, Outcome)> = vec![
        ("tensor.conv_matches_loop_nest", conv_oracle(rng)),
        ("tensor.stacked_pools_equal_wide_pool", pool_composition(rng)),
        ("autodiff.block_gradients", block_gradients()),
        ("detector.nms_matches_reference", nms_oracle(rng)),
        ("detector.letterbox_round_trip", letterbox_roundtrip(rng)),
        ("analysis.default_budget", budget()),
        ("analysis.ap_fixture", metrics_fixture()),
        ("io.weights_fp32_round_trip", weights_roundtrip()),
        ("io.config_fixed_point", config_fixed_point()),
        ("toytrain.blob_invariants", toy_data()),
    ];
    results
        .into_iter()
        .map(|(name, r)| match r {
            Ok(detail) => SelfCheck {
                name,
                passed: true,
                detail,
            },
            Err(detail) => SelfCheck {
                name,
                passed: false,
                detail,
            },
        })
        .collect()
}
