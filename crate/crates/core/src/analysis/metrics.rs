//! Detection quality: precision, recall and COCO-style average precision.

use std::collections::HashSet;

use crate::detector::{iou, BBox, Detection};
use crate::error::{Error, Result};

/// Confidence at which precision and recall are reported.
pub const DEFAULT_PR_CONF: f32 = 0.25;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_sweep() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Predictions and labels for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub preds: Vec<Detection>,
    pub truths: Vec<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    pub num_truths: usize,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
    /// Classes with at least one ground-truth box, ascending.
    pub per_class: Vec<ClassAp>,
}

/// True/false-positive flags for the predictions of one class, in descending
/// score order (ties keep input order). Each prediction claims the unmatched
/// truth of its image with the highest IoU, if that IoU reaches `thr`.
fn match_class(images: &[ImageRecord], class_id: usize, thr: f64, min_score: f32) -> (Vec<bool>, usize) {
    let mut preds: Vec<(usize, &Detection)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| im.preds.iter().map(move |p| (i, p)))
        .filter(|(_, p)| p.class_id == class_id && p.score >= min_score)
        .collect();
    preds.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let truths: Vec<Vec<&GroundTruth>> = images
        .iter()
        .map(|im| im.truths.iter().filter(|t| t.class_id == class_id).collect())
        .collect();
    let total = truths.iter().map(Vec::len).sum();
    let mut used: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    let flags = preds
        .iter()
        .map(|(img, p)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in truths[*img].iter().enumerate() {
                if used[*img][j] {
                    continue;
                }
                let v = iou(&p.bbox, &t.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, v)) if v >= thr => {
                    used[*img][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    (flags, total)
}

/// All-points interpolated AP from ranked TP flags.
pub fn average_precision(flags: &[bool], num_truths: usize) -> f64 {
    if num_truths == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (k, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / num_truths as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope: best precision at any equal-or-higher recall.
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

pub fn evaluate_detections(images: &[ImageRecord], pr_conf: f32) -> Result<EvalResult> {
    let mut ids = HashSet::new();
    for im in images {
        if !ids.insert(im.image_id.as_str()) {
            return Err(Error::Input(format!("duplicate image id {:?}", im.image_id)));
        }
    }
    let mut classes: Vec<usize> = images
        .iter()
        .flat_map(|im| im.truths.iter().map(|t| t.class_id))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    classes.sort_unstable();

    let mut per_class = Vec::with_capacity(classes.len());
    for &c in &classes {
        let aps: Vec<f64> = iou_sweep()
            .iter()
            .map(|&thr| {
                let (flags, n) = match_class(images, c, thr, f32::NEG_INFINITY);
                average_precision(&flags, n)
            })
            .collect();
        let num_truths = images
            .iter()
            .map(|im| im.truths.iter().filter(|t| t.class_id == c).count())
            .sum();
        per_class.push(ClassAp {
            class_id: c,
            num_truths,
            ap50: aps[0],
            ap50_95: aps.iter().sum::<f64>() / aps.len() as f64,
        });
    }

    let mut pred_classes: Vec<usize> = images
        .iter()
        .flat_map(|im| im.preds.iter().map(|p| p.class_id))
        .chain(classes.iter().copied())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    pred_classes.sort_unstable();
    let (mut tp, mut npred, mut ntruth) = (0usize, 0usize, 0usize);
    for c in pred_classes {
        let (flags, n) = match_class(images, c, 0.5, pr_conf);
        tp += flags.iter().filter(|&&f| f).count();
        npred += flags.len();
        ntruth += n;
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mean = |f: fn(&ClassAp) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    Ok(EvalResult {
        precision: ratio(tp, npred),
        recall: ratio(tp, ntruth),
        map50: mean(|c| c.ap50),
        map50_95: mean(|c| c.ap50_95),
        per_class,
    })
}
