use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use crate::analysis::metrics::DEFAULT_PR_CONF;
use crate::analysis::{evaluate_detections, GroundTruth, ImageRecord};
use crate::autodiff::{BnMode, Tape};
use crate::detector::{decode_item, nms, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Scalar, Tensor};

use super::data::{gen_dataset, ToySample};
use super::loss::toy_loss;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            lr: 0.001,
            batch: 8,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Batch `k` of an epoch-free cyclic walk over `data`.
fn batch_at(data: &[ToySample], step: usize, batch: usize) -> Result<(Tensor, Vec<&ToySample>)> {
    let items: Vec<&ToySample> = (0..batch).map(|k| &data[(step * batch + k) % data.len()]).collect();
    let imgs: Vec<&Tensor> = items.iter().map(|s| &s.image).collect();
    Ok((Tensor::stack_batch(&imgs)?, items))
}

/// Summed toy loss of one batch and the gradient of every parameter, with
/// batch norm normalizing by the batch's own statistics.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    images: &Tensor<T>,
    samples: &[&ToySample],
) -> Result<(f64, HashMap<String, Tensor<T>>)> {
    let mut tape = Tape::new(BnMode::Batch);
    let x = tape.leaf(images.clone());
    let levels = model.forward_with(&mut tape, &x)?;
    let values: [Tensor<T>; 3] = std::array::from_fn(|l| tape.value(levels[l]).clone());
    let mut total = 0.0;
    let mut partials: [Tensor<T>; 3] = std::array::from_fn(|l| Tensor::zeros(values[l].shape()));
    for (n, s) in samples.iter().enumerate() {
        let (v, g) = toy_loss(&values, n, &s.boxes)?;
        total += v;
        for l in 0..3 {
            partials[l]
                .data_mut()
                .iter_mut()
                .zip(g[l].data())
                .for_each(|(a, &b)| *a += b);
        }
    }
    let loss = tape.custom_scalar(&levels, T::lit(total), partials.into())?;
    let grads = tape.backward(loss)?;
    let mut out = HashMap::new();
    for name in tape.param_names() {
        let v = tape.param_var(name).expect("listed parameter");
        let g = grads
            .wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
        if !g.all_finite() {
            return Err(Error::Numeric {
                location: format!("gradient of {name}"),
            });
        }
        out.insert(name.clone(), g);
    }
    Ok((total, out))
}

/// SGD on the summed batch loss. Returns the loss of every step.
///
/// Batch norm runs on batch statistics throughout; call [`calibrate_bn`]
/// afterwards before evaluating in inference mode.
pub fn train(model: &mut Model, data: &[ToySample], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut velocity: HashMap<String, Vec<f32>> = HashMap::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (images, items) = batch_at(data, step, cfg.batch)?;
        let (loss, grads) = match loss_and_grads(model, &images, &items) {
            Ok(r) => r,
            Err(Error::Numeric { location }) => {
                return Err(Error::Numeric {
                    location: format!("training step {step}: {location}"),
                })
            }
            Err(e) => return Err(e),
        };
        trace.push(loss);
        let (lr, mu, wd) = (cfg.lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
        model.visit_params_mut("", &mut |name, _, w| {
            let Some(g) = grads.get(name) else { return };
            let vel = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; w.len()]);
            for ((p, &g), v) in w.iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                let d = g + wd * *p;
                *v = mu * *v + d;
                *p -= lr * *v;
            }
        });
    }
    Ok(trace)
}

/// Set every batch norm's stored statistics to the pooled statistics of
/// `batches` equal-size batches of `data`, then fold them into
/// `gamma`/`beta`. The pooled variance keeps the spread of the batch means,
/// which a plain average of batch variances would drop.
pub fn calibrate_bn(model: &mut Model, data: &[ToySample], batch: usize, batches: usize) -> Result<()> {
    if data.is_empty() || batch == 0 || batches == 0 {
        return Err(Error::Input(
            "calibration needs data, batch >= 1 and batches >= 1".into(),
        ));
    }
    let mut sums: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for b in 0..batches {
        let (images, _) = batch_at(data, b, batch)?;
        let mut tape = Tape::new(BnMode::Batch);
        let x = tape.leaf(images);
        model.forward_with(&mut tape, &x)?;
        for st in tape.batch_stats() {
            let e = sums
                .entry(st.name.clone())
                .or_insert_with(|| (vec![0.0; st.mean.len()], vec![0.0; st.var.len()]));
            e.0.iter_mut().zip(&st.mean).for_each(|(a, &m)| *a += m as f64);
            e.1.iter_mut()
                .zip(st.var.iter().zip(&st.mean))
                .for_each(|(a, (&v, &m))| *a += v as f64 + (m as f64).powi(2));
        }
    }
    for (name, bn) in model.batchnorms_mut() {
        let Some((m, v)) = sums.get(&name) else {
            return Err(Error::Input(format!("no batch statistics recorded for {name}")));
        };
        let k = batches as f64;
        bn.mean = m.iter().map(|x| (x / k) as f32).collect();
        bn.var = v
            .iter()
            .zip(m)
            .map(|(q, x)| (q / k - (x / k).powi(2)).max(0.0) as f32)
            .collect();
        bn.bake_statistics();
    }
    Ok(())
}

/// Fraction of ground-truth blobs matched at IoU 0.5 by detections with
/// score ≥ `conf` after NMS at 0.5.
pub fn blob_recall(model: &Model, data: &[ToySample], conf: f32) -> Result<f64> {
    let mut records = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let raw = model.forward(&s.image)?;
        records.push(ImageRecord {
            image_id: i.to_string(),
            preds: nms(&decode_item(&raw, 0, conf), 0.5),
            truths: s.boxes.iter().map(|&bbox| GroundTruth { class_id: 0, bbox }).collect(),
        });
    }
    Ok(evaluate_detections(&records, conf)?.recall)
}

/// Held-out images scored after a toy run.
pub const HELD_OUT: usize = 100;
/// Batches pooled for batch norm calibration after training.
pub const CALIBRATION_BATCHES: usize = 50;

/// A trained toy model with its loss trace and held-out blob recall.
pub struct ToyRun {
    pub model: Model,
    pub trace: Vec<f64>,
    pub recall: f64,
}

impl ToyRun {
    /// Mean loss over the first `k` steps.
    pub fn first_mean(&self, k: usize) -> f64 {
        let w = &self.trace[..k.min(self.trace.len())];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }

    /// Mean loss over the last `k` steps.
    pub fn last_mean(&self, k: usize) -> f64 {
        let w = &self.trace[self.trace.len().saturating_sub(k)..];
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

/// Train a one-class model from seed `seed` on `steps * batch` fresh blob
/// images, calibrate and bake its batch norms, then measure recall on
/// [`HELD_OUT`] images drawn from a different seed.
pub fn run_toy(size: usize, width_mult: f64, seed: u64, cfg: &TrainConfig) -> Result<ToyRun> {
    cfg.validate()?;
    let mut model = Model::new(&ModelConfig {
        seed,
        ..ModelConfig::toy(size, width_mult)
    })?;
    let data = gen_dataset(seed, (cfg.steps * cfg.batch).max(cfg.batch), size)?;
    let held = gen_dataset(seed.wrapping_add(1), HELD_OUT, size)?;
    let trace = train(&mut model, &data, cfg)?;
    calibrate_bn(&mut model, &data, cfg.batch, CALIBRATION_BATCHES)?;
    let recall = blob_recall(&model, &held, DEFAULT_PR_CONF)?;
    Ok(ToyRun { model, trace, recall })
}

/// `step,loss` lines with a header.
pub fn write_loss_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{l}\n"));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
