//! Efficiency accounting (parameters, FLOPs, checkpoint size), latency
//! measurement and detection metrics.

mod counter;
mod latency;
pub mod metrics;

use std::fmt::Write as _;

pub use counter::{Counter, LayerRow};
pub use latency::{benchmark_latency, hardware_string, LatencyStats};
pub use metrics::{evaluate_detections, ClassAp, EvalResult, GroundTruth, ImageRecord};

use crate::detector::Model;
use crate::error::Result;
use crate::io::weights::{encoded_len, Precision};
use crate::nn::Module;
use crate::tensor::{Scalar, Shape};

/// Published reference figures the report is compared against. Context only;
/// nothing is asserted on the latency.
pub mod reference {
    pub const PARAMS_M: f64 = 1.4;
    pub const GFLOPS: f64 = 4.6;
    pub const SIZE_MB: f64 = 3.3;
    pub const LATENCY_MS: f64 = 22.19;
    pub const BASELINE_LATENCY_MS: f64 = 123.38;
    pub const CLAIMED_SPEEDUP: f64 = 88.0;
}

/// Per-layer rows from a shape-only pass at `input_size`.
pub fn layer_rows<T: Scalar>(model: &Model<T>, input_size: usize) -> Result<Vec<LayerRow>> {
    let mut c = Counter::new();
    model.forward_with(&mut c, &Shape::new(1, 3, input_size, input_size))?;
    Ok(c.into_rows())
}

pub fn count_params<T: Scalar>(model: &Model<T>) -> usize {
    model.num_params()
}

pub fn count_flops<T: Scalar>(model: &Model<T>, input_size: usize) -> Result<u64> {
    Ok(layer_rows(model, input_size)?.iter().map(|r| r.flops).sum())
}

/// Bytes of the checkpoint [`crate::io::weights::write_weights`] would emit.
pub fn model_size_bytes(model: &Model, precision: Precision) -> usize {
    encoded_len(model, precision)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub input_size: usize,
    pub precision: Precision,
    pub rows: Vec<LayerRow>,
    pub total_params: usize,
    pub total_flops: u64,
    pub size_bytes: usize,
}

impl AnalysisReport {
    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    /// Megabytes of 10^6 bytes.
    pub fn size_mb(&self) -> f64 {
        self.size_bytes as f64 / 1e6
    }

    /// Aligned layer table followed by totals.
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<w$}  {:>10}  {:>14}  {:>16}",
            "layer", "params", "flops", "out_shape"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>10}  {:>14}  {:>16}",
                r.name,
                r.params,
                r.flops,
                r.out_shape.to_string()
            );
        }
        let _ = writeln!(
            s,
            "{:<w$}  {:>10}  {:>14}",
            "total", self.total_params, self.total_flops
        );
        s
    }

    /// `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("input_size", self.input_size.to_string());
        kv("params", self.total_params.to_string());
        kv("params_m", format!("{:.1}", self.params_m()));
        kv("flops", self.total_flops.to_string());
        kv("gflops", format!("{:.2}", self.gflops()));
        kv("precision", self.precision.to_string());
        kv("size_bytes", self.size_bytes.to_string());
        kv("size_mb", format!("{:.2}", self.size_mb()));
        kv("reference_params_m", reference::PARAMS_M.to_string());
        kv("reference_gflops", reference::GFLOPS.to_string());
        kv("reference_size_mb", reference::SIZE_MB.to_string());
        kv(
            "reference_latency_ms",
            format!(
                "{} (hardware-bound, not comparable, never asserted)",
                reference::LATENCY_MS
            ),
        );
        kv(
            "reference_speedup_note",
            format!(
                "claimed {}x speedup is unverifiable: reference latencies {} ms -> {} ms give {:.2}x",
                reference::CLAIMED_SPEEDUP,
                reference::BASELINE_LATENCY_MS,
                reference::LATENCY_MS,
                reference::BASELINE_LATENCY_MS / reference::LATENCY_MS
            ),
        );
        s
    }
}

pub fn analyze(model: &Model, input_size: usize, precision: Precision) -> Result<AnalysisReport> {
    let rows = layer_rows(model, input_size)?;
    Ok(AnalysisReport {
        input_size,
        precision,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_flops: rows.iter().map(|r| r.flops).sum(),
        size_bytes: model_size_bytes(model, precision),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ModelConfig;

    #[test]
    fn totals_equal_row_sums_and_module_count() {
        let m = Model::<f32>::new(&ModelConfig {
            input_size: 128,
            width_mult: 0.25,
            ..Default::default()
        })
        .unwrap();
        let r = analyze(&m, 128, Precision::Fp16).unwrap();
        assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<usize>());
        assert_eq!(r.total_params, m.num_params());
        assert_eq!(r.rows.last().unwrap().out_shape, Shape::new(1, 6, 4, 4));
        assert!(r.to_kv().contains("params_m = "));
    }
}
