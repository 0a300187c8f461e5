use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{decode_item, nms, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub hardware: String,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: Vec<f64>, hardware: String) -> Self {
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        // Nearest-rank percentile.
        let pct = |p: f64| {
            let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
            sorted[rank.clamp(1, sorted.len()) - 1]
        };
        LatencyStats {
            mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50_ms: pct(50.0),
            p95_ms: pct(95.0),
            min_ms: sorted[0],
            max_ms: sorted[sorted.len() - 1],
            samples_ms,
            hardware,
        }
    }
}

/// CPU model, logical core count, OS and architecture.
pub fn hardware_string() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}, {cores} logical cores, {}/{}, {} rayon threads",
        std::env::consts::OS,
        std::env::consts::ARCH,
        rayon::current_num_threads()
    )
}

/// Wall-clock time of single-image forward + decode + NMS, after `warmup`
/// untimed runs. Runs on whatever rayon pool the caller installs.
pub fn benchmark_latency(model: &Model, warmup: usize, iters: usize) -> Result<LatencyStats> {
    if iters == 0 {
        return Err(Error::Usage("benchmark needs at least one timed iteration".into()));
    }
    let s = model.cfg.input_size;
    let x = Tensor::<f32>::random_uniform([1, 3, s, s], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let run = || -> Result<usize> {
        let raw = model.forward(&x)?;
        Ok(nms(&decode_item(&raw, 0, 0.25), 0.5).len())
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        std::hint::black_box(run()?);
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyStats::from_samples(samples, hardware_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_sample_stats() {
        let s = LatencyStats::from_samples(vec![3.0], String::new());
        assert_eq!((s.mean_ms, s.p50_ms, s.p95_ms), (3.0, 3.0, 3.0));
    }

    #[test]
    fn stats_lie_within_range() {
        let s = LatencyStats::from_samples(vec![5.0, 1.0, 2.0, 9.0, 4.0], String::new());
        assert!(s.min_ms <= s.mean_ms && s.mean_ms <= s.max_ms);
        assert_eq!(s.p50_ms, 4.0);
        assert_eq!(s.p95_ms, 9.0);
    }
}
