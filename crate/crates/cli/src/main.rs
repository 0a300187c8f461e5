use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use efa_core::analysis::{analyze, benchmark_latency, hardware_string};
use efa_core::io::{load_config, load_into, load_ppm, print_config, read_weights, save_ppm, write_weights, Precision};
use efa_core::toytrain::{gen_dataset, run_toy, write_loss_csv, TrainConfig};
use efa_core::verify::{check_all_blocks, CHECK_TOLERANCE};
use efa_core::{infer_image, Error, Model, ModelConfig};

#[derive(Parser)]
#[command(
    name = "efa-yolo",
    version,
    about = "EFA-YOLO detector: analysis, inference and verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and FLOP table, totals and checkpoint size.
    Analyze(AnalyzeArgs),
    /// Detect objects in a PPM image.
    Infer(InferArgs),
    /// Time single-image forward + decode + NMS.
    Bench(BenchArgs),
    /// Finite-difference check of every block's gradients.
    Gradcheck(GradcheckArgs),
    /// Train a small model on synthetic blob images.
    TrainToy(TrainToyArgs),
    /// Run the built-in property suite.
    Selftest,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to the configured input size.
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long, default_value = "fp16")]
    precision: Precision,
    /// Also write the `key = value` summary here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    conf: f32,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Graph the weights belong to; the default config otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Worker threads; all logical cores when omitted.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.25)]
    width_mult: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Receives loss.csv, weights.efw, model.cfg and sample.ppm.
    #[arg(long, default_value = "toy-out")]
    out_dir: PathBuf,
    /// Fail unless the last-20-step mean loss is at most this fraction of
    /// the first-20-step mean.
    #[arg(long, default_value_t = 0.5)]
    max_loss_ratio: f64,
    /// Fail unless held-out recall reaches this value.
    #[arg(long, default_value_t = 0.0)]
    min_recall: f64,
}

fn model_config(path: Option<&Path>) -> Result<ModelConfig> {
    Ok(match path {
        Some(p) => load_config(p)?,
        None => ModelConfig::default(),
    })
}

fn run_analyze(a: AnalyzeArgs) -> Result<()> {
    let cfg = model_config(a.config.as_deref())?;
    let model = Model::<f32>::new(&cfg)?;
    let report = analyze(&model, a.input_size.unwrap_or(cfg.input_size), a.precision)?;
    print!("{}\n{}", report.to_text(), report.to_kv());
    if let Some(out) = a.out {
        fs::write(&out, report.to_kv()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.conf) || !(0.0..=1.0).contains(&a.iou) {
        return Err(Error::Usage("--conf and --iou must lie in [0, 1]".into()).into());
    }
    let cfg = model_config(a.config.as_deref())?;
    let mut model = Model::<f32>::new(&cfg)?;
    load_into(&mut model, &read_weights(&a.weights)?)?;
    let image = load_ppm(&a.image)?;
    for d in infer_image(&model, &image, a.conf, a.iou)? {
        println!("{d}");
    }
    Ok(())
}

fn config_hash(cfg: &ModelConfig) -> String {
    Sha256::digest(print_config(cfg).as_bytes())[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let cfg = model_config(a.config.as_deref())?;
    let model = Model::<f32>::new(&cfg)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = a.threads {
        if t == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()).into());
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().context("building thread pool")?;
    let stats = pool.install(|| benchmark_latency(&model, a.warmup, a.iters))?;
    let hardware = pool.install(hardware_string);
    println!("config_hash = {}", config_hash(&cfg));
    println!("input_size = {}", cfg.input_size);
    println!("iters = {}", stats.samples_ms.len());
    println!("mean_ms = {:.3}", stats.mean_ms);
    println!("p50_ms = {:.3}", stats.p50_ms);
    println!("p95_ms = {:.3}", stats.p95_ms);
    println!("min_ms = {:.3}", stats.min_ms);
    println!("max_ms = {:.3}", stats.max_ms);
    println!("hardware = {hardware}");
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let checks = check_all_blocks(a.seed)?;
    println!("{:<8}  {:>8}  {:>13}  result", "block", "coords", "max_rel_error");
    for c in &checks {
        let verdict = if c.passed { "pass" } else { "FAIL" };
        println!(
            "{:<8}  {:>8}  {:>13.3e}  {verdict}",
            c.block, c.checked, c.max_rel_error
        );
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.block).collect();
    if !failed.is_empty() {
        bail!("gradient check above {CHECK_TOLERANCE:e} for: {}", failed.join(", "));
    }
    Ok(())
}

fn run_train_toy(a: TrainToyArgs) -> Result<()> {
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        batch: a.batch,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
    };
    let run = run_toy(a.size, a.width_mult, a.seed, &cfg)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_loss_csv(&a.out_dir.join("loss.csv"), &run.trace)?;
    write_weights(&run.model, &a.out_dir.join("weights.efw"), Precision::Fp32)?;
    let cfg_path = a.out_dir.join("model.cfg");
    fs::write(&cfg_path, print_config(&run.model.cfg)).with_context(|| format!("writing {}", cfg_path.display()))?;
    // A fresh blob image, outside both training and held-out sets.
    let sample = &gen_dataset(a.seed.wrapping_add(2), 1, a.size)?[0];
    save_ppm(&sample.to_rgb(), &a.out_dir.join("sample.ppm"))?;

    let (first, last) = (run.first_mean(20), run.last_mean(20));
    let ratio = if first > 0.0 { last / first } else { f64::NAN };
    println!("steps = {}", run.trace.len());
    println!("first20_mean_loss = {first:.4}");
    println!("last20_mean_loss = {last:.4}");
    println!("loss_ratio = {ratio:.4}");
    println!("heldout_recall = {:.4}", run.recall);
    for b in &sample.boxes {
        println!("sample_box = {:.1} {:.1} {:.1} {:.1}", b.x1, b.y1, b.x2, b.y2);
    }
    println!("out_dir = {}", a.out_dir.display());
    let mut failed = Vec::new();
    if !(ratio <= a.max_loss_ratio) {
        failed.push(format!("loss ratio {ratio:.4} > {}", a.max_loss_ratio));
    }
    if run.recall < a.min_recall {
        failed.push(format!("held-out recall {:.4} < {}", run.recall, a.min_recall));
    }
    if !failed.is_empty() {
        bail!("{}", failed.join("; "));
    }
    Ok(())
}

fn run_selftest() -> Result<()> {
    let checks = efa_core::selftest::run_selftest();
    for c in &checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {} ({})", c.name, c.detail);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if !failed.is_empty() {
        bail!("failing properties: {}", failed.join(", "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => run_analyze(a),
        Command::Infer(a) => run_infer(a),
        Command::Bench(a) => run_bench(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::TrainToy(a) => run_train_toy(a),
        Command::Selftest => run_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Usage(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
