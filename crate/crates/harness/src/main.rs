//! Command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use segbound::config::RunConfig;
use segbound::gap::{gap_step, PrototypeBank};
use segbound::has::{simulate, ScheduleKind, ScheduleState, SimulationSpec, TraceRow};
use segbound::morphology::{
    downsample_mask, extract_boundary, granularity_bands, SemanticMask, IGNORE_LABEL,
};
use segbound::npy::{self, NpyArray};
use segbound::rng::RngStream;
use segbound::tensor::Tensor;
use segbound::ube::{
    entropy_map, softmax_probs, strategy_loss, ube_weights, weighted_ce, StrategySpec,
};

use segbound_harness::dataset::{write_dataset, GenOptions};
use segbound_harness::gradcheck;
use segbound_harness::train::{
    motivation_to_csv, reproduce_motivation, train_dir, TrainOptions,
};

#[derive(Parser)]
#[command(
    name = "segbound",
    about = "Boundary-aware segmentation training signals: data generation, training, and per-module tools",
    version
)]
struct Cli {
    /// JSON run configuration; missing keys take the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic misaligned dataset.
    GenData(GenDataArgs),
    /// Train the toy model with the full loss on a dataset directory.
    Train(TrainArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck,
    /// Train one model per boundary strategy and compare error rates.
    ReproduceMotivation(MotivationArgs),
    /// Extract a boundary band (or granularity bands) from a mask.
    Boundary(BoundaryArgs),
    /// Compute entropy-adaptive boundary weights for a logits map.
    UbeWeights(UbeWeightsArgs),
    /// Evaluate a boundary-strategy loss; prints JSON to stdout.
    Loss(LossArgs),
    /// Run one contrastive step against a prototype bank.
    GapStep(GapStepArgs),
    /// Simulate the hardness-aware sampling loop to a trace CSV.
    HasSim(HasSimArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Maximum per-shape mask shift in pixels.
    #[arg(long, default_value_t = 2)]
    jitter: i64,
    /// Per-pixel color noise amplitude.
    #[arg(long, default_value_t = 0.04)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: u64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
}

#[derive(Args)]
struct MotivationArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    iters: u64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
}

#[derive(Args)]
struct BoundaryArgs {
    /// Integer class-ID mask (NPY).
    #[arg(long)]
    mask: PathBuf,
    /// Dilation kernel.
    #[arg(long, default_value_t = 3)]
    kd: usize,
    /// Erosion kernel.
    #[arg(long, default_value_t = 3)]
    ke: usize,
    /// Three kernel sizes `k1,k2,k3`; switches output to granularity bands.
    #[arg(long, value_parser = parse_kernels)]
    granularities: Option<[usize; 3]>,
    /// Downsampling stride applied before the granularity bands.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UbeWeightsArgs {
    /// Logits map `[H, W, C]` (NPY float).
    #[arg(long)]
    logits: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 3)]
    kd: usize,
    #[arg(long, default_value_t = 3)]
    ke: usize,
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long, value_parser = ["enhance", "ignore", "threshold", "reduce", "ube"])]
    strategy: String,
    #[arg(long)]
    logits: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 3)]
    kd: usize,
    #[arg(long, default_value_t = 3)]
    ke: usize,
    /// Enhance weight, or amplification for the adaptive strategy.
    #[arg(long)]
    alpha: Option<f64>,
    /// Threshold-strategy cutoff.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Threshold-strategy excess scale.
    #[arg(long, default_value_t = 0.1)]
    a: f64,
    /// Reduce-strategy boundary weight.
    #[arg(long, default_value_t = 0.3)]
    gamma: f64,
}

#[derive(Args)]
struct GapStepArgs {
    /// Feature map `[H_f, W_f, D]` (NPY float).
    #[arg(long)]
    features: PathBuf,
    /// Class-ID mask at full or feature resolution.
    #[arg(long)]
    mask: PathBuf,
    /// Bank directory (prototypes.npy, frequencies.npy, bank.json).
    /// A fresh bank is initialized from the config when absent.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[arg(long)]
    out_bank: PathBuf,
}

#[derive(Args)]
struct HasSimArgs {
    #[arg(long, default_value = "sigmoid", value_parser = ["sigmoid", "linear", "none"])]
    schedule: String,
    #[arg(long, default_value_t = 0.05)]
    k: f64,
    #[arg(long, default_value_t = 100)]
    images: usize,
    #[arg(long, default_value_t = 2000)]
    iters: u64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 0.9)]
    beta: f64,
    #[arg(long, default_value_t = 50)]
    ema_period: u64,
    /// Defaults to half the iteration count.
    #[arg(long)]
    midpoint: Option<u64>,
    /// Fraction of images given tenfold loss in the synthetic loss model.
    #[arg(long, default_value_t = 0.2)]
    hard_fraction: f64,
    /// Loss multiplier of the hard population.
    #[arg(long, default_value_t = 10.0)]
    hard_factor: f64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_kernels(text: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated kernel sizes".into());
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad kernel '{p}'"))?;
    }
    Ok(out)
}

fn load_run_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn load_float_map(path: &Path, ndim: usize, what: &str) -> anyhow::Result<Tensor<f64>> {
    let arr = npy::read_tensor(path).with_context(|| format!("reading {}", path.display()))?;
    let tensor = match arr {
        NpyArray::F64(t) => t,
        NpyArray::F32(t) => t.to_f64(),
        other => bail!("{what} must be a float array, found dtype {}", other.dtype()),
    };
    if tensor.ndim() != ndim {
        bail!("{what} must have {ndim} dimensions, got {:?}", tensor.shape());
    }
    Ok(tensor)
}

fn load_mask(path: &Path, num_classes: Option<usize>) -> anyhow::Result<SemanticMask> {
    let grid = npy::read_tensor(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_i32()?;
    if grid.ndim() != 2 {
        bail!("mask must be 2-D, got {:?}", grid.shape());
    }
    let classes = match num_classes {
        Some(c) => c,
        None => grid
            .data()
            .iter()
            .filter(|&&v| v != IGNORE_LABEL)
            .max()
            .map_or(1, |&m| m as usize + 1),
    };
    Ok(SemanticMask::new(grid, classes)?)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let config = load_run_config(&cli)?;

    match &cli.command {
        Command::GenData(args) => {
            let opts = GenOptions {
                n_scenes: args.scenes,
                height: args.height,
                width: args.width,
                num_classes: args.classes,
                jitter: args.jitter,
                seed: config.seed,
                pixel_noise: args.noise,
            };
            let meta = write_dataset(&opts, &args.out)?;
            println!(
                "{}",
                serde_json::json!({
                    "scenes": meta.scenes.len(),
                    "height": meta.height,
                    "width": meta.width,
                    "num_classes": meta.num_classes,
                    "jitter": meta.jitter,
                    "out": args.out,
                })
            );
        }
        Command::Train(args) => {
            let mut opts = TrainOptions::new(&config);
            opts.n_iters = args.iters;
            opts.lr = args.lr;
            let output = train_dir(&config, &opts, &args.data, &args.out)?;
            println!("{}", serde_json::to_string_pretty(&output.summary)?);
        }
        Command::Gradcheck => {
            let report = gradcheck::gradcheck(&config, config.seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed {
                bail!(
                    "gradient check failed: max relative error {} > {}",
                    report.max_rel_error,
                    report.tolerance
                );
            }
        }
        Command::ReproduceMotivation(args) => {
            let (_, scenes) = segbound_harness::dataset::load_dataset(&args.data)?;
            let rows = reproduce_motivation(&config, &scenes, args.iters, args.lr)?;
            fs::create_dir_all(&args.out)?;
            fs::write(args.out.join("strategies.csv"), motivation_to_csv(&rows))?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
        Command::Boundary(args) => {
            let mask = load_mask(&args.mask, None)?;
            match args.granularities {
                Some(kernels) => {
                    let down = downsample_mask(&mask, args.stride)?;
                    let bands = granularity_bands(&down, kernels)?;
                    npy::write_tensor(&args.out, &bands.bands)?;
                }
                None => {
                    let band = extract_boundary(&mask, args.kd, args.ke)?;
                    npy::write_tensor(&args.out, &band)?;
                }
            }
        }
        Command::UbeWeights(args) => {
            let logits = load_float_map(&args.logits, 3, "logits")?;
            let mask = load_mask(&args.mask, Some(logits.shape()[2]))?;
            let boundary = extract_boundary(&mask, args.kd, args.ke)?;
            let probs = softmax_probs(&logits)?;
            let entropy = entropy_map(&probs)?;
            let wm = ube_weights(&entropy, &boundary, args.alpha)?;
            npy::write_tensor(&args.out, &wm.values)?;
            println!(
                "{}",
                serde_json::json!({
                    "alpha": wm.alpha,
                    "mu_entropy": wm.mu_entropy,
                    "sigma_entropy": wm.sigma_entropy,
                    "boundary_pixels": boundary.data().iter().filter(|&&b| b == 1).count(),
                })
            );
        }
        Command::Loss(args) => {
            let logits = load_float_map(&args.logits, 3, "logits")?;
            let mask = load_mask(&args.mask, Some(logits.shape()[2]))?;
            let boundary = extract_boundary(&mask, args.kd, args.ke)?;
            let spec = match args.strategy.as_str() {
                "enhance" => StrategySpec::Enhance {
                    alpha: args.alpha.unwrap_or(5.0),
                },
                "ignore" => StrategySpec::Ignore,
                "threshold" => StrategySpec::Threshold {
                    tau: args.tau,
                    a: args.a,
                },
                "reduce" => StrategySpec::Reduce { gamma: args.gamma },
                "ube" => StrategySpec::Ube {
                    alpha: args.alpha.unwrap_or(config.alpha_ube),
                },
                other => bail!("unknown strategy '{other}'"),
            };
            let loss = strategy_loss(&logits, &mask, &boundary, &spec)?;
            let unit = Tensor::filled(boundary.shape().to_vec(), 1.0);
            let (plain_ce, _) = weighted_ce(&logits, &mask, &unit)?;
            println!(
                "{}",
                serde_json::json!({
                    "strategy": args.strategy,
                    "loss": loss,
                    "plain_ce": plain_ce,
                    "boundary_pixels": boundary.data().iter().filter(|&&b| b == 1).count(),
                })
            );
        }
        Command::GapStep(args) => {
            let features = load_float_map(&args.features, 3, "features")?;
            let (hf, wf, dim) = (
                features.shape()[0],
                features.shape()[1],
                features.shape()[2],
            );
            let mut bank = match &args.bank {
                Some(dir) => PrototypeBank::load(dir)
                    .with_context(|| format!("loading bank {}", dir.display()))?,
                None => {
                    let mut rng = RngStream::new(config.seed);
                    PrototypeBank::init(config.num_classes, dim, config.momentum, &mut rng)?
                }
            };
            if bank.dim() != dim {
                bail!("bank dim {} does not match features dim {dim}", bank.dim());
            }
            let mask = load_mask(&args.mask, Some(bank.num_classes()))?;
            if mask.height() % hf != 0 || mask.width() % wf != 0 {
                bail!(
                    "mask {}x{} is not an integer multiple of the {}x{} feature grid",
                    mask.height(),
                    mask.width(),
                    hf,
                    wf
                );
            }
            let stride = mask.height() / hf;
            if mask.width() / wf != stride {
                bail!("mask and feature grid imply different strides per axis");
            }
            let down = downsample_mask(&mask, stride)?;
            let bands = granularity_bands(&down, config.granularity_kernels)?;
            let step = gap_step(&mut bank, &features, &bands, &down, args.tau)?;
            bank.save(&args.out_bank)?;
            println!(
                "{}",
                serde_json::json!({
                    "loss": step.loss,
                    "n_features": step.num_features,
                    "updates_applied": step.update.applied,
                    "skipped_zero_norm": step.update.skipped_zero_norm,
                })
            );
        }
        Command::HasSim(args) => {
            let kind = match args.schedule.as_str() {
                "sigmoid" => ScheduleKind::Sigmoid,
                "linear" => ScheduleKind::Linear,
                "none" => ScheduleKind::None,
                other => bail!("unknown schedule '{other}'"),
            };
            let schedule = ScheduleState::new(
                kind,
                args.k,
                args.midpoint.unwrap_or(args.iters / 2),
                args.iters,
            )?;
            let spec = SimulationSpec {
                n_images: args.images,
                n_iters: args.iters,
                tau: args.tau,
                beta: args.beta,
                ema_period: args.ema_period,
                seed: config.seed,
            };
            let hard_count = ((args.images as f64) * args.hard_fraction).round() as usize;
            let hard_factor = args.hard_factor;
            // two-population loss model with a mild decay over time
            let loss_model = move |image: usize, t: u64| -> f64 {
                let base = if image < hard_count { hard_factor } else { 1.0 };
                base / (1.0 + t as f64 / 1000.0)
            };
            let trace = simulate(&schedule, &spec, loss_model)?;
            let mut csv = String::with_capacity(trace.len() * 24);
            csv.push_str(TraceRow::CSV_HEADER);
            csv.push('\n');
            for row in &trace {
                csv.push_str(&row.to_csv_row());
                csv.push('\n');
            }
            if let Some(parent) = args.out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(&args.out, csv)?;
            let hardness = trace
                .iter()
                .filter(|r| r.mode == segbound::has::SampleMode::Hardness)
                .count();
            println!(
                "{}",
                serde_json::json!({
                    "iters": trace.len(),
                    "hardness_draws": hardness,
                    "random_draws": trace.len() - hardness,
                    "out": args.out,
                })
            );
        }
    }
    Ok(())
}
