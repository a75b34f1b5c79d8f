//! The desk-scale training loop.
//!
//! Per iteration: hardness-aware draw, forward pass, boundary extraction on
//! the (jittered) training mask, entropy-weighted or strategy cross-entropy
//! with logit gradients, a prototype-contrastive step on boundary features,
//! manual backprop through the shared hidden layer, one SGD step, and a
//! hardness record. Error rates are measured against the pixel-aligned true
//! mask, split by its own boundary band, so the metrics track genuine
//! boundary difficulty rather than label jitter.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use segbound::config::RunConfig;
use segbound::gap::{gap_step, PrototypeBank};
use segbound::has::{draw, HardnessTable, SampleMode, ScheduleState};
use segbound::morphology::{
    downsample_mask, extract_boundary, granularity_bands, BoundaryBands, SemanticMask,
    IGNORE_LABEL,
};
use segbound::rng::RngStream;
use segbound::tensor::Tensor;
use segbound::ube::{
    entropy_map, softmax_probs, strategy_grad_logits, ube_grad_logits, ube_weights, weighted_ce,
    StrategySpec,
};

use crate::dataset::SyntheticScene;
use crate::error::{HarnessError, Result};
use crate::model::{ModelShape, ToyModel};

/// Which per-pixel loss supervises the logits head.
#[derive(Clone, Copy, Debug)]
pub enum Supervision {
    /// Entropy-adaptive boundary weighting; `alpha = 0` reduces to plain
    /// cross-entropy exactly.
    Ube { alpha: f64 },
    /// One of the fixed boundary strategies.
    Strategy(StrategySpec),
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub n_iters: u64,
    pub lr: f64,
    pub supervision: Supervision,
    /// Kernel of the supervision boundary band (dilation and erosion).
    pub boundary_kernel: usize,
    pub patch_radius: usize,
    pub hidden_dim: usize,
    pub stride: usize,
}

impl TrainOptions {
    /// Desk-scale defaults with the supervision taken from the config.
    /// The learning rate keeps a 2000-iteration run in the regime where
    /// boundaries are still being learned; larger steps race the model into
    /// fitting the label jitter instead.
    pub fn new(config: &RunConfig) -> Self {
        TrainOptions {
            n_iters: 2000,
            lr: 0.01,
            supervision: Supervision::Ube {
                alpha: config.alpha_ube,
            },
            boundary_kernel: 3,
            patch_radius: 1,
            hidden_dim: 16,
            stride: 4,
        }
    }
}

/// One line of the metrics CSV.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss_total: f64,
    pub loss_ube: f64,
    pub loss_gap: f64,
    pub boundary_error_rate: f64,
    pub interior_error_rate: f64,
    pub sampling_mode: SampleMode,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "iter,loss_total,loss_ube,loss_gap,boundary_error_rate,interior_error_rate,sampling_mode";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            self.loss_total,
            self.loss_ube,
            self.loss_gap,
            self.boundary_error_rate,
            self.interior_error_rate,
            self.sampling_mode.as_str()
        )
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 64);
    out.push_str(MetricsRow::CSV_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.to_csv_row());
    }
    out
}

/// Integer error accounting over one or more scenes.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub boundary_errors: usize,
    pub boundary_pixels: usize,
    pub interior_errors: usize,
    pub interior_pixels: usize,
}

impl ErrorCounts {
    pub fn boundary_rate(&self) -> f64 {
        if self.boundary_pixels == 0 {
            0.0
        } else {
            self.boundary_errors as f64 / self.boundary_pixels as f64
        }
    }

    pub fn interior_rate(&self) -> f64 {
        if self.interior_pixels == 0 {
            0.0
        } else {
            self.interior_errors as f64 / self.interior_pixels as f64
        }
    }

    pub fn total_errors(&self) -> usize {
        self.boundary_errors + self.interior_errors
    }

    fn add(&mut self, other: &ErrorCounts) {
        self.boundary_errors += other.boundary_errors;
        self.boundary_pixels += other.boundary_pixels;
        self.interior_errors += other.interior_errors;
        self.interior_pixels += other.interior_pixels;
    }
}

/// Argmax class per pixel.
pub fn predictions(logits: &Tensor<f64>) -> Tensor<i32> {
    let (h, w, _) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let mut out = Tensor::filled(vec![h, w], 0i32);
    for y in 0..h {
        for x in 0..w {
            let row = logits.row3(y, x);
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            out.set2(y, x, best as i32);
        }
    }
    out
}

/// Splits prediction errors against the true mask by its boundary band.
/// True-mask ignore pixels (absent in generated data) count in neither
/// bucket.
pub fn error_counts(
    pred: &Tensor<i32>,
    true_mask: &SemanticMask,
    true_boundary: &Tensor<u8>,
) -> ErrorCounts {
    let mut counts = ErrorCounts::default();
    for (i, (&p, &t)) in pred
        .data()
        .iter()
        .zip(true_mask.grid().data())
        .enumerate()
    {
        if t == IGNORE_LABEL {
            continue;
        }
        let wrong = p != t;
        if true_boundary.data()[i] == 1 {
            counts.boundary_pixels += 1;
            counts.boundary_errors += usize::from(wrong);
        } else {
            counts.interior_pixels += 1;
            counts.interior_errors += usize::from(wrong);
        }
    }
    counts
}

/// Whole-dataset evaluation against the true masks.
pub fn evaluate(
    model: &ToyModel,
    scenes: &[SyntheticScene],
    boundary_kernel: usize,
) -> Result<ErrorCounts> {
    let mut total = ErrorCounts::default();
    for scene in scenes {
        let fwd = model.forward(&scene.image)?;
        let pred = predictions(&fwd.logits);
        let band = extract_boundary(&scene.true_mask, boundary_kernel, boundary_kernel)?;
        total.add(&error_counts(&pred, &scene.true_mask, &band));
    }
    Ok(total)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub n_iters: u64,
    pub final_loss_total: f64,
    pub final_loss_ube: f64,
    pub final_loss_gap: f64,
    /// Final whole-dataset error rates against the true masks.
    pub boundary_error_rate: f64,
    pub interior_error_rate: f64,
    pub counts: ErrorCounts,
    pub random_draws: u64,
    pub hardness_draws: u64,
}

pub struct TrainOutput {
    pub metrics: Vec<MetricsRow>,
    pub summary: TrainSummary,
    pub model: ToyModel,
    pub bank: PrototypeBank,
}

struct ScenePrep {
    supervision_boundary: Tensor<u8>,
    feature_mask: SemanticMask,
    bands: BoundaryBands,
    true_boundary: Tensor<u8>,
}

/// Runs the full loop over in-memory scenes.
pub fn train_scenes(
    config: &RunConfig,
    opts: &TrainOptions,
    scenes: &[SyntheticScene],
) -> Result<TrainOutput> {
    config.validate().map_err(HarnessError::Core)?;
    if scenes.is_empty() {
        return Err(HarnessError::Dataset("no scenes to train on".into()));
    }
    if let Supervision::Strategy(spec) = &opts.supervision {
        spec.validate().map_err(HarnessError::Core)?;
    }
    let num_classes = scenes[0].true_mask.num_classes();

    let mut rng = RngStream::new(config.seed);
    let model_shape = ModelShape {
        patch_radius: opts.patch_radius,
        hidden_dim: opts.hidden_dim,
        feature_dim: config.feature_dim,
        num_classes,
        stride: opts.stride,
    };
    let mut model = ToyModel::init(model_shape, &mut rng)?;
    let mut bank = PrototypeBank::init(num_classes, config.feature_dim, config.momentum, &mut rng)?;
    let mut table = HardnessTable::new(scenes.len(), config.beta_has, config.ema_period)?;
    let schedule = ScheduleState::new(
        config.schedule,
        config.k_has,
        config.midpoint_has.unwrap_or(opts.n_iters / 2),
        opts.n_iters,
    )?;

    let preps: Vec<ScenePrep> = scenes
        .iter()
        .map(|scene| -> Result<ScenePrep> {
            let supervision_boundary = extract_boundary(
                &scene.train_mask,
                opts.boundary_kernel,
                opts.boundary_kernel,
            )?;
            let feature_mask = downsample_mask(&scene.train_mask, opts.stride)?;
            let bands = granularity_bands(&feature_mask, config.granularity_kernels)?;
            let true_boundary = extract_boundary(&scene.true_mask, 3, 3)?;
            Ok(ScenePrep {
                supervision_boundary,
                feature_mask,
                bands,
                true_boundary,
            })
        })
        .collect::<Result<_>>()?;

    let mut metrics = Vec::with_capacity(opts.n_iters as usize);
    let mut random_draws = 0u64;
    let mut hardness_draws = 0u64;
    let feature_grid = [
        scenes[0].image.shape()[0] / opts.stride,
        scenes[0].image.shape()[1] / opts.stride,
        config.feature_dim,
    ];

    for t in 0..opts.n_iters {
        let (scene_id, mode) = draw(&table, &schedule, config.tau_has, t, &mut rng)
            .map_err(HarnessError::Core)?;
        match mode {
            SampleMode::Random => random_draws += 1,
            SampleMode::Hardness => hardness_draws += 1,
        }
        let scene = &scenes[scene_id];
        let prep = &preps[scene_id];

        let fwd = model.forward(&scene.image)?;

        let (loss_ube, grad_logits) = match opts.supervision {
            Supervision::Ube { alpha } => {
                let probs = softmax_probs(&fwd.logits)?;
                let entropy = entropy_map(&probs)?;
                let wm = ube_weights(&entropy, &prep.supervision_boundary, alpha)?;
                let (loss, _) = weighted_ce(&fwd.logits, &scene.train_mask, &wm.values)?;
                let grad = ube_grad_logits(&fwd.logits, &scene.train_mask, &wm.values)?;
                (loss, grad)
            }
            Supervision::Strategy(spec) => strategy_grad_logits(
                &fwd.logits,
                &scene.train_mask,
                &prep.supervision_boundary,
                &spec,
            )?,
        };

        // the contrastive term is skipped entirely when its weight is zero,
        // so baseline runs never touch the bank
        let (loss_gap, grad_features) = if config.lambda_gap > 0.0 {
            let step = gap_step(
                &mut bank,
                &fwd.features,
                &prep.bands,
                &prep.feature_mask,
                config.tau_gap,
            )?;
            let mut grad = step.grad_map;
            for g in grad.data_mut() {
                *g *= config.lambda_gap;
            }
            (step.loss, grad)
        } else {
            (0.0, Tensor::zeros(feature_grid.to_vec()))
        };

        let loss_total = loss_ube + config.lambda_gap * loss_gap;
        if !loss_total.is_finite() {
            return Err(HarnessError::Diverged {
                iter: t,
                value: loss_total,
            });
        }

        let grads = model.backward(&scene.image, &fwd, &grad_logits, &grad_features)?;
        model.sgd_step(&grads, opts.lr);
        table
            .record_loss(scene_id, loss_total, t)
            .map_err(HarnessError::Core)?;

        let pred = predictions(&fwd.logits);
        let counts = error_counts(&pred, &scene.true_mask, &prep.true_boundary);
        metrics.push(MetricsRow {
            iter: t,
            loss_total,
            loss_ube,
            loss_gap,
            boundary_error_rate: counts.boundary_rate(),
            interior_error_rate: counts.interior_rate(),
            sampling_mode: mode,
        });
    }

    let final_counts = evaluate(&model, scenes, 3)?;
    let last = metrics.last().expect("n_iters >= 1");
    let summary = TrainSummary {
        n_iters: opts.n_iters,
        final_loss_total: last.loss_total,
        final_loss_ube: last.loss_ube,
        final_loss_gap: last.loss_gap,
        boundary_error_rate: final_counts.boundary_rate(),
        interior_error_rate: final_counts.interior_rate(),
        counts: final_counts,
        random_draws,
        hardness_draws,
    };

    Ok(TrainOutput {
        metrics,
        summary,
        model,
        bank,
    })
}

/// Loads a dataset directory, trains, and writes all artifacts:
/// `metrics.csv`, `summary.json`, `model/`, `bank/`.
pub fn train_dir(
    config: &RunConfig,
    opts: &TrainOptions,
    dataset_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutput> {
    let (_, scenes) = crate::dataset::load_dataset(dataset_dir)?;
    let output = train_scenes(config, opts, &scenes)?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("metrics.csv"), metrics_to_csv(&output.metrics))?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&output.summary)?,
    )?;
    output.model.save(out_dir.join("model"))?;
    output.bank.save(out_dir.join("bank")).map_err(HarnessError::Core)?;
    Ok(output)
}

/// One strategy's final error rates in the motivation comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotivationRow {
    pub strategy: String,
    pub boundary_error_rate: f64,
    pub interior_error_rate: f64,
}

pub fn motivation_to_csv(rows: &[MotivationRow]) -> String {
    let mut out = String::from("strategy,boundary_error_rate,interior_error_rate\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{}",
            row.strategy, row.boundary_error_rate, row.interior_error_rate
        );
    }
    out
}

/// Trains five identical-seed models under the boundary strategies
/// (uniform baseline, enhance, ignore, threshold, reduce) with the
/// contrastive term and hardness sampling disabled, then reports final
/// error rates against the true masks.
pub fn reproduce_motivation(
    config: &RunConfig,
    scenes: &[SyntheticScene],
    n_iters: u64,
    lr: f64,
) -> Result<Vec<MotivationRow>> {
    // desk-scale parameters for the threshold and reduce variants
    let strategies: [(&str, Supervision); 5] = [
        ("baseline", Supervision::Ube { alpha: 0.0 }),
        (
            "enhance",
            Supervision::Strategy(StrategySpec::Enhance { alpha: 5.0 }),
        ),
        ("ignore", Supervision::Strategy(StrategySpec::Ignore)),
        (
            "threshold",
            Supervision::Strategy(StrategySpec::Threshold { tau: 1.0, a: 0.1 }),
        ),
        (
            "reduce",
            Supervision::Strategy(StrategySpec::Reduce { gamma: 0.3 }),
        ),
    ];

    let mut isolated = config.clone();
    isolated.lambda_gap = 0.0;
    isolated.schedule = segbound::has::ScheduleKind::None;

    let mut rows = Vec::with_capacity(strategies.len());
    for (name, supervision) in strategies {
        let mut opts = TrainOptions::new(&isolated);
        opts.n_iters = n_iters;
        opts.lr = lr;
        opts.supervision = supervision;
        let output = train_scenes(&isolated, &opts, scenes)?;
        rows.push(MotivationRow {
            strategy: name.to_string(),
            boundary_error_rate: output.summary.boundary_error_rate,
            interior_error_rate: output.summary.interior_error_rate,
        });
    }
    Ok(rows)
}
