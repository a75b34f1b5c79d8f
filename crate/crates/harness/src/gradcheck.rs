//! End-to-end gradient verification on a tiny instance.
//!
//! Builds an 8x8 scene with 3 classes and 8-dimensional features, freezes
//! the quantities that are constants under optimization (the entropy-derived
//! weight map, the prototype bank, and its imbalance weights), and compares
//! the analytic gradient of the total loss against central finite
//! differences over every model parameter and every boundary feature entry.

use serde::Serialize;

use segbound::config::RunConfig;
use segbound::gap::{gap_loss, gather_boundary_features, PrototypeBank};
use segbound::morphology::{downsample_mask, extract_boundary, granularity_bands};
use segbound::rng::RngStream;
use segbound::tensor::Tensor;
use segbound::ube::{entropy_map, softmax_probs, ube_grad_logits, ube_weights, weighted_ce};

use crate::dataset::{generate_scene, GenOptions};
use crate::error::{HarnessError, Result};
use crate::model::{ModelShape, ToyModel};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub params_checked: usize,
    pub features_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8)
}

/// Checks analytic gradients of `L_ube + lambda * L_gap` on a fixed tiny
/// instance. Returns the worst relative error seen; callers decide whether
/// a failing report is an error (`run` below exits nonzero).
pub fn gradcheck(config: &RunConfig, seed: u64) -> Result<GradcheckReport> {
    config.validate().map_err(HarnessError::Core)?;

    let gen = GenOptions {
        n_scenes: 1,
        height: 8,
        width: 8,
        num_classes: 3,
        jitter: 1,
        seed,
        pixel_noise: 0.02,
    };
    let mut rng = RngStream::new(seed);
    let scene = generate_scene(&gen, &mut rng)?;

    let stride = 2; // 4x4 feature grid keeps boundary features present
    let feature_dim = 8;
    let shape = ModelShape {
        patch_radius: 1,
        hidden_dim: 8,
        feature_dim,
        num_classes: 3,
        stride,
    };
    let mut model = ToyModel::init(shape, &mut rng)?;
    let bank = PrototypeBank::init(3, feature_dim, config.momentum, &mut rng)?;

    let boundary = extract_boundary(&scene.train_mask, 3, 3)?;
    let feature_mask = downsample_mask(&scene.train_mask, stride)?;
    let bands = granularity_bands(&feature_mask, config.granularity_kernels)?;

    let lambda = config.lambda_gap;
    let tau = config.tau_gap;

    // freeze the stop-gradient quantities at the base point
    let base = model.forward(&scene.image)?;
    let probs = softmax_probs(&base.logits)?;
    let entropy = entropy_map(&probs)?;
    let frozen_weights = ube_weights(&entropy, &boundary, config.alpha_ube)?.values;

    let objective = |m: &ToyModel| -> Result<f64> {
        let fwd = m.forward(&scene.image)?;
        let (ube, _) = weighted_ce(&fwd.logits, &scene.train_mask, &frozen_weights)?;
        let gap = if lambda > 0.0 {
            let fs = gather_boundary_features(&fwd.features, &bands, &feature_mask)?;
            gap_loss(&bank, &fs, tau)?.loss
        } else {
            0.0
        };
        Ok(ube + lambda * gap)
    };

    // analytic gradient of the same frozen objective
    let grad_logits = ube_grad_logits(&base.logits, &scene.train_mask, &frozen_weights)?;
    let fs0 = gather_boundary_features(&base.features, &bands, &feature_mask)?;
    let gap0 = gap_loss(&bank, &fs0, tau)?;
    let mut grad_features = Tensor::zeros(base.features.shape().to_vec());
    if lambda > 0.0 {
        for (i, &(y, x)) in fs0.positions.iter().enumerate() {
            let row = &gap0.grad_features.data()[i * feature_dim..(i + 1) * feature_dim];
            for (dst, &g) in grad_features.row3_mut(y, x).iter_mut().zip(row) {
                *dst = lambda * g;
            }
        }
    }
    let grads = model.backward(&scene.image, &base, &grad_logits, &grad_features)?;

    let mut max_rel: f64 = 0.0;

    let n_params = model.param_count();
    for i in 0..n_params {
        let orig = model.param(i);
        model.set_param(i, orig + FD_STEP);
        let plus = objective(&model)?;
        model.set_param(i, orig - FD_STEP);
        let minus = objective(&model)?;
        model.set_param(i, orig);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        max_rel = max_rel.max(rel_error(numeric, grads.flat(i)));
    }

    // boundary features: perturb the feature map directly; only the
    // contrastive term depends on it
    let mut features_checked = 0usize;
    if lambda > 0.0 {
        for &(y, x) in &fs0.positions {
            for d in 0..feature_dim {
                let mut plus_map = base.features.clone();
                plus_map.row3_mut(y, x)[d] += FD_STEP;
                let mut minus_map = base.features.clone();
                minus_map.row3_mut(y, x)[d] -= FD_STEP;
                let fs_plus = gather_boundary_features(&plus_map, &bands, &feature_mask)?;
                let fs_minus = gather_boundary_features(&minus_map, &bands, &feature_mask)?;
                let plus = lambda * gap_loss(&bank, &fs_plus, tau)?.loss;
                let minus = lambda * gap_loss(&bank, &fs_minus, tau)?.loss;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let analytic = grad_features.row3(y, x)[d];
                max_rel = max_rel.max(rel_error(numeric, analytic));
                features_checked += 1;
            }
        }
    }

    Ok(GradcheckReport {
        max_rel_error: max_rel,
        params_checked: n_params,
        features_checked,
        tolerance: GRADCHECK_TOLERANCE,
        passed: max_rel < GRADCHECK_TOLERANCE,
    })
}

/// Gradcheck as a fallible operation: a report over tolerance is an error.
pub fn run(config: &RunConfig, seed: u64) -> Result<GradcheckReport> {
    let report = gradcheck(config, seed)?;
    if !report.passed {
        return Err(HarnessError::GradcheckFailed {
            max_rel_error: report.max_rel_error,
            tolerance: report.tolerance,
        });
    }
    Ok(report)
}
