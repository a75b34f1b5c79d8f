//! Pixel-wise cross-entropy with uncertainty-adaptive boundary weights, plus
//! the alternative boundary-handling strategies (enhance / ignore /
//! threshold / reduce) used for comparison runs.
//!
//! On boundary pixels the adaptive weight is `1 + alpha * sigmoid(z)` where
//! `z` standardizes the pixel's prediction entropy against the mean and
//! population standard deviation of entropy over the boundary set; interior
//! pixels keep weight 1. Weights are treated as constants during
//! backpropagation — the loss must not be able to lower itself by
//! manipulating its own uncertainty statistics.

use crate::error::{Error, Result};
use crate::morphology::{SemanticMask, IGNORE_LABEL};
use crate::tensor::Tensor;

/// Stabilizer added to the entropy standard deviation.
pub const SIGMA_EPSILON: f64 = 1e-6;

/// Per-pixel loss weights together with the boundary entropy statistics
/// they were derived from.
#[derive(Clone, Debug)]
pub struct WeightMap {
    pub values: Tensor<f64>,
    pub alpha: f64,
    /// Mean entropy over boundary pixels (0 when the boundary is empty).
    pub mu_entropy: f64,
    /// Population standard deviation of boundary entropy.
    pub sigma_entropy: f64,
}

/// Boundary handling strategy for the cross-entropy loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StrategySpec {
    /// Constant weight `alpha > 1` on boundary pixels.
    Enhance { alpha: f64 },
    /// Boundary pixels are excluded from the sum and the normalizer.
    Ignore,
    /// Boundary pixels contribute `min(tau, ce) + a * max(0, ce - tau)`.
    Threshold { tau: f64, a: f64 },
    /// Constant weight `gamma < 1` on boundary pixels.
    Reduce { gamma: f64 },
    /// Entropy-adaptive weighting with amplification `alpha`.
    Ube { alpha: f64 },
}

impl StrategySpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StrategySpec::Enhance { alpha } => {
                // exactly 1 degenerates to plain cross-entropy, which is a
                // useful reference point, so only genuine reductions are out
                if !alpha.is_finite() || alpha < 1.0 {
                    return Err(Error::validation("alpha", "enhance weight must be >= 1"));
                }
            }
            StrategySpec::Ignore => {}
            StrategySpec::Threshold { tau, a } => {
                if !tau.is_finite() || tau < 0.0 {
                    return Err(Error::validation("tau", "threshold must be finite and >= 0"));
                }
                if !a.is_finite() || a >= 1.0 {
                    return Err(Error::validation("a", "scaling factor must be < 1"));
                }
            }
            StrategySpec::Reduce { gamma } => {
                if !gamma.is_finite() || gamma >= 1.0 {
                    return Err(Error::validation("gamma", "reduce weight must be < 1"));
                }
            }
            StrategySpec::Ube { alpha } => {
                if !alpha.is_finite() || alpha < 0.0 {
                    return Err(Error::validation("alpha", "must be finite and >= 0"));
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_logits(logits: &Tensor<f64>) -> Result<(usize, usize, usize)> {
    if logits.ndim() != 3 {
        return Err(Error::shape(format!(
            "logits must be [H, W, C], got {:?}",
            logits.shape()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::validation("logits", "values must be finite"));
    }
    Ok((logits.shape()[0], logits.shape()[1], logits.shape()[2]))
}

fn check_map_shape(name: &'static str, t: &[usize], h: usize, w: usize) -> Result<()> {
    if t != [h, w] {
        return Err(Error::shape(format!(
            "{} must be [{}, {}], got {:?}",
            name, h, w, t
        )));
    }
    Ok(())
}

/// Numerically stable per-pixel softmax over the class axis.
pub fn softmax_probs(logits: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (h, w, c) = check_logits(logits)?;
    let mut probs = Tensor::zeros(vec![h, w, c]);
    for y in 0..h {
        for x in 0..w {
            let row = logits.row3(y, x);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = probs.row3_mut(y, x);
            let mut sum = 0.0;
            for (o, &l) in out.iter_mut().zip(row) {
                *o = (l - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
    }
    Ok(probs)
}

/// Shannon entropy (natural log) per pixel; `0 * ln 0` counts as 0.
pub fn entropy_map(probs: &Tensor<f64>) -> Result<Tensor<f64>> {
    if probs.ndim() != 3 {
        return Err(Error::shape(format!(
            "probabilities must be [H, W, C], got {:?}",
            probs.shape()
        )));
    }
    let (h, w) = (probs.shape()[0], probs.shape()[1]);
    let mut out = Tensor::zeros(vec![h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut e = 0.0;
            for &p in probs.row3(y, x) {
                if p > 0.0 {
                    e -= p * p.ln();
                }
            }
            out.set2(y, x, e);
        }
    }
    Ok(out)
}

/// Scope of the entropy statistics when weighting several images at once.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StatsScope {
    /// One mean/std over the union of all boundary pixels in the batch.
    Batch,
    /// Independent statistics per image.
    PerImage,
}

/// Entropy-adaptive boundary weights for a single map.
///
/// Off-boundary pixels get weight exactly 1; an empty boundary leaves the
/// whole map at 1.
pub fn ube_weights(entropy: &Tensor<f64>, boundary: &Tensor<u8>, alpha: f64) -> Result<WeightMap> {
    let maps = ube_weights_batch(&[(entropy, boundary)], alpha, StatsScope::Batch)?;
    Ok(maps.into_iter().next().expect("one input, one output"))
}

/// Batch variant: statistics are shared across all maps (`Batch`) or
/// computed independently (`PerImage`).
pub fn ube_weights_batch(
    items: &[(&Tensor<f64>, &Tensor<u8>)],
    alpha: f64,
    scope: StatsScope,
) -> Result<Vec<WeightMap>> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::validation("alpha", "must be finite and >= 0"));
    }
    for (entropy, boundary) in items {
        if entropy.shape() != boundary.shape() || entropy.ndim() != 2 {
            return Err(Error::shape(format!(
                "entropy {:?} and boundary {:?} must be matching 2-D maps",
                entropy.shape(),
                boundary.shape()
            )));
        }
    }

    let stats_of = |values: &[f64]| -> (f64, f64) {
        if values.is_empty() {
            return (0.0, 0.0);
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min == max {
            // a constant pool has that exact mean and zero deviation; the
            // naive sum would leave ulp-level noise that epsilon amplifies
            return (min, 0.0);
        }
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
        (mu, var.sqrt())
    };

    let shared = match scope {
        StatsScope::Batch => {
            let mut pool = Vec::new();
            for (entropy, boundary) in items {
                for (&e, &b) in entropy.data().iter().zip(boundary.data()) {
                    if b == 1 {
                        pool.push(e);
                    }
                }
            }
            Some(stats_of(&pool))
        }
        StatsScope::PerImage => None,
    };

    let mut out = Vec::with_capacity(items.len());
    for (entropy, boundary) in items {
        let (mu, sigma) = match shared {
            Some(s) => s,
            None => {
                let pool: Vec<f64> = entropy
                    .data()
                    .iter()
                    .zip(boundary.data())
                    .filter(|(_, &b)| b == 1)
                    .map(|(&e, _)| e)
                    .collect();
                stats_of(&pool)
            }
        };
        let mut values = Tensor::filled(entropy.shape().to_vec(), 1.0);
        for ((v, &e), &b) in values
            .data_mut()
            .iter_mut()
            .zip(entropy.data())
            .zip(boundary.data())
        {
            if b == 1 {
                *v = 1.0 + alpha * sigmoid((e - mu) / (sigma + SIGMA_EPSILON));
            }
        }
        out.push(WeightMap {
            values,
            alpha,
            mu_entropy: mu,
            sigma_entropy: sigma,
        });
    }
    Ok(out)
}

/// Stable per-pixel cross-entropy `-ln p_label` straight from logits.
#[inline]
fn pixel_ce(logit_row: &[f64], label: usize) -> f64 {
    let max = logit_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logit_row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logit_row[label]
}

/// Weighted mean cross-entropy.
///
/// Ignore-label pixels contribute nothing and are excluded from the
/// normalizer; the per-pixel map holds the unweighted cross-entropy.
pub fn weighted_ce(
    logits: &Tensor<f64>,
    labels: &SemanticMask,
    weights: &Tensor<f64>,
) -> Result<(f64, Tensor<f64>)> {
    let (h, w, c) = check_logits(logits)?;
    if labels.height() != h || labels.width() != w {
        return Err(Error::shape(format!(
            "labels [{}, {}] do not match logits [{}, {}]",
            labels.height(),
            labels.width(),
            h,
            w
        )));
    }
    check_map_shape("weights", weights.shape(), h, w)?;

    let mut per_pixel = Tensor::zeros(vec![h, w]);
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            let label = labels.label(y, x);
            if label == IGNORE_LABEL {
                continue;
            }
            debug_assert!((label as usize) < c);
            let ce = pixel_ce(logits.row3(y, x), label as usize);
            per_pixel.set2(y, x, ce);
            sum += weights.at2(y, x) * ce;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySupervision);
    }
    Ok((sum / n as f64, per_pixel))
}

/// Cross-entropy under one of the boundary strategies.
pub fn strategy_loss(
    logits: &Tensor<f64>,
    labels: &SemanticMask,
    boundary: &Tensor<u8>,
    spec: &StrategySpec,
) -> Result<f64> {
    strategy_grad_logits(logits, labels, boundary, spec).map(|(loss, _)| loss)
}

/// Strategy loss together with its gradient with respect to the logits.
///
/// Every strategy is piecewise linear in the per-pixel cross-entropy, so the
/// gradient is `(w_eff / N) * (softmax - onehot)` with an effective weight
/// that for the threshold strategy depends on which side of `tau` the pixel
/// sits. UBE weights are constants here (stop-gradient).
pub fn strategy_grad_logits(
    logits: &Tensor<f64>,
    labels: &SemanticMask,
    boundary: &Tensor<u8>,
    spec: &StrategySpec,
) -> Result<(f64, Tensor<f64>)> {
    spec.validate()?;
    let (h, w, c) = check_logits(logits)?;
    if labels.height() != h || labels.width() != w {
        return Err(Error::shape("labels do not match logits".to_string()));
    }
    check_map_shape("boundary", boundary.shape(), h, w)?;
    boundary.expect_binary("boundary")?;

    // UBE delegates so that its statistics pass stays in one place.
    if let StrategySpec::Ube { alpha } = *spec {
        let probs = softmax_probs(logits)?;
        let entropy = entropy_map(&probs)?;
        let weights = ube_weights(&entropy, boundary, alpha)?;
        let (loss, _) = weighted_ce(logits, labels, &weights.values)?;
        let grad = ube_grad_logits(logits, labels, &weights.values)?;
        return Ok((loss, grad));
    }

    // First pass: the normalizer depends on the strategy.
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if labels.label(y, x) == IGNORE_LABEL {
                continue;
            }
            if matches!(spec, StrategySpec::Ignore) && boundary.at2(y, x) == 1 {
                continue;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySupervision);
    }
    let inv_n = 1.0 / n as f64;

    let mut sum = 0.0;
    let mut grad = Tensor::zeros(vec![h, w, c]);
    for y in 0..h {
        for x in 0..w {
            let label = labels.label(y, x);
            if label == IGNORE_LABEL {
                continue;
            }
            let on_boundary = boundary.at2(y, x) == 1;
            let row = logits.row3(y, x);
            let ce = pixel_ce(row, label as usize);
            // contribution to the sum, and d(contribution)/d(ce)
            let (term, w_eff) = if !on_boundary {
                (ce, 1.0)
            } else {
                match *spec {
                    StrategySpec::Enhance { alpha } => (alpha * ce, alpha),
                    StrategySpec::Ignore => continue,
                    StrategySpec::Threshold { tau, a } => {
                        let clipped = tau.min(ce) + a * (ce - tau).max(0.0);
                        (clipped, if ce <= tau { 1.0 } else { a })
                    }
                    StrategySpec::Reduce { gamma } => (gamma * ce, gamma),
                    StrategySpec::Ube { .. } => unreachable!("handled above"),
                }
            };
            sum += term;

            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let g = grad.row3_mut(y, x);
            for (k, gk) in g.iter_mut().enumerate() {
                let p = exps[k] / z;
                let onehot = f64::from(k == label as usize);
                *gk = w_eff * inv_n * (p - onehot);
            }
        }
    }
    // same rounding as weighted_ce so the empty-boundary case is bit-equal
    Ok((sum / n as f64, grad))
}

/// Gradient of the weighted cross-entropy with respect to the logits,
/// with the weight map held constant.
pub fn ube_grad_logits(
    logits: &Tensor<f64>,
    labels: &SemanticMask,
    weights: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let (h, w, c) = check_logits(logits)?;
    check_map_shape("weights", weights.shape(), h, w)?;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if labels.label(y, x) != IGNORE_LABEL {
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptySupervision);
    }
    let inv_n = 1.0 / n as f64;

    let mut grad = Tensor::zeros(vec![h, w, c]);
    for y in 0..h {
        for x in 0..w {
            let label = labels.label(y, x);
            if label == IGNORE_LABEL {
                continue;
            }
            let row = logits.row3(y, x);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let weight = weights.at2(y, x);
            let g = grad.row3_mut(y, x);
            for (k, gk) in g.iter_mut().enumerate() {
                let p = exps[k] / z;
                let onehot = f64::from(k == label as usize);
                *gk = weight * inv_n * (p - onehot);
            }
        }
    }
    Ok(grad)
}
