//! Prototype-contrastive boundary learning.
//!
//! A bank of `C x 3` unit-norm prototypes, one per (class, granularity)
//! coordinate, is maintained by pixel-wise momentum updates and pulls
//! boundary features toward their coordinate's prototype with a
//! frequency-weighted softmax contrastive loss. Prototypes are constants
//! with respect to the loss gradient — the only thing that moves them is the
//! momentum rule — and gradients flow to the raw (pre-normalization)
//! features through the normalization Jacobian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{BoundaryBands, SemanticMask, IGNORE_LABEL, NUM_GRANULARITIES};
use crate::npy::{self, NpyArray};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Tolerance on prototype unit norms.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Features with norm below this are skipped (cannot be normalized).
const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct PrototypeBank {
    /// `[C, 3, D]`, every row unit L2 norm.
    prototypes: Tensor<f64>,
    /// Update counts per (class, granularity) cell.
    frequencies: Tensor<i64>,
    momentum: f64,
}

/// Outcome counts of a momentum-update pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub applied: usize,
    /// Features skipped because their norm was (numerically) zero.
    pub skipped_zero_norm: usize,
}

impl PrototypeBank {
    /// Fresh bank with deterministic pseudo-random unit prototypes.
    pub fn init(num_classes: usize, dim: usize, momentum: f64, rng: &mut RngStream) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::validation("num_classes", "must be >= 1"));
        }
        if dim == 0 {
            return Err(Error::validation("feature_dim", "must be >= 1"));
        }
        check_momentum(momentum)?;
        let cells = num_classes * NUM_GRANULARITIES;
        let mut data = Vec::with_capacity(cells * dim);
        for _ in 0..cells {
            let mut row: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
            let norm = l2_norm(&row);
            // a zero draw is essentially impossible, but stay total
            if norm < ZERO_NORM_EPS {
                row[0] = 1.0;
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            data.extend_from_slice(&row);
        }
        Ok(PrototypeBank {
            prototypes: Tensor::new(vec![num_classes, NUM_GRANULARITIES, dim], data)?,
            frequencies: Tensor::filled(vec![num_classes, NUM_GRANULARITIES], 0i64),
            momentum,
        })
    }

    /// Rebuilds a bank from persisted parts, checking the invariants.
    pub fn from_parts(
        prototypes: Tensor<f64>,
        frequencies: Tensor<i64>,
        momentum: f64,
    ) -> Result<Self> {
        check_momentum(momentum)?;
        if prototypes.ndim() != 3 || prototypes.shape()[1] != NUM_GRANULARITIES {
            return Err(Error::shape(format!(
                "prototypes must be [C, {}, D], got {:?}",
                NUM_GRANULARITIES,
                prototypes.shape()
            )));
        }
        let c = prototypes.shape()[0];
        if frequencies.shape() != [c, NUM_GRANULARITIES] {
            return Err(Error::shape(format!(
                "frequencies must be [{}, {}], got {:?}",
                c,
                NUM_GRANULARITIES,
                frequencies.shape()
            )));
        }
        if frequencies.data().iter().any(|&u| u < 0) {
            return Err(Error::validation("frequencies", "counts must be >= 0"));
        }
        let bank = PrototypeBank {
            prototypes,
            frequencies,
            momentum,
        };
        bank.check_unit_norms()?;
        Ok(bank)
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[2]
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn prototypes(&self) -> &Tensor<f64> {
        &self.prototypes
    }

    pub fn frequencies(&self) -> &Tensor<i64> {
        &self.frequencies
    }

    /// Flat prototype index of a (class, granularity in 1..=3) coordinate.
    #[inline]
    pub fn flat_index(&self, class: usize, granularity: u8) -> usize {
        debug_assert!((1..=NUM_GRANULARITIES as u8).contains(&granularity));
        class * NUM_GRANULARITIES + (granularity as usize - 1)
    }

    pub fn prototype(&self, class: usize, granularity: u8) -> &[f64] {
        let d = self.dim();
        let start = self.flat_index(class, granularity) * d;
        &self.prototypes.data()[start..start + d]
    }

    fn check_unit_norms(&self) -> Result<()> {
        let d = self.dim();
        for (row, chunk) in self.prototypes.data().chunks_exact(d).enumerate() {
            let norm = l2_norm(chunk);
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Internal(format!(
                    "prototype row {} has norm {} (expected 1 within {})",
                    row, norm, UNIT_NORM_TOL
                )));
            }
        }
        Ok(())
    }

    /// Applies pixel-wise momentum updates in feature-set order and bumps
    /// the per-cell frequencies.
    pub fn update(&mut self, fs: &BoundaryFeatureSet) -> Result<UpdateStats> {
        if !fs.is_empty() && fs.dim() != self.dim() {
            return Err(Error::shape(format!(
                "feature dim {} does not match bank dim {}",
                fs.dim(),
                self.dim()
            )));
        }
        let mut stats = UpdateStats::default();
        let m = self.momentum;
        let d = self.dim();
        for i in 0..fs.len() {
            let feature = fs.feature(i);
            let norm = l2_norm(feature);
            if norm < ZERO_NORM_EPS {
                stats.skipped_zero_norm += 1;
                continue;
            }
            let (class, granularity) = fs.coords[i];
            if class >= self.num_classes() {
                return Err(Error::IndexOutOfRange(format!(
                    "class {} outside bank with {} classes",
                    class,
                    self.num_classes()
                )));
            }
            let flat = self.flat_index(class, granularity);
            let row = &mut self.prototypes.data_mut()[flat * d..(flat + 1) * d];
            for (p, &f) in row.iter_mut().zip(feature) {
                *p = m * *p + (1.0 - m) * (f / norm);
            }
            let new_norm = l2_norm(row);
            if new_norm < ZERO_NORM_EPS {
                // momentum and feature cancelled exactly; renormalizing is
                // impossible, keep the previous direction by rescaling back
                for (p, &f) in row.iter_mut().zip(feature) {
                    *p = (*p - (1.0 - m) * (f / norm)) / m;
                }
                stats.skipped_zero_norm += 1;
                continue;
            }
            row.iter_mut().for_each(|p| *p /= new_norm);
            let freq = &mut self.frequencies.data_mut()[flat];
            *freq += 1;
            stats.applied += 1;
        }
        Ok(stats)
    }

    /// Frequency-balancing weights: rarely updated cells get the largest
    /// weight and the most-updated cell gets exactly 1.
    pub fn imbalance_weights(&self) -> Tensor<f64> {
        let max_u = self.frequencies.data().iter().copied().max().unwrap_or(0);
        let min_u = self.frequencies.data().iter().copied().min().unwrap_or(0);
        let z = (max_u + 1) as f64 / (min_u + 1) as f64;
        let mut out = Tensor::filled(self.frequencies.shape().to_vec(), 1.0);
        for (w, &u) in out.data_mut().iter_mut().zip(self.frequencies.data()) {
            let raw = (max_u + 1) as f64 / (u + 1) as f64;
            *w = raw / z;
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        npy::write_tensor(dir.join("prototypes.npy"), &self.prototypes)?;
        let freqs_i32: Result<Vec<i32>> = self
            .frequencies
            .data()
            .iter()
            .map(|&u| {
                i32::try_from(u).map_err(|_| {
                    Error::validation("frequencies", "update count exceeds int32 range")
                })
            })
            .collect();
        let freqs = Tensor::new(self.frequencies.shape().to_vec(), freqs_i32?)?;
        npy::write_tensor(dir.join("frequencies.npy"), &freqs)?;
        let meta = BankMeta {
            momentum: self.momentum,
            num_classes: self.num_classes(),
            granularities: NUM_GRANULARITIES,
            feature_dim: self.dim(),
        };
        fs::write(dir.join("bank.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: BankMeta = serde_json::from_str(&fs::read_to_string(dir.join("bank.json"))?)?;
        let prototypes = match npy::read_tensor(dir.join("prototypes.npy"))? {
            NpyArray::F64(t) => t,
            other => {
                return Err(Error::UnsupportedDtype(format!(
                    "prototypes must be float64, found {}",
                    other.dtype()
                )))
            }
        };
        let frequencies = npy::read_tensor(dir.join("frequencies.npy"))?
            .to_i32()?
            .map(i64::from);
        if prototypes.shape() != [meta.num_classes, meta.granularities, meta.feature_dim] {
            return Err(Error::shape(
                "bank.json dims do not match prototypes.npy".to_string(),
            ));
        }
        Self::from_parts(prototypes, frequencies, meta.momentum)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BankMeta {
    momentum: f64,
    num_classes: usize,
    granularities: usize,
    feature_dim: usize,
}

fn check_momentum(momentum: f64) -> Result<()> {
    if !momentum.is_finite() || !(0.0..1.0).contains(&momentum) {
        return Err(Error::validation("momentum", "must lie in [0, 1)"));
    }
    Ok(())
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

/// Boundary features gathered from a feature map, with their
/// (class, granularity) coordinates and source pixels.
#[derive(Clone, Debug)]
pub struct BoundaryFeatureSet {
    /// `[N, D]` raw feature rows in row-major pixel order.
    pub features: Tensor<f64>,
    /// (class, granularity in 1..=3) per feature.
    pub coords: Vec<(usize, u8)>,
    /// (row, col) of each feature in the source map.
    pub positions: Vec<(usize, usize)>,
}

impl BoundaryFeatureSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        if self.features.ndim() == 2 {
            self.features.shape()[1]
        } else {
            0
        }
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }
}

/// Collects the feature vector, class label, and granularity of every pixel
/// with a positive band value and a non-ignore label, in row-major order.
pub fn gather_boundary_features(
    features: &Tensor<f64>,
    bands: &BoundaryBands,
    mask: &SemanticMask,
) -> Result<BoundaryFeatureSet> {
    if features.ndim() != 3 {
        return Err(Error::shape(format!(
            "feature map must be [H, W, D], got {:?}",
            features.shape()
        )));
    }
    let (h, w, d) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    if bands.bands.shape() != [h, w] || mask.height() != h || mask.width() != w {
        return Err(Error::shape(format!(
            "feature map {:?}, bands {:?}, and mask [{}, {}] disagree",
            features.shape(),
            bands.bands.shape(),
            mask.height(),
            mask.width()
        )));
    }
    let mut rows = Vec::new();
    let mut coords = Vec::new();
    let mut positions = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let g = bands.bands.at2(y, x);
            if g == 0 {
                continue;
            }
            let label = mask.label(y, x);
            if label == IGNORE_LABEL {
                continue;
            }
            rows.extend_from_slice(features.row3(y, x));
            coords.push((label as usize, g));
            positions.push((y, x));
        }
    }
    let n = coords.len();
    Ok(BoundaryFeatureSet {
        features: Tensor::new(vec![n, d], rows)?,
        coords,
        positions,
    })
}

/// Loss value and feature gradients of one contrastive pass.
#[derive(Clone, Debug)]
pub struct GapLoss {
    pub loss: f64,
    /// Gradient with respect to the raw features, `[N, D]`.
    pub grad_features: Tensor<f64>,
}

/// Weighted softmax-contrastive loss of a feature set against the bank.
///
/// Per feature, logits over all `C*3` prototypes are `cos(f, p) / tau`; the
/// positive is the feature's own (class, granularity) cell and the weights
/// come from the bank's current update frequencies. The bank is constant
/// here; gradients are with respect to raw features only.
pub fn gap_loss(bank: &PrototypeBank, fs: &BoundaryFeatureSet, tau: f64) -> Result<GapLoss> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::validation("tau_gap", "must be > 0"));
    }
    bank.check_unit_norms()?;
    let d = bank.dim();
    if fs.is_empty() {
        return Ok(GapLoss {
            loss: 0.0,
            grad_features: Tensor::zeros(vec![0, d]),
        });
    }
    if fs.dim() != d {
        return Err(Error::shape(format!(
            "feature dim {} does not match bank dim {}",
            fs.dim(),
            d
        )));
    }
    for &(class, granularity) in &fs.coords {
        if class >= bank.num_classes() || !(1..=NUM_GRANULARITIES as u8).contains(&granularity) {
            return Err(Error::IndexOutOfRange(format!(
                "coordinate ({}, {}) outside bank",
                class, granularity
            )));
        }
    }

    let weights = bank.imbalance_weights();
    let cells = bank.num_classes() * NUM_GRANULARITIES;
    let protos = bank.prototypes.data();

    let mut loss_sum = 0.0;
    let mut counted = 0usize;
    let mut grad = Tensor::zeros(vec![fs.len(), d]);
    let mut logits = vec![0.0f64; cells];
    let mut probs = vec![0.0f64; cells];

    for i in 0..fs.len() {
        let feature = fs.feature(i);
        let norm = l2_norm(feature);
        if norm < ZERO_NORM_EPS {
            continue; // mirrors the update rule: unusable feature
        }
        let unit: Vec<f64> = feature.iter().map(|&f| f / norm).collect();

        for (j, logit) in logits.iter_mut().enumerate() {
            let p = &protos[j * d..(j + 1) * d];
            *logit = dot(&unit, p) / tau;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, &l) in probs.iter_mut().zip(logits.iter()) {
            *p = (l - max).exp();
            z += *p;
        }
        probs.iter_mut().for_each(|p| *p /= z);

        let (class, granularity) = fs.coords[i];
        let target = bank.flat_index(class, granularity);
        let ce = max + z.ln() - logits[target];
        let w = weights.at2(class, granularity as usize - 1);
        loss_sum += w * ce;
        counted += 1;

        // d ce / d unit-feature, then through the normalization Jacobian
        let mut g_unit = vec![0.0f64; d];
        for j in 0..cells {
            let coeff = (probs[j] - f64::from(j == target)) / tau;
            let p = &protos[j * d..(j + 1) * d];
            for (gu, &pk) in g_unit.iter_mut().zip(p) {
                *gu += coeff * pk;
            }
        }
        let radial = dot(&g_unit, &unit);
        let grad_row = &mut grad.data_mut()[i * d..(i + 1) * d];
        for ((gr, &gu), &us) in grad_row.iter_mut().zip(&g_unit).zip(&unit) {
            *gr = w * (gu - radial * us) / norm;
        }
    }

    if counted == 0 {
        return Ok(GapLoss {
            loss: 0.0,
            grad_features: Tensor::zeros(vec![fs.len(), d]),
        });
    }
    let inv_n = 1.0 / counted as f64;
    grad.data_mut().iter_mut().for_each(|g| *g *= inv_n);
    Ok(GapLoss {
        loss: loss_sum * inv_n,
        grad_features: grad,
    })
}

/// One full pass: gather, loss and gradients against the pre-update bank,
/// then momentum updates.
#[derive(Clone, Debug)]
pub struct GapStep {
    pub loss: f64,
    /// Feature-map gradient, zeros off-boundary, `[H, W, D]`.
    pub grad_map: Tensor<f64>,
    pub num_features: usize,
    pub update: UpdateStats,
}

pub fn gap_step(
    bank: &mut PrototypeBank,
    features: &Tensor<f64>,
    bands: &BoundaryBands,
    mask: &SemanticMask,
    tau: f64,
) -> Result<GapStep> {
    let fs = gather_boundary_features(features, bands, mask)?;
    let result = gap_loss(bank, &fs, tau)?;
    let update = bank.update(&fs)?;
    let mut grad_map = Tensor::zeros(features.shape().to_vec());
    let d = bank.dim();
    for (i, &(y, x)) in fs.positions.iter().enumerate() {
        let src = &result.grad_features.data()[i * d..(i + 1) * d];
        grad_map.row3_mut(y, x).copy_from_slice(src);
    }
    Ok(GapStep {
        loss: result.loss,
        grad_map,
        num_features: fs.len(),
        update,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::granularity_bands;

    fn unit_bank(rows: Vec<Vec<f64>>, num_classes: usize, momentum: f64) -> PrototypeBank {
        let d = rows[0].len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        PrototypeBank::from_parts(
            Tensor::new(vec![num_classes, NUM_GRANULARITIES, d], data).unwrap(),
            Tensor::filled(vec![num_classes, NUM_GRANULARITIES], 0i64),
            momentum,
        )
        .unwrap()
    }

    fn basis(d: usize, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        v
    }

    fn feature_set(rows: Vec<Vec<f64>>, coords: Vec<(usize, u8)>) -> BoundaryFeatureSet {
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len();
        let positions = (0..n).map(|i| (0, i)).collect();
        BoundaryFeatureSet {
            features: Tensor::new(vec![n, d], rows.into_iter().flatten().collect()).unwrap(),
            coords,
            positions,
        }
    }

    #[test]
    fn init_is_unit_norm_and_deterministic() {
        let mut rng1 = RngStream::new(33);
        let mut rng2 = RngStream::new(33);
        let a = PrototypeBank::init(4, 16, 0.99, &mut rng1).unwrap();
        let b = PrototypeBank::init(4, 16, 0.99, &mut rng2).unwrap();
        assert_eq!(a.prototypes().data(), b.prototypes().data());
        for chunk in a.prototypes().data().chunks_exact(16) {
            assert!((l2_norm(chunk) - 1.0).abs() < UNIT_NORM_TOL);
        }
    }

    #[test]
    fn gather_empty_bands_yields_empty_set() {
        let features = Tensor::zeros(vec![4, 4, 8]);
        let bands = BoundaryBands {
            bands: Tensor::filled(vec![4, 4], 0u8),
            kernels: [3, 5, 7],
        };
        let mask = SemanticMask::new(Tensor::filled(vec![4, 4], 0), 2).unwrap();
        let fs = gather_boundary_features(&features, &bands, &mask).unwrap();
        assert!(fs.is_empty());
    }

    #[test]
    fn gather_single_thin_pixel() {
        let mut features = Tensor::zeros(vec![3, 3, 4]);
        features.row3_mut(1, 2).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let mut band_grid = Tensor::filled(vec![3, 3], 0u8);
        band_grid.set2(1, 2, 1);
        let bands = BoundaryBands {
            bands: band_grid,
            kernels: [3, 5, 7],
        };
        let mask = SemanticMask::new(Tensor::filled(vec![3, 3], 5), 6).unwrap();
        let fs = gather_boundary_features(&features, &bands, &mask).unwrap();
        assert_eq!(fs.len(), 1);
        assert_eq!(fs.coords[0], (5, 1));
        assert_eq!(fs.positions[0], (1, 2));
        assert_eq!(fs.feature(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gather_count_matches_counting_oracle() {
        let mut rng = RngStream::new(34);
        let (h, w, d) = (8, 8, 4);
        let grid_data: Vec<i32> = (0..h * w)
            .map(|_| {
                if rng.next_f64() < 0.1 {
                    IGNORE_LABEL
                } else {
                    rng.next_below(3) as i32
                }
            })
            .collect();
        let mask = SemanticMask::new(Tensor::new(vec![h, w], grid_data).unwrap(), 3).unwrap();
        let bands = granularity_bands(&mask, [3, 5, 7]).unwrap();
        let features = Tensor::new(
            vec![h, w, d],
            (0..h * w * d).map(|_| rng.next_normal()).collect(),
        )
        .unwrap();
        let fs = gather_boundary_features(&features, &bands, &mask).unwrap();
        let expected = (0..h * w)
            .filter(|&i| {
                bands.bands.data()[i] > 0 && mask.grid().data()[i] != IGNORE_LABEL
            })
            .count();
        assert_eq!(fs.len(), expected);
    }

    #[test]
    fn update_with_empty_set_is_identity() {
        let mut rng = RngStream::new(35);
        let mut bank = PrototypeBank::init(2, 8, 0.99, &mut rng).unwrap();
        let before = bank.prototypes().data().to_vec();
        let fs = feature_set(vec![], vec![]);
        let stats = bank.update(&fs).unwrap();
        assert_eq!(stats, UpdateStats::default());
        assert_eq!(bank.prototypes().data(), &before[..]);
    }

    #[test]
    fn zero_momentum_snaps_to_the_feature() {
        let mut rng = RngStream::new(36);
        let mut bank = PrototypeBank::init(2, 4, 0.0, &mut rng).unwrap();
        let fs = feature_set(vec![vec![0.0, 3.0, 0.0, 4.0]], vec![(1, 2)]);
        bank.update(&fs).unwrap();
        let p = bank.prototype(1, 2);
        assert_eq!(p, &[0.0, 0.6, 0.0, 0.8]);
        assert_eq!(bank.frequencies().at2(1, 1), 1);
    }

    #[test]
    fn zero_norm_features_are_skipped_and_counted() {
        let mut rng = RngStream::new(37);
        let mut bank = PrototypeBank::init(1, 4, 0.9, &mut rng).unwrap();
        let before = bank.prototypes().data().to_vec();
        let fs = feature_set(vec![vec![0.0; 4]], vec![(0, 1)]);
        let stats = bank.update(&fs).unwrap();
        assert_eq!(stats.skipped_zero_norm, 1);
        assert_eq!(stats.applied, 0);
        assert_eq!(bank.prototypes().data(), &before[..]);
        assert_eq!(bank.frequencies().at2(0, 0), 0);
    }

    /// 2-D recurrence oracle: repeated momentum pulls of a unit prototype
    /// toward an orthogonal unit feature, tracked in the shared plane.
    fn plane_recurrence(momentum: f64, steps: usize) -> (f64, f64) {
        let (mut a, mut b) = (1.0f64, 0.0f64); // (along p0, along f)
        for _ in 0..steps {
            a *= momentum;
            b = momentum * b + (1.0 - momentum);
            let norm = (a * a + b * b).sqrt();
            a /= norm;
            b /= norm;
        }
        (a, b)
    }

    #[test]
    fn momentum_converges_to_constant_feature_per_recurrence_oracle() {
        let d = 6;
        let momentum = 0.99;
        let mut rows = Vec::new();
        for _ in 0..NUM_GRANULARITIES {
            rows.push(basis(d, 0)); // p0 along axis 0
        }
        let mut bank = unit_bank(rows, 1, momentum);
        let f = basis(d, 1); // target orthogonal to p0

        let checkpoints = [10usize, 100, 500, 1000];
        let mut done = 0usize;
        for &t in &checkpoints {
            let fs = feature_set(
                vec![f.clone(); t - done],
                vec![(0, 1); t - done],
            );
            bank.update(&fs).unwrap();
            done = t;
            let (a, b) = plane_recurrence(momentum, t);
            let p = bank.prototype(0, 1);
            assert!((p[0] - a).abs() < 1e-12, "step {t}: {} vs {}", p[0], a);
            assert!((p[1] - b).abs() < 1e-12, "step {t}: {} vs {}", p[1], b);
        }

        let p = bank.prototype(0, 1);
        let dist = l2_norm(&[p[0] - f[0], p[1] - f[1], p[2], p[3], p[4], p[5]]);
        assert!(dist < 1e-3, "distance after 1000 updates = {dist}");
    }

    #[test]
    fn norms_stay_unit_after_many_random_updates() {
        let mut rng = RngStream::new(38);
        let mut bank = PrototypeBank::init(3, 8, 0.99, &mut rng).unwrap();
        for _ in 0..1000 {
            let row: Vec<f64> = (0..8).map(|_| rng.next_normal()).collect();
            let class = rng.next_below(3) as usize;
            let g = 1 + rng.next_below(3) as u8;
            let fs = feature_set(vec![row], vec![(class, g)]);
            bank.update(&fs).unwrap();
        }
        for chunk in bank.prototypes().data().chunks_exact(8) {
            assert!((l2_norm(chunk) - 1.0).abs() < UNIT_NORM_TOL);
        }
    }

    #[test]
    fn update_is_bit_deterministic() {
        let mut rng = RngStream::new(39);
        let mut a = PrototypeBank::init(2, 8, 0.99, &mut rng).unwrap();
        let mut b = a.clone();
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..8).map(|_| rng.next_normal()).collect())
            .collect();
        let coords: Vec<(usize, u8)> = (0..50)
            .map(|_| (rng.next_below(2) as usize, 1 + rng.next_below(3) as u8))
            .collect();
        let fs = feature_set(rows, coords);
        a.update(&fs).unwrap();
        b.update(&fs).unwrap();
        assert_eq!(a.prototypes().data(), b.prototypes().data());
        assert_eq!(a.frequencies().data(), b.frequencies().data());
    }

    #[test]
    fn imbalance_weights_all_equal_is_all_ones() {
        let mut rng = RngStream::new(40);
        let mut bank = PrototypeBank::init(2, 4, 0.99, &mut rng).unwrap();
        assert!(bank.imbalance_weights().data().iter().all(|&w| w == 1.0));
        bank.frequencies = Tensor::filled(vec![2, NUM_GRANULARITIES], 7i64);
        assert!(bank.imbalance_weights().data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn imbalance_weights_match_scalar_example() {
        let mut rng = RngStream::new(41);
        let mut bank = PrototypeBank::init(1, 4, 0.99, &mut rng).unwrap();
        // cells (0,1..3) get counts {0, 9, 9}
        bank.frequencies = Tensor::new(vec![1, 3], vec![0i64, 9, 9]).unwrap();
        let w = bank.imbalance_weights();
        assert_eq!(w.data()[0], 1.0);
        assert_eq!(w.data()[1], 0.1);
        assert_eq!(w.data()[2], 0.1);
    }

    #[test]
    fn imbalance_weights_are_strictly_antitone() {
        let mut rng = RngStream::new(42);
        for _ in 0..20 {
            let mut bank = PrototypeBank::init(3, 4, 0.99, &mut rng).unwrap();
            let freqs: Vec<i64> = (0..9).map(|_| rng.next_below(100) as i64).collect();
            bank.frequencies = Tensor::new(vec![3, 3], freqs.clone()).unwrap();
            let w = bank.imbalance_weights();
            let max = w.data().iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(max, 1.0);
            for i in 0..9 {
                for j in 0..9 {
                    if freqs[i] < freqs[j] {
                        assert!(w.data()[i] > w.data()[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_feature_set_has_zero_loss() {
        let mut rng = RngStream::new(43);
        let bank = PrototypeBank::init(2, 8, 0.99, &mut rng).unwrap();
        let fs = feature_set(vec![], vec![]);
        let out = gap_loss(&bank, &fs, 0.07).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grad_features.shape(), &[0, 8]);
    }

    #[test]
    fn feature_on_its_own_prototype_with_sharp_temperature() {
        // bank with orthonormal prototypes; the feature coincides with its
        // positive, so the loss collapses at small tau
        let d = 8;
        let rows: Vec<Vec<f64>> = (0..NUM_GRANULARITIES).map(|j| basis(d, j)).collect();
        let bank = unit_bank(rows, 1, 0.99);
        let fs = feature_set(vec![basis(d, 0)], vec![(0, 1)]);
        let out = gap_loss(&bank, &fs, 0.01).unwrap();
        assert!(out.loss < 1e-12, "loss = {}", out.loss);
    }

    #[test]
    fn three_prototype_scalar_oracle() {
        let d = 4;
        let rows: Vec<Vec<f64>> = (0..NUM_GRANULARITIES).map(|j| basis(d, j)).collect();
        let bank = unit_bank(rows, 1, 0.99);
        // cosines against the three prototypes: (1, 0, 0)
        let fs = feature_set(vec![basis(d, 0)], vec![(0, 1)]);
        let out = gap_loss(&bank, &fs, 0.07).unwrap();
        assert!((out.loss - 1.249749120973656e-6).abs() < 1e-12);
    }

    #[test]
    fn symmetric_cosines_give_log_cells() {
        // feature orthogonal to every prototype: all logits equal
        let d = 8;
        let rows: Vec<Vec<f64>> = (0..NUM_GRANULARITIES).map(|j| basis(d, j)).collect();
        let bank = unit_bank(rows, 1, 0.99);
        let fs = feature_set(vec![basis(d, 5)], vec![(0, 2)]);
        let out = gap_loss(&bank, &fs, 0.07).unwrap();
        let expected = (NUM_GRANULARITIES as f64).ln(); // weights are all 1
        assert!((out.loss - expected).abs() < 1e-9);
    }

    #[test]
    fn non_unit_prototype_is_an_invariant_violation() {
        let d = 4;
        let mut rows: Vec<Vec<f64>> = (0..NUM_GRANULARITIES).map(|j| basis(d, j)).collect();
        rows[1][1] = 1.5;
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        let bank = PrototypeBank {
            prototypes: Tensor::new(vec![1, NUM_GRANULARITIES, d], data).unwrap(),
            frequencies: Tensor::filled(vec![1, NUM_GRANULARITIES], 0i64),
            momentum: 0.99,
        };
        let fs = feature_set(vec![basis(d, 0)], vec![(0, 1)]);
        assert!(matches!(
            gap_loss(&bank, &fs, 0.07).unwrap_err(),
            Error::Internal(_)
        ));
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        let mut rng = RngStream::new(44);
        let (c, d) = (2, 6);
        let bank = PrototypeBank::init(c, d, 0.99, &mut rng).unwrap();
        let n = 5;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.next_normal()).collect())
            .collect();
        let coords: Vec<(usize, u8)> = (0..n)
            .map(|_| (rng.next_below(c as u64) as usize, 1 + rng.next_below(3) as u8))
            .collect();
        let fs = feature_set(rows, coords);
        let out = gap_loss(&bank, &fs, 0.07).unwrap();

        let h = 1e-5;
        for i in 0..fs.features.len() {
            let mut plus = fs.clone();
            plus.features.data_mut()[i] += h;
            let mut minus = fs.clone();
            minus.features.data_mut()[i] -= h;
            let lp = gap_loss(&bank, &plus, 0.07).unwrap().loss;
            let lm = gap_loss(&bank, &minus, 0.07).unwrap().loss;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = out.grad_features.data()[i];
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
            assert!(rel < 1e-5, "fd mismatch at {i}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn step_on_empty_bands_changes_nothing() {
        let mut rng = RngStream::new(45);
        let mut bank = PrototypeBank::init(2, 4, 0.99, &mut rng).unwrap();
        let before = bank.prototypes().data().to_vec();
        let features = Tensor::zeros(vec![4, 4, 4]);
        let bands = BoundaryBands {
            bands: Tensor::filled(vec![4, 4], 0u8),
            kernels: [3, 5, 7],
        };
        let mask = SemanticMask::new(Tensor::filled(vec![4, 4], 0), 2).unwrap();
        let out = gap_step(&mut bank, &features, &bands, &mask, 0.07).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_map.data().iter().all(|&g| g == 0.0));
        assert_eq!(bank.prototypes().data(), &before[..]);
    }

    #[test]
    fn step_counts_one_frequency_per_boundary_pixel() {
        let mut rng = RngStream::new(46);
        let mut bank = PrototypeBank::init(2, 4, 0.99, &mut rng).unwrap();
        let mut features = Tensor::zeros(vec![4, 4, 4]);
        features.row3_mut(2, 2).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        let mut band_grid = Tensor::filled(vec![4, 4], 0u8);
        band_grid.set2(2, 2, 3);
        let bands = BoundaryBands {
            bands: band_grid,
            kernels: [3, 5, 7],
        };
        let mask = SemanticMask::new(Tensor::filled(vec![4, 4], 1), 2).unwrap();
        let out = gap_step(&mut bank, &features, &bands, &mask, 0.07).unwrap();
        assert_eq!(out.num_features, 1);
        let freq_sum: i64 = bank.frequencies().data().iter().sum();
        assert_eq!(freq_sum, 1);
        assert_eq!(bank.frequencies().at2(1, 2), 1);
    }

    #[test]
    fn repeated_steps_on_frozen_features_tighten_the_loss() {
        let mut rng = RngStream::new(47);
        let (h, w, d) = (8, 8, 6);
        let mut bank = PrototypeBank::init(2, d, 0.9, &mut rng).unwrap();
        let grid_data: Vec<i32> = (0..h * w).map(|i| i32::from(i % w >= w / 2)).collect();
        let mask = SemanticMask::new(Tensor::new(vec![h, w], grid_data).unwrap(), 2).unwrap();
        let bands = granularity_bands(&mask, [3, 5, 7]).unwrap();
        let features = Tensor::new(
            vec![h, w, d],
            (0..h * w * d).map(|_| rng.next_normal()).collect(),
        )
        .unwrap();
        let first = gap_step(&mut bank, &features, &bands, &mask, 0.07)
            .unwrap()
            .loss;
        let second = gap_step(&mut bank, &features, &bands, &mask, 0.07)
            .unwrap()
            .loss;
        assert!(
            second <= first,
            "prototypes moved toward the features but loss rose: {first} -> {second}"
        );
    }

    #[test]
    fn bank_save_load_roundtrip_is_bit_exact() {
        let mut rng = RngStream::new(48);
        let mut bank = PrototypeBank::init(3, 8, 0.99, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..8).map(|_| rng.next_normal()).collect())
            .collect();
        let coords: Vec<(usize, u8)> = (0..10)
            .map(|_| (rng.next_below(3) as usize, 1 + rng.next_below(3) as u8))
            .collect();
        bank.update(&feature_set(rows, coords)).unwrap();

        let dir = tempfile::tempdir().unwrap();
        bank.save(dir.path()).unwrap();
        let back = PrototypeBank::load(dir.path()).unwrap();
        assert_eq!(back.prototypes().data(), bank.prototypes().data());
        assert_eq!(back.frequencies().data(), bank.frequencies().data());
        assert_eq!(back.momentum(), bank.momentum());
    }
}
