//! Hardness-aware sampling.
//!
//! Every training image carries an EMA hardness score fed by its observed
//! losses; scores flush on a fixed iteration cadence. Each draw first
//! decides between uniform-random and hardness-proportional sampling by
//! comparing one uniform draw against a decaying threshold, then picks an
//! image accordingly (temperature softmax + inverse CDF in hardness mode).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Threshold decay family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Sharp transition around the midpoint; the adopted strategy.
    #[default]
    Sigmoid,
    /// Straight line from 1 at the start to 0 at the final iteration.
    Linear,
    /// Always 1: pure random sampling.
    None,
}

/// Threshold schedule: the probability of sampling uniformly at random
/// instead of by hardness.
#[derive(Clone, Copy, Debug)]
pub struct ScheduleState {
    pub kind: ScheduleKind,
    /// Decay steepness (sigmoid only).
    pub k: f64,
    /// Transition midpoint in iterations (sigmoid only).
    pub midpoint: u64,
    pub total_iters: u64,
}

impl ScheduleState {
    pub fn new(kind: ScheduleKind, k: f64, midpoint: u64, total_iters: u64) -> Result<Self> {
        if !k.is_finite() || k < 0.0 {
            return Err(Error::validation("k_has", "must be finite and >= 0"));
        }
        if total_iters == 0 {
            return Err(Error::validation("total_iters", "must be >= 1"));
        }
        Ok(ScheduleState {
            kind,
            k,
            midpoint,
            total_iters,
        })
    }

    /// Threshold value in [0, 1] at iteration `t`.
    pub fn threshold(&self, t: u64) -> f64 {
        match self.kind {
            ScheduleKind::Sigmoid => {
                let x = self.k * (t as f64 - self.midpoint as f64);
                1.0 / (1.0 + x.exp())
            }
            ScheduleKind::Linear => (1.0 - t as f64 / self.total_iters as f64).max(0.0),
            ScheduleKind::None => 1.0,
        }
    }
}

/// Per-image EMA hardness scores with pending accumulation buffers.
#[derive(Clone, Debug)]
pub struct HardnessTable {
    scores: Vec<f64>,
    initialized: Vec<bool>,
    pending_sum: Vec<f64>,
    pending_count: Vec<u64>,
    beta: f64,
    ema_period: u64,
    last_flush_iter: u64,
}

impl HardnessTable {
    pub fn new(n_images: usize, beta: f64, ema_period: u64) -> Result<Self> {
        if n_images == 0 {
            return Err(Error::validation("n_images", "must be >= 1"));
        }
        if !beta.is_finite() || beta <= 0.0 || beta >= 1.0 {
            return Err(Error::validation("beta_has", "must lie in (0, 1)"));
        }
        if ema_period == 0 {
            return Err(Error::validation("ema_period", "must be >= 1"));
        }
        Ok(HardnessTable {
            scores: vec![0.0; n_images],
            initialized: vec![false; n_images],
            pending_sum: vec![0.0; n_images],
            pending_count: vec![0; n_images],
            beta,
            ema_period,
            last_flush_iter: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Accumulates one observed loss; flushes all pending buffers into the
    /// EMA scores once `ema_period` iterations have passed since the last
    /// flush.
    pub fn record_loss(&mut self, image_id: usize, loss: f64, iter: u64) -> Result<()> {
        if image_id >= self.scores.len() {
            return Err(Error::IndexOutOfRange(format!(
                "image {} outside table of {} images",
                image_id,
                self.scores.len()
            )));
        }
        if !loss.is_finite() {
            return Err(Error::validation("loss", "must be finite"));
        }
        self.pending_sum[image_id] += loss;
        self.pending_count[image_id] += 1;
        if iter.saturating_sub(self.last_flush_iter) >= self.ema_period {
            self.flush(iter);
        }
        Ok(())
    }

    /// Folds pending means into the scores. An image's first-ever flush sets
    /// its score to the observed mean directly; images with no pending data
    /// keep their scores.
    pub fn flush(&mut self, iter: u64) {
        for i in 0..self.scores.len() {
            if self.pending_count[i] == 0 {
                continue;
            }
            let mean = self.pending_sum[i] / self.pending_count[i] as f64;
            self.scores[i] = if self.initialized[i] {
                self.beta * self.scores[i] + (1.0 - self.beta) * mean
            } else {
                mean
            };
            self.initialized[i] = true;
            self.pending_sum[i] = 0.0;
            self.pending_count[i] = 0;
        }
        self.last_flush_iter = iter;
    }

    /// Temperature softmax over the hardness scores.
    pub fn sampling_probs(&self, tau: f64) -> Result<Vec<f64>> {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(Error::validation("tau_has", "must be > 0"));
        }
        let max = self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = self
            .scores
            .iter()
            .map(|&h| ((h - max) / tau).exp())
            .collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        Ok(probs)
    }
}

/// How an image was chosen on a given iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Random,
    Hardness,
}

impl SampleMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SampleMode::Random => "random",
            SampleMode::Hardness => "hardness",
        }
    }
}

/// Draws an image index for iteration `t`.
///
/// One uniform draw `r` selects the mode (`r > threshold(t)` means
/// hardness); random mode consumes one more draw for the index, hardness
/// mode one more for the inverse-CDF position.
pub fn draw(
    table: &HardnessTable,
    schedule: &ScheduleState,
    tau: f64,
    t: u64,
    rng: &mut RngStream,
) -> Result<(usize, SampleMode)> {
    let r = rng.next_f64();
    if r > schedule.threshold(t) {
        let probs = table.sampling_probs(tau)?;
        let u = rng.next_f64();
        let mut cdf = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            cdf += p;
            if u < cdf {
                return Ok((i, SampleMode::Hardness));
            }
        }
        // floating-point shortfall in the final partial sum
        Ok((probs.len() - 1, SampleMode::Hardness))
    } else {
        let id = rng.next_below(table.len() as u64) as usize;
        Ok((id, SampleMode::Random))
    }
}

/// One simulated iteration of the sampling loop.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub iter: u64,
    pub threshold: f64,
    pub mode: SampleMode,
    pub image_id: usize,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "iter,threshold,mode,image_id";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.iter,
            self.threshold,
            self.mode.as_str(),
            self.image_id
        )
    }
}

/// Parameters of a sampling simulation.
#[derive(Clone, Copy, Debug)]
pub struct SimulationSpec {
    pub n_images: usize,
    pub n_iters: u64,
    pub tau: f64,
    pub beta: f64,
    pub ema_period: u64,
    pub seed: u64,
}

/// Runs the full record/flush/draw loop against a synthetic per-image loss
/// model (a deterministic function of image index and iteration).
pub fn simulate(
    schedule: &ScheduleState,
    spec: &SimulationSpec,
    loss_model: impl Fn(usize, u64) -> f64,
) -> Result<Vec<TraceRow>> {
    let mut table = HardnessTable::new(spec.n_images, spec.beta, spec.ema_period)?;
    let mut rng = RngStream::new(spec.seed);
    let mut trace = Vec::with_capacity(spec.n_iters as usize);
    for t in 0..spec.n_iters {
        let (image_id, mode) = draw(&table, schedule, spec.tau, t, &mut rng)?;
        table.record_loss(image_id, loss_model(image_id, t), t)?;
        trace.push(TraceRow {
            iter: t,
            threshold: schedule.threshold(t),
            mode,
            image_id,
        });
    }
    Ok(trace)
}
