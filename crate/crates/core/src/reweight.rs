//! Per-sample importance reweighting from the main/SVAE loss gap.
//!
//! Both loss vectors are min-max rescaled within the mini-batch, the
//! clamped difference becomes the gap `d`, and weights fall linearly
//! from 1 to `1 - alpha` with the batch's largest gap pinned at the
//! bottom. Weights are plain numbers: they enter the objective as
//! constants and carry no gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReweightError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("loss vectors differ in length: {main} vs {svae}")]
    LengthMismatch { main: usize, svae: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("epoch {epoch} outside schedule range 0..={total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("alpha floor must lie in (0, 1], got {0}")]
    BadFloor(f64),
}

pub type Result<T> = std::result::Result<T, ReweightError>;

/// Everything the reweighting step derived for one mini-batch; kept for
/// audit logging and epoch reports.
#[derive(Debug, Clone)]
pub struct BatchWeights {
    pub main_losses: Vec<f64>,
    pub svae_losses: Vec<f64>,
    pub rescaled_main: Vec<f64>,
    pub rescaled_svae: Vec<f64>,
    pub gaps: Vec<f64>,
    pub weights: Vec<f64>,
    pub max_gap: f64,
    pub alpha: f64,
}

impl BatchWeights {
    /// Full pipeline: rescale both loss vectors, take the clamped gap,
    /// and convert to importance weights at the given `alpha`.
    pub fn compute(main_losses: &[f64], svae_losses: &[f64], alpha: f64) -> Result<Self> {
        let rescaled_main = minmax_rescale(main_losses)?;
        let rescaled_svae = minmax_rescale(svae_losses)?;
        if rescaled_main.len() != rescaled_svae.len() {
            return Err(ReweightError::LengthMismatch {
                main: rescaled_main.len(),
                svae: rescaled_svae.len(),
            });
        }
        let gaps: Vec<f64> = rescaled_main
            .iter()
            .zip(&rescaled_svae)
            .map(|(m, s)| (m - s).max(0.0))
            .collect();
        let weights = importance_weights(&gaps, alpha)?;
        let max_gap = gaps.iter().cloned().fold(0.0, f64::max);
        Ok(BatchWeights {
            main_losses: main_losses.to_vec(),
            svae_losses: svae_losses.to_vec(),
            rescaled_main,
            rescaled_svae,
            gaps,
            weights,
            max_gap,
            alpha,
        })
    }
}

/// Maps a vector affinely onto `[0, 1]` by its min and max. A constant
/// vector maps to all zeros: a batch with no spread carries no ranking
/// signal, so downstream weights stay at 1.
pub fn minmax_rescale(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(ReweightError::EmptyBatch);
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(ReweightError::NonFinite { index, value });
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; values.len()]);
    }
    let range = max - min;
    Ok(values.iter().map(|v| (v - min) / range).collect())
}

/// Clamped difference of the two independently rescaled loss vectors.
pub fn loss_gap(main_losses: &[f64], svae_losses: &[f64]) -> Result<Vec<f64>> {
    if main_losses.len() != svae_losses.len() {
        return Err(ReweightError::LengthMismatch {
            main: main_losses.len(),
            svae: svae_losses.len(),
        });
    }
    let m = minmax_rescale(main_losses)?;
    let s = minmax_rescale(svae_losses)?;
    Ok(m.iter().zip(&s).map(|(a, b)| (a - b).max(0.0)).collect())
}

/// `w_i = 1 - alpha * d_i / max(d)`, with all-ones when the batch has no
/// positive gap.
pub fn importance_weights(gaps: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if gaps.is_empty() {
        return Err(ReweightError::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ReweightError::AlphaOutOfRange(alpha));
    }
    let max_gap = gaps.iter().cloned().fold(0.0, f64::max);
    if max_gap == 0.0 {
        return Ok(vec![1.0; gaps.len()]);
    }
    Ok(gaps.iter().map(|d| 1.0 - alpha * (d / max_gap)).collect())
}

/// Granularity of the exponential decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayGranularity {
    #[default]
    PerEpoch,
    PerStep,
}

/// Exponential decay of `alpha` from 1 at epoch 0 down to `floor` at the
/// final epoch. An exponential cannot reach an exact zero endpoint, so
/// the decay targets a small configurable floor instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaSchedule {
    floor: f64,
    total_epochs: usize,
    rate: f64,
}

impl AlphaSchedule {
    pub fn new(floor: f64, total_epochs: usize) -> Result<Self> {
        if !(floor > 0.0 && floor <= 1.0) {
            return Err(ReweightError::BadFloor(floor));
        }
        let rate = if total_epochs == 0 {
            0.0
        } else {
            -floor.ln() / total_epochs as f64
        };
        Ok(AlphaSchedule {
            floor,
            total_epochs,
            rate,
        })
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    /// `alpha` at an integer epoch in `0..=total_epochs`.
    pub fn alpha_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(ReweightError::EpochOutOfRange {
                epoch,
                total: self.total_epochs,
            });
        }
        Ok((-self.rate * epoch as f64).exp())
    }

    /// `alpha` at a fractional position through training, for per-step
    /// decay. `progress` is `epoch + step_fraction`.
    pub fn alpha_at_progress(&self, progress: f64) -> Result<f64> {
        if !(0.0..=self.total_epochs as f64).contains(&progress) {
            return Err(ReweightError::EpochOutOfRange {
                epoch: progress.ceil() as usize,
                total: self.total_epochs,
            });
        }
        Ok((-self.rate * progress).exp())
    }
}
