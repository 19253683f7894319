//! Learning-rate schedules: closed-form cosine decay and a reduce-on-plateau
//! state machine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor of the cosine schedule as a fraction of the base rate.
pub const COSINE_FLOOR: f64 = 0.01;

/// Learning rate for 0-based `epoch` of `total` under cosine decay from
/// `base` at the first epoch to `base * COSINE_FLOOR` at the last.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let eta_min = base * COSINE_FLOOR;
    let t = epoch.min(total - 1) as f64 / (total - 1) as f64;
    eta_min + (base - eta_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlateauMode {
    /// Larger metric is better.
    Max,
    /// Smaller metric is better.
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub mode: PlateauMode,
    pub patience: usize,
    pub factor: f64,
    pub min_delta: f64,
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) || !(self.min_delta >= 0.0) {
            return Err(Error::Config(format!("invalid plateau scheduler {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    /// Multiplier applied to every group's base learning rate.
    pub scale: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub reductions: usize,
}

impl Default for PlateauState {
    fn default() -> Self {
        PlateauState {
            scale: 1.0,
            best: None,
            bad_epochs: 0,
            reductions: 0,
        }
    }
}

/// One end-of-epoch transition. An improvement beyond `min_delta` resets the
/// counter; once more than `patience` epochs pass without one, the scale is
/// multiplied by `factor` and the counter resets. Non-finite metrics never
/// count as improvements.
pub fn plateau_step(state: PlateauState, metric: f64, cfg: &PlateauConfig) -> PlateauState {
    let mut s = state;
    let improved = metric.is_finite()
        && match s.best {
            None => true,
            Some(b) => match cfg.mode {
                PlateauMode::Max => metric > b + cfg.min_delta,
                PlateauMode::Min => metric < b - cfg.min_delta,
            },
        };
    if improved {
        s.best = Some(metric);
        s.bad_epochs = 0;
    } else {
        s.bad_epochs += 1;
        if s.bad_epochs > cfg.patience {
            s.scale *= cfg.factor;
            s.reductions += 1;
            s.bad_epochs = 0;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const HALF: PlateauConfig = PlateauConfig {
        mode: PlateauMode::Max,
        patience: 4,
        factor: 0.5,
        min_delta: 1e-4,
    };

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 60), 1e-3);
        assert!(cosine_lr(1e-3, 59, 60) < 0.02 * 1e-3);
        assert!(cosine_lr(1e-3, 4, 5) < 0.02 * 1e-3);
        assert_eq!(cosine_lr(0.1, 0, 1), 0.1);
    }

    #[test]
    fn constant_metric_reduces_after_patience_plus_one_bad_epochs() {
        let mut s = PlateauState::default();
        let mut first_cut = None;
        for epoch in 1..=12 {
            s = plateau_step(s, 0.5, &HALF);
            if s.reductions == 1 && first_cut.is_none() {
                first_cut = Some(epoch);
            }
        }
        // Epoch 1 sets the best; epochs 2-6 are the five bad ones.
        assert_eq!(first_cut, Some(6));
        assert_eq!(s.reductions, 2);
        assert_eq!(s.scale, 0.25);
    }

    #[test]
    fn improving_sequence_never_reduces() {
        let mut s = PlateauState::default();
        for e in 0..30 {
            s = plateau_step(s, e as f64 * 0.01, &HALF);
        }
        assert_eq!(s.scale, 1.0);
    }

    #[test]
    fn sub_threshold_gain_is_not_improvement() {
        let s = plateau_step(PlateauState::default(), 0.5, &HALF);
        let s = plateau_step(s, 0.50005, &HALF);
        assert_eq!(s.bad_epochs, 1);
        assert_eq!(s.best, Some(0.5));
    }
}
