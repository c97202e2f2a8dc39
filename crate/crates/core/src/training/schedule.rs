//! Plateau learning-rate schedule: halve the rate when the validation score
//! stops improving.

/// Learning rates never drop below this.
pub const LR_FLOOR: f64 = 1e-6;

/// Pure form over the whole score history (lower scores are better): when
/// the last `patience` evaluations all failed to strictly improve on the
/// best score seen before them, the rate is multiplied by `factor` and
/// clamped to the floor.
pub fn plateau_schedule(history: &[f64], lr: f64, patience: usize, factor: f64) -> f64 {
    assert!(patience >= 1, "patience must be at least 1");
    assert!(factor > 0.0 && factor < 1.0, "factor must lie in (0, 1)");
    let mut best = f64::INFINITY;
    let mut since_improve = 0usize;
    for &score in history {
        if score < best {
            best = score;
            since_improve = 0;
        } else {
            since_improve += 1;
        }
    }
    if since_improve >= patience {
        (lr * factor).max(LR_FLOOR)
    } else {
        lr
    }
}

/// Incremental tracker for use inside a training loop. Unlike the pure
/// form, the non-improvement counter resets after each reduction, so one
/// plateau triggers one reduction.
#[derive(Clone, Debug, Default)]
pub struct PlateauTracker {
    best: Option<f64>,
    evals_since_improve: u64,
}

impl PlateauTracker {
    pub fn new() -> Self {
        PlateauTracker::default()
    }

    pub fn resume(best: Option<f64>, evals_since_improve: u64) -> Self {
        PlateauTracker {
            best,
            evals_since_improve,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn evals_since_improve(&self) -> u64 {
        self.evals_since_improve
    }

    /// Record a validation score; returns the possibly reduced rate and
    /// whether this score is a new best.
    pub fn observe(&mut self, score: f64, lr: f64, patience: usize, factor: f64) -> (f64, bool) {
        let improved = self.best.map_or(true, |b| score < b);
        if improved {
            self.best = Some(score);
            self.evals_since_improve = 0;
            (lr, true)
        } else {
            self.evals_since_improve += 1;
            if self.evals_since_improve >= patience as u64 {
                self.evals_since_improve = 0;
                ((lr * factor).max(LR_FLOOR), false)
            } else {
                (lr, false)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_history_keeps_the_rate() {
        let lr = plateau_schedule(&[5.0, 4.0, 3.0, 2.0], 1e-3, 3, 0.5);
        assert_eq!(lr, 1e-3);
    }

    #[test]
    fn four_flat_epochs_halve_with_patience_three() {
        let lr = plateau_schedule(&[2.0, 2.1, 2.2, 2.0, 2.3], 1e-3, 3, 0.5);
        assert_eq!(lr, 5e-4);
    }

    #[test]
    fn floor_is_sticky() {
        let lr = plateau_schedule(&[1.0, 1.0, 1.0, 1.0], LR_FLOOR, 3, 0.5);
        assert_eq!(lr, LR_FLOOR);
    }

    #[test]
    fn tracker_fires_once_per_plateau() {
        let mut tracker = PlateauTracker::new();
        let mut lr = 1e-3;
        // First eval always improves.
        lr = tracker.observe(10.0, lr, 2, 0.5).0;
        assert_eq!(lr, 1e-3);
        lr = tracker.observe(11.0, lr, 2, 0.5).0;
        assert_eq!(lr, 1e-3);
        lr = tracker.observe(12.0, lr, 2, 0.5).0;
        assert_eq!(lr, 5e-4);
        // Counter reset: the next flat eval does not halve again.
        lr = tracker.observe(12.0, lr, 2, 0.5).0;
        assert_eq!(lr, 5e-4);
    }
}
