//! Benchmark error metrics: RMSE and MAE on depth in millimeters, iRMSE
//! and iMAE on inverse depth in 1/km, all over ground-truth pixels.

use super::DepthMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub irmse_per_km: f64,
    pub imae_per_km: f64,
    pub evaluated_pixels: usize,
}

/// Compare a prediction against ground truth over the pixels the ground
/// truth observes. A prediction of exactly zero at an evaluated pixel has
/// no inverse depth and is an error.
pub fn evaluate(pred: &DepthMap, gt: &DepthMap) -> Result<MetricsReport> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    let mut sq_mm = 0.0f64;
    let mut abs_mm = 0.0f64;
    let mut sq_inv = 0.0f64;
    let mut abs_inv = 0.0f64;
    let mut count = 0usize;
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        if g <= 0.0 {
            continue;
        }
        if p <= 0.0 {
            return Err(Error::invalid(format!(
                "prediction {p} at an evaluated pixel has no inverse depth"
            )));
        }
        let diff_mm = (p - g) * 1000.0;
        sq_mm += diff_mm * diff_mm;
        abs_mm += diff_mm.abs();
        // 1/km = 1000 / meters.
        let diff_inv = 1000.0 / p - 1000.0 / g;
        sq_inv += diff_inv * diff_inv;
        abs_inv += diff_inv.abs();
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoSupervision);
    }
    let n = count as f64;
    Ok(MetricsReport {
        rmse_mm: (sq_mm / n).sqrt(),
        mae_mm: abs_mm / n,
        irmse_per_km: (sq_inv / n).sqrt(),
        imae_per_km: abs_inv / n,
        evaluated_pixels: count,
    })
}
