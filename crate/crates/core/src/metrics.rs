//! Alignment quality (sls) and the mean-warp time correction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalties::TimeGrid;
use crate::warping::interp_clamped;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlsReport {
    pub sls: f64,
    pub numerator: f64,
    pub denominator: f64,
}

/// Centred differences inside, one-sided at the two ends.
pub fn derivative(values: &[f64], points: &[f64]) -> Vec<f64> {
    let p = points.len();
    (0..p)
        .map(|j| {
            let (a, b) = match j {
                0 => (0, 1),
                _ if j == p - 1 => (p - 2, p - 1),
                _ => (j - 1, j + 1),
            };
            (values[b] - values[a]) / (points[b] - points[a])
        })
        .collect()
}

pub fn trapezoid(values: &[f64], points: &[f64]) -> f64 {
    points
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Integrated cross-sectional variance of first derivatives, summed over curves.
fn derivative_spread(curves: &DMatrix<f64>, points: &[f64]) -> f64 {
    let n = curves.nrows();
    let p = points.len();
    let derivs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = curves.row(i).iter().copied().collect();
            derivative(&row, points)
        })
        .collect();
    let mean: Vec<f64> = (0..p)
        .map(|j| derivs.iter().map(|d| d[j]).sum::<f64>() / n as f64)
        .collect();
    derivs
        .iter()
        .map(|d| {
            let sq: Vec<f64> = d.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).collect();
            trapezoid(&sq, points)
        })
        .sum()
}

pub fn sls(original: &DMatrix<f64>, registered: &DMatrix<f64>, grid: &TimeGrid) -> Result<SlsReport> {
    let p = grid.len();
    for m in [original, registered] {
        if m.ncols() != p {
            return Err(Error::DimensionMismatch {
                context: "sls curves",
                expected: p,
                found: m.ncols(),
            });
        }
    }
    if original.nrows() != registered.nrows() {
        return Err(Error::DimensionMismatch {
            context: "sls registered rows",
            expected: original.nrows(),
            found: registered.nrows(),
        });
    }
    if original.nrows() < 2 {
        return Err(Error::DegenerateSample {
            got: original.nrows(),
        });
    }
    let numerator = derivative_spread(registered, grid.points());
    let denominator = derivative_spread(original, grid.points());
    if denominator <= 0.0 {
        return Err(Error::DegenerateDenominator);
    }
    Ok(SlsReport {
        sls: numerator / denominator,
        numerator,
        denominator,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedRegistration {
    /// `t̃_j`, the mean warp at each original time.
    pub corrected_times: Vec<f64>,
    /// Registered values re-gridded to the original times.
    pub registered: DMatrix<f64>,
    /// Warps whose cross-sectional mean is the identity.
    pub warps: DMatrix<f64>,
}

/// Relabel registered time so the average warp becomes the identity.
///
/// Each registered value `X_i(h_i(t_j))` is attached to time `t̃_j`; values
/// at the original times come from linear interpolation over `t̃`.
pub fn mean_warp_correction(
    warps: &DMatrix<f64>,
    registered: &DMatrix<f64>,
    grid: &TimeGrid,
) -> Result<CorrectedRegistration> {
    let n = warps.nrows();
    let p = grid.len();
    if warps.ncols() != p || registered.ncols() != p || registered.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "mean warp correction",
            expected: p,
            found: warps.ncols(),
        });
    }
    let pts = grid.points();
    let mean = warps.row_mean();
    let labels: Vec<f64> = mean.iter().copied().collect();
    crate::penalties::validate_increasing(&labels)?;

    let mut out_reg = DMatrix::zeros(n, p);
    let mut out_warp = DMatrix::zeros(n, p);
    for i in 0..n {
        let vals: Vec<f64> = registered.row(i).iter().copied().collect();
        let h: Vec<f64> = warps.row(i).iter().copied().collect();
        for j in 0..p {
            out_reg[(i, j)] = interp_clamped(&labels, &vals, pts[j]);
            out_warp[(i, j)] = interp_clamped(&labels, &h, pts[j]);
        }
    }
    Ok(CorrectedRegistration {
        corrected_times: labels,
        registered: out_reg,
        warps: out_warp,
    })
}

/// Mean over curves of a set of warps, one per row.
pub fn mean_warp(warps: &DMatrix<f64>) -> DVector<f64> {
    warps.row_mean().transpose()
}
