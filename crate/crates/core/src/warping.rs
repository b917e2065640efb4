//! Monotone warps built from base functions, with endpoint projection,
//! piecewise-linear inversion and evaluation at warped times.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::penalties::TimeGrid;

/// Absolute slack allowed on the required endpoint value.
pub const ENDPOINT_TOL: f64 = 1e-9;

/// Relative slack on domain checks, so that rounding in `h(t_p)` is not an error.
const DOMAIN_RTOL: f64 = 1e-9;

/// Cumulative warp on `points` from a base vector of length `points.len() - 1`.
///
/// `h_1 = t_1`, `h_j = t_1 + Σ_{k=2}^{j} (t_k − t_{k−1}) exp(w_{k−1})`.
pub fn warp_values(w: &[f64], points: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len() + 1, points.len());
    let mut h = Vec::with_capacity(points.len());
    let mut acc = points[0];
    h.push(acc);
    for k in 1..points.len() {
        acc += (points[k] - points[k - 1]) * w[k - 1].exp();
        h.push(acc);
    }
    h
}

/// Shift `w` by a constant so that the induced warp ends at `end_value`.
pub fn project_to_end(w: &[f64], points: &[f64], end_value: f64) -> Vec<f64> {
    let t1 = points[0];
    let span: f64 = points
        .windows(2)
        .zip(w)
        .map(|(pair, wk)| (pair[1] - pair[0]) * wk.exp())
        .sum();
    let shift = (span / (end_value - t1)).ln();
    w.iter().map(|v| v - shift).collect()
}

pub fn project_endpoint(w: &DVector<f64>, grid: &TimeGrid) -> DVector<f64> {
    DVector::from_vec(project_to_end(w.as_slice(), grid.points(), grid.last()))
}

pub fn warp_from_base(w: &DVector<f64>, grid: &TimeGrid) -> Result<DVector<f64>> {
    if w.len() + 1 != grid.len() {
        return Err(Error::DimensionMismatch {
            context: "base function",
            expected: grid.len() - 1,
            found: w.len(),
        });
    }
    let h = warp_values(w.as_slice(), grid.points());
    let end = h[h.len() - 1];
    if (end - grid.last()).abs() > ENDPOINT_TOL {
        return Err(Error::EndpointViolation {
            expected: grid.last(),
            found: end,
        });
    }
    Ok(DVector::from_vec(h))
}

/// Warp of an already projected base function, pinning the end exactly.
pub(crate) fn warp_projected(w: &[f64], points: &[f64]) -> Vec<f64> {
    warp_ending_at(w, points, points[points.len() - 1])
}

/// Warp of a base function projected to end at `end`, pinning that end exactly.
pub(crate) fn warp_ending_at(w: &[f64], points: &[f64], end: f64) -> Vec<f64> {
    let mut h = warp_values(w, points);
    let n = h.len();
    h[n - 1] = end;
    h
}

/// Piecewise-linear interpolant of `(xs, ys)` at `q`, with `xs` increasing.
pub fn interp(xs: &[f64], ys: &[f64], q: f64) -> Result<f64> {
    let n = xs.len();
    let lo = xs[0];
    let hi = xs[n - 1];
    let slack = DOMAIN_RTOL * (hi - lo).abs().max(f64::MIN_POSITIVE);
    if !(q >= lo - slack && q <= hi + slack) {
        return Err(Error::QueryOutOfDomain { query: q, lo, hi });
    }
    Ok(interp_clamped(xs, ys, q))
}

/// Same as [`interp`] without the domain check; queries are clamped to the ends.
pub(crate) fn interp_clamped(xs: &[f64], ys: &[f64], q: f64) -> f64 {
    let n = xs.len();
    if q <= xs[0] {
        return ys[0];
    }
    if q >= xs[n - 1] {
        return ys[n - 1];
    }
    // first index with xs[k] > q; q lies in [xs[k-1], xs[k])
    let k = xs.partition_point(|&x| x <= q);
    let (x0, x1) = (xs[k - 1], xs[k]);
    let (y0, y1) = (ys[k - 1], ys[k]);
    if q == x0 {
        return y0;
    }
    y0 + (q - x0) / (x1 - x0) * (y1 - y0)
}

/// Slope of the interpolant of `(xs, ys)` on the cell holding `q`.
pub(crate) fn cell_slope(xs: &[f64], ys: &[f64], q: f64) -> f64 {
    let n = xs.len();
    let k = xs.partition_point(|&x| x <= q).clamp(1, n - 1);
    (ys[k] - ys[k - 1]) / (xs[k] - xs[k - 1])
}

pub fn eval_linear(values: &DVector<f64>, grid: &TimeGrid, query: f64) -> Result<f64> {
    check_len(values.len(), grid.len(), "curve values")?;
    interp(grid.points(), values.as_slice(), query)
}

pub fn invert_warp(h: &DVector<f64>, grid: &TimeGrid, queries: &[f64]) -> Result<Vec<f64>> {
    check_len(h.len(), grid.len(), "warp values")?;
    queries
        .iter()
        .map(|&q| interp(h.as_slice(), grid.points(), q))
        .collect()
}

pub fn apply_warp(x: &DVector<f64>, grid: &TimeGrid, h: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(x.len(), grid.len(), "curve values")?;
    check_len(h.len(), grid.len(), "warp values")?;
    let vals = h
        .iter()
        .map(|&q| interp(grid.points(), x.as_slice(), q))
        .collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(vals))
}

/// `x ∘ h` for a projected base `w`, without domain errors.
pub(crate) fn register_curve(x: &[f64], points: &[f64], w: &[f64]) -> Vec<f64> {
    let h = warp_projected(w, points);
    h.iter().map(|&q| interp_clamped(points, x, q)).collect()
}

/// Matrix `R` with `R x = x ∘ h` for every curve `x` on the grid.
pub(crate) fn registration_matrix(points: &[f64], w: &[f64]) -> DMatrix<f64> {
    let h = warp_projected(w, points);
    let p = points.len();
    let mut r = DMatrix::zeros(p, p);
    for (j, &q) in h.iter().enumerate() {
        if q <= points[0] {
            r[(j, 0)] = 1.0;
        } else if q >= points[p - 1] {
            r[(j, p - 1)] = 1.0;
        } else {
            let k = points.partition_point(|&x| x <= q);
            let u = (q - points[k - 1]) / (points[k] - points[k - 1]);
            r[(j, k - 1)] = 1.0 - u;
            r[(j, k)] += u;
        }
    }
    r
}

/// `v ∘ h⁻¹` on the grid for a projected base `w`: the values `v` are taken at
/// the registered times that map to each grid point.
pub(crate) fn compose_inverse(values: &[f64], points: &[f64], w: &[f64]) -> Vec<f64> {
    let h = warp_projected(w, points);
    points
        .iter()
        .map(|&t| interp_clamped(points, values, interp_clamped(&h, points, t)))
        .collect()
}

fn check_len(found: usize, expected: usize, context: &'static str) -> Result<()> {
    if found != expected {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
