//! Time grid and the roughness penalty matrices behind every prior in the model.
//!
//! `P1` covers the constant + linear span, `P2` the curvature complement. Both are
//! built from a second-difference operator weighted for non-uniform spacing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sym_pinv, symmetrized, PINV_RTOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::TooFewPoints {
                min: 3,
                got: points.len(),
            });
        }
        validate_increasing(&points)?;
        Ok(Self { points })
    }

    /// Evenly spaced grid on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, p: usize) -> Result<Self> {
        if p < 3 {
            return Err(Error::TooFewPoints { min: 3, got: p });
        }
        let step = (hi - lo) / (p - 1) as f64;
        let mut points: Vec<f64> = (0..p).map(|j| lo + step * j as f64).collect();
        points[p - 1] = hi;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.points[0]
    }

    pub fn last(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn spacings(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Points `t1..t_{p-1}` on which base functions live.
    pub fn base_points(&self) -> &[f64] {
        &self.points[..self.points.len() - 1]
    }
}

pub fn build_time_grid(points: Vec<f64>) -> Result<TimeGrid> {
    TimeGrid::new(points)
}

pub(crate) fn validate_increasing(points: &[f64]) -> Result<()> {
    for (index, t) in points.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::NonFiniteGrid { index });
        }
    }
    for k in 1..points.len() {
        if points[k] <= points[k - 1] {
            return Err(Error::NonMonotoneGrid { index: k });
        }
    }
    Ok(())
}

/// Which derivative the base-function smoothing penalty acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DerivativeOrder {
    First,
    #[default]
    Second,
}

impl DerivativeOrder {
    pub fn from_order(order: u8) -> Result<Self> {
        match order {
            1 => Ok(Self::First),
            2 => Ok(Self::Second),
            other => Err(Error::InvalidArgument(format!(
                "derivative order must be 1 or 2, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PenaltySet {
    pub grid: TimeGrid,
    pub p1: DMatrix<f64>,
    pub p2: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub p1_ginv: DMatrix<f64>,
    pub p2_ginv: DMatrix<f64>,
    pub sigma_inv: DMatrix<f64>,
    /// `Σ` restricted to the base grid `t1..t_{p-1}`.
    pub sigma_base: DMatrix<f64>,
    pub pw: DMatrix<f64>,
    pub order_w: DerivativeOrder,
}

impl PenaltySet {
    pub fn p(&self) -> usize {
        self.grid.len()
    }
}

struct Blocks {
    p1: DMatrix<f64>,
    p2: DMatrix<f64>,
    p2_ginv: DMatrix<f64>,
}

/// Weighted second differences: row k approximates x'' at interior point k+1.
fn second_difference(points: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let p = points.len();
    let rows = p.saturating_sub(2);
    let mut d = DMatrix::zeros(rows, p);
    let mut weights = DVector::zeros(rows);
    for k in 0..rows {
        let h0 = points[k + 1] - points[k];
        let h1 = points[k + 2] - points[k + 1];
        let s = 2.0 / (h0 + h1);
        d[(k, k)] = s / h0;
        d[(k, k + 1)] = -s * (1.0 / h0 + 1.0 / h1);
        d[(k, k + 2)] = s / h1;
        weights[k] = 0.5 * (h0 + h1);
    }
    (d, weights)
}

fn first_difference(points: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let p = points.len();
    let rows = p.saturating_sub(1);
    let mut d = DMatrix::zeros(rows, p);
    let mut weights = DVector::zeros(rows);
    for k in 0..rows {
        let h = points[k + 1] - points[k];
        d[(k, k)] = -1.0 / h;
        d[(k, k + 1)] = 1.0 / h;
        weights[k] = h;
    }
    (d, weights)
}

fn weighted_gram(d: &DMatrix<f64>, weights: &DVector<f64>) -> DMatrix<f64> {
    let mut wd = d.clone();
    for (k, w) in weights.iter().enumerate() {
        wd.row_mut(k).scale_mut(*w);
    }
    symmetrized(&(d.transpose() * wd))
}

/// Orthonormal basis of span{1, t} by Gram-Schmidt on centred times.
fn linear_basis(points: &[f64]) -> DMatrix<f64> {
    let p = points.len();
    let mut q = DMatrix::zeros(p, 2);
    let c = 1.0 / (p as f64).sqrt();
    let mean = points.iter().sum::<f64>() / p as f64;
    let centred: Vec<f64> = points.iter().map(|t| t - mean).collect();
    let norm = centred.iter().map(|v| v * v).sum::<f64>().sqrt();
    for j in 0..p {
        q[(j, 0)] = c;
        q[(j, 1)] = centred[j] / norm;
    }
    q
}

fn blocks(points: &[f64], which: &'static str) -> Result<Blocks> {
    let p = points.len();
    let q = linear_basis(points);
    let p1 = &q * q.transpose();
    let (d, w) = second_difference(points);
    let p2_ginv = weighted_gram(&d, &w);
    let (p2, rank) = sym_pinv(&p2_ginv, PINV_RTOL);
    if rank != p - 2 {
        return Err(Error::NumericalRankFailure {
            which,
            expected: p - 2,
            found: rank,
        });
    }
    Ok(Blocks { p1, p2, p2_ginv })
}

pub fn build_penalty_set(grid: &TimeGrid, order_w: DerivativeOrder) -> Result<PenaltySet> {
    let main = blocks(grid.points(), "P2")?;
    let sigma = &main.p1 + &main.p2;
    // The two ranges are orthogonal complements, so the inverse splits termwise.
    let sigma_inv = &main.p1 + &main.p2_ginv;

    let base = grid.base_points();
    let base_blocks = blocks(base, "P2 (base grid)")?;
    let sigma_base = &base_blocks.p1 + &base_blocks.p2;
    let pw = match order_w {
        DerivativeOrder::Second => base_blocks.p2.clone(),
        DerivativeOrder::First => {
            let (d1, w1) = first_difference(base);
            let gram = weighted_gram(&d1, &w1);
            let (pw, rank) = sym_pinv(&gram, PINV_RTOL);
            if rank != base.len() - 1 {
                return Err(Error::NumericalRankFailure {
                    which: "Pw (first derivative)",
                    expected: base.len() - 1,
                    found: rank,
                });
            }
            pw
        }
    };

    Ok(PenaltySet {
        grid: grid.clone(),
        p1_ginv: main.p1.clone(),
        p1: main.p1,
        p2: main.p2,
        sigma,
        p2_ginv: main.p2_ginv,
        sigma_inv,
        sigma_base,
        pw,
        order_w,
    })
}
