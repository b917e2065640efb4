//! Synthetic curve families with known warps, shifts and scales.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalties::TimeGrid;
use crate::warping::interp_clamped;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimKind {
    /// Equal mixture of three Gaussian densities at 1/4, 1/2, 3/4 of the domain.
    Gauss3mix,
    /// Two broad bumps of unequal height.
    ShiftedTarget,
}

impl std::str::FromStr for SimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss3mix" => Ok(Self::Gauss3mix),
            "shifted-target" => Ok(Self::ShiftedTarget),
            other => Err(Error::InvalidArgument(format!("unknown simulation kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub kind: SimKind,
    pub n_curves: usize,
    pub noise_sd: f64,
    pub seed: u64,
    /// Standard deviations of the two cosine coefficients of each base function.
    pub warp_sd: [f64; 2],
    pub z0_sd: f64,
    pub z1_sd: f64,
}

impl SimOptions {
    pub fn new(kind: SimKind, n_curves: usize, noise_sd: f64, seed: u64) -> Self {
        Self {
            kind,
            n_curves,
            noise_sd,
            seed,
            warp_sd: [0.2, 0.1],
            z0_sd: 0.1,
            z1_sd: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub grid: TimeGrid,
    /// Observed curves, one per row (noise included).
    pub curves: DMatrix<f64>,
    pub noiseless: DMatrix<f64>,
    /// True warps `h_i(t_j)`, one per row.
    pub warps: DMatrix<f64>,
    /// Discrete base functions reproducing the true warps at the knots.
    pub bases: DMatrix<f64>,
    pub template: DVector<f64>,
    pub z0: DVector<f64>,
    pub z1: DVector<f64>,
}

pub fn template_value(kind: SimKind, u: f64) -> f64 {
    match kind {
        SimKind::Gauss3mix => {
            let s = 0.06;
            let norm = 1.0 / (s * (2.0 * std::f64::consts::PI).sqrt());
            [0.25, 0.5, 0.75]
                .iter()
                .map(|c| {
                    let z = (u - c) / s;
                    norm * (-0.5 * z * z).exp() / 3.0
                })
                .sum()
        }
        SimKind::ShiftedTarget => {
            let s2 = 2.0 * 0.1 * 0.1;
            3.0 * (-(u - 0.35).powi(2) / s2).exp() + 2.0 * (-(u - 0.7).powi(2) / s2).exp()
        }
    }
}

/// Evaluate a smooth warp `[t1, tp] → [t1, tp]` with log-derivative
/// `a1 cos(πu) + a2 cos(2πu)` on a fine grid.
fn fine_warp(a: [f64; 2], lo: f64, hi: f64, m: usize) -> (Vec<f64>, Vec<f64>) {
    let pi = std::f64::consts::PI;
    let us: Vec<f64> = (0..m).map(|k| k as f64 / (m - 1) as f64).collect();
    let rate: Vec<f64> = us
        .iter()
        .map(|u| (a[0] * (pi * u).cos() + a[1] * (2.0 * pi * u).cos()).exp())
        .collect();
    let mut cum = vec![0.0; m];
    for k in 1..m {
        cum[k] = cum[k - 1] + 0.5 * (rate[k] + rate[k - 1]) * (us[k] - us[k - 1]);
    }
    let total = cum[m - 1];
    let ts = us.iter().map(|u| lo + (hi - lo) * u).collect();
    let hs = cum.iter().map(|c| lo + (hi - lo) * c / total).collect();
    (ts, hs)
}

pub fn simulate_dataset(grid: &TimeGrid, opts: &SimOptions) -> Result<SimulatedData> {
    let n = opts.n_curves;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 curves, got {n}")));
    }
    let p = grid.len();
    let pts = grid.points();
    let (lo, hi) = (grid.first(), grid.last());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    let mut z0 = DVector::from_fn(n, |_, _| opts.z0_sd * std.sample(&mut rng));
    let mean = z0.mean();
    z0.add_scalar_mut(-mean);
    let z1 = DVector::from_fn(n, |_, _| 1.0 + opts.z1_sd * std.sample(&mut rng));

    let u_of = |t: f64| (t - lo) / (hi - lo);
    let template = DVector::from_iterator(p, pts.iter().map(|&t| template_value(opts.kind, u_of(t))));

    let mut warps = DMatrix::zeros(n, p);
    let mut bases = DMatrix::zeros(n, p - 1);
    let mut noiseless = DMatrix::zeros(n, p);
    let mut curves = DMatrix::zeros(n, p);
    let fine = 20 * p;
    for i in 0..n {
        let a = [
            opts.warp_sd[0] * std.sample(&mut rng),
            opts.warp_sd[1] * std.sample(&mut rng),
        ];
        let (ts, hs) = fine_warp(a, lo, hi, fine);
        let mut h: Vec<f64> = pts.iter().map(|&t| interp_clamped(&ts, &hs, t)).collect();
        h[0] = lo;
        h[p - 1] = hi;
        for j in 0..p {
            warps[(i, j)] = h[j];
            // X_i(s) = z0 + z1 f(h⁻¹(s))
            let inv = interp_clamped(&hs, &ts, pts[j]);
            let x = z0[i] + z1[i] * template_value(opts.kind, u_of(inv));
            noiseless[(i, j)] = x;
            let eps = if opts.noise_sd > 0.0 {
                opts.noise_sd * std.sample(&mut rng)
            } else {
                0.0
            };
            curves[(i, j)] = x + eps;
        }
        for k in 0..p - 1 {
            bases[(i, k)] = ((h[k + 1] - h[k]) / (pts[k + 1] - pts[k])).ln();
        }
    }
    Ok(SimulatedData {
        grid: grid.clone(),
        curves,
        noiseless,
        warps,
        bases,
        template,
        z0,
        z1,
    })
}
