//! Model configuration, latent state and the log-density pieces shared by the
//! variational fit and the sampler.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{quad_form, spd_inverse, spd_inverse_logdet};
use crate::penalties::PenaltySet;
use crate::warping::{cell_slope, interp_clamped, register_curve, warp_ending_at};

/// Shape/rate pairs for the inverse-gamma (a, b) and gamma (c, d) priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            a: 1e-3,
            b: 1e-3,
            c: 1e-3,
            d: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaW {
    Global(f64),
    PerCurve(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub gamma_r: f64,
    pub gamma_w: GammaW,
    pub lambda_w: f64,
    pub hyper: Hyperparams,
    pub noisy: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gamma_r: 1.0,
            gamma_w: GammaW::Global(1.0),
            lambda_w: 1.0,
            hyper: Hyperparams::default(),
            noisy: false,
        }
    }
}

impl ModelConfig {
    pub fn gamma_w_for(&self, curve: usize) -> f64 {
        match &self.gamma_w {
            GammaW::Global(g) => *g,
            GammaW::PerCurve(v) => v[curve],
        }
    }

    pub fn validate(&self, n_curves: usize) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("gamma_r", self.gamma_r)?;
        positive("lambda_w", self.lambda_w)?;
        match &self.gamma_w {
            GammaW::Global(g) => positive("gamma_w", *g)?,
            GammaW::PerCurve(v) => {
                if v.len() != n_curves {
                    return Err(Error::DimensionMismatch {
                        context: "per-curve gamma_w",
                        expected: n_curves,
                        found: v.len(),
                    });
                }
                for g in v {
                    positive("gamma_w", *g)?;
                }
            }
        }
        let h = &self.hyper;
        positive("a", h.a)?;
        positive("b", h.b)?;
        positive("c", h.c)?;
        positive("d", h.d)
    }
}

/// Extra latent blocks of the noisy-observation model.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyLatent {
    pub x: Vec<DVector<f64>>,
    pub sigma_y_sq: f64,
    pub eta_x: f64,
    pub lambda_x: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub w: Vec<DVector<f64>>,
    /// All N shifts; the last is always minus the sum of the others.
    pub z0: DVector<f64>,
    pub z1: DVector<f64>,
    pub f: DVector<f64>,
    pub sigma_z0_sq: f64,
    pub sigma_z1_sq: f64,
    pub eta_f: f64,
    pub lambda_f: f64,
    pub noisy: Option<NoisyLatent>,
}

impl LatentState {
    pub fn n_curves(&self) -> usize {
        self.w.len()
    }

    /// Reset the last shift so the shifts sum to zero.
    pub fn recenter_z0(&mut self) {
        let n = self.z0.len();
        let head: f64 = self.z0.rows(0, n - 1).sum();
        self.z0[n - 1] = -head;
    }
}

/// Curves the registration kernel acts on: the data itself, or latent `X` in noisy mode.
pub fn registered_curves(curves: &[DVector<f64>], w: &[DVector<f64>], points: &[f64]) -> Vec<DVector<f64>> {
    curves
        .iter()
        .zip(w)
        .map(|(x, wi)| DVector::from_vec(register_curve(x.as_slice(), points, wi.as_slice())))
        .collect()
}

pub fn data_rows(data: &DMatrix<f64>) -> Vec<DVector<f64>> {
    (0..data.nrows())
        .map(|i| data.row(i).transpose())
        .collect()
}

/// Precision of the registration prior: `γ_R Σ⁻¹`, or `(γ_R⁻¹Σ + Σ_X)⁻¹` when
/// `(η_X, λ_X)` are given.
pub fn registration_precision(
    config: &ModelConfig,
    pen: &PenaltySet,
    noise: Option<(f64, f64)>,
) -> Result<DMatrix<f64>> {
    match noise {
        None => Ok(&pen.sigma_inv * config.gamma_r),
        Some((eta_x, lambda_x)) => {
            let cov = &pen.sigma / config.gamma_r + &pen.p1 / eta_x + &pen.p2 / lambda_x;
            spd_inverse(&cov).ok_or(Error::SingularPrecision {
                block: "registration",
            })
        }
    }
}

/// `−½ rᵀ A r` with `r = xh − z0·1 − z1·f`.
pub fn log_registration_kernel(
    xh: &DVector<f64>,
    z0: f64,
    z1: f64,
    f: &DVector<f64>,
    precision: &DMatrix<f64>,
) -> Result<f64> {
    let p = precision.nrows();
    for (len, context) in [(xh.len(), "registered curve"), (f.len(), "target")] {
        if len != p {
            return Err(Error::DimensionMismatch {
                context,
                expected: p,
                found: len,
            });
        }
    }
    let r = xh - f * z1 - DVector::from_element(p, z0);
    Ok(-0.5 * quad_form(&r, precision))
}

/// Base-function prior precisions, one factorization per distinct `γ_w`.
#[derive(Debug, Clone)]
pub struct BasePriors {
    precisions: Vec<DMatrix<f64>>,
    covariances: Vec<DMatrix<f64>>,
    logdets: Vec<f64>,
    index: Vec<usize>,
}

impl BasePriors {
    pub fn new(config: &ModelConfig, pen: &PenaltySet, n_curves: usize) -> Result<Self> {
        let mut slot: HashMap<u64, usize> = HashMap::new();
        let mut precisions = Vec::new();
        let mut covariances = Vec::new();
        let mut logdets = Vec::new();
        let mut index = Vec::with_capacity(n_curves);
        for i in 0..n_curves {
            let g = config.gamma_w_for(i);
            let k = match slot.get(&g.to_bits()) {
                Some(&k) => k,
                None => {
                    let cov = &pen.sigma_base / g + &pen.pw / config.lambda_w;
                    let (inv, logdet) = spd_inverse_logdet(&cov)
                        .ok_or(Error::SingularPriorCovariance { gamma_w: g })?;
                    precisions.push(inv);
                    covariances.push(cov);
                    // log det of the precision
                    logdets.push(-logdet);
                    slot.insert(g.to_bits(), precisions.len() - 1);
                    precisions.len() - 1
                }
            };
            index.push(k);
        }
        Ok(Self {
            precisions,
            covariances,
            logdets,
            index,
        })
    }

    pub fn precision(&self, curve: usize) -> &DMatrix<f64> {
        &self.precisions[self.index[curve]]
    }

    pub fn covariance(&self, curve: usize) -> &DMatrix<f64> {
        &self.covariances[self.index[curve]]
    }

    pub fn log_det_precision(&self, curve: usize) -> f64 {
        self.logdets[self.index[curve]]
    }

    pub fn unique_count(&self) -> usize {
        self.precisions.len()
    }

    pub fn log_prior(&self, curve: usize, w: &DVector<f64>) -> f64 {
        -0.5 * quad_form(w, self.precision(curve))
    }
}

/// `−½ wᵀ(γ_{w_i}⁻¹Σ + λ_w⁻¹P_w)⁻¹ w` for curve `curve_index`.
pub fn log_base_prior(
    w: &DVector<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
    curve_index: usize,
) -> Result<f64> {
    let g = config.gamma_w_for(curve_index);
    if w.len() != pen.p() - 1 {
        return Err(Error::DimensionMismatch {
            context: "base function",
            expected: pen.p() - 1,
            found: w.len(),
        });
    }
    let cov = &pen.sigma_base / g + &pen.pw / config.lambda_w;
    let prec = spd_inverse(&cov).ok_or(Error::SingularPriorCovariance { gamma_w: g })?;
    Ok(-0.5 * quad_form(w, &prec))
}

pub(crate) fn log_inv_gamma_kernel(x: f64, a: f64, b: f64) -> f64 {
    -(a + 1.0) * x.ln() - b / x
}

pub(crate) fn log_gamma_kernel(x: f64, c: f64, d: f64) -> f64 {
    (c - 1.0) * x.ln() - d * x
}

/// Log prior of `f`, `z0`, `z1` and the variance/precision blocks.
pub(crate) fn log_hierarchy_prior(state: &LatentState, config: &ModelConfig, pen: &PenaltySet) -> f64 {
    let h = &config.hyper;
    let n = state.z0.len();
    let p = pen.p() as f64;
    let mut lp = 0.0;
    let s0 = state.sigma_z0_sq;
    for i in 0..n - 1 {
        lp += -0.5 * s0.ln() - 0.5 * state.z0[i] * state.z0[i] / s0;
    }
    let s1 = state.sigma_z1_sq;
    for i in 0..n {
        let d = state.z1[i] - 1.0;
        lp += -0.5 * s1.ln() - 0.5 * d * d / s1;
    }
    let f = &state.f;
    lp += state.eta_f.ln() + 0.5 * (p - 2.0) * state.lambda_f.ln()
        - 0.5 * (state.eta_f * quad_form(f, &pen.p1_ginv) + state.lambda_f * quad_form(f, &pen.p2_ginv));
    lp += log_inv_gamma_kernel(s0, h.a, h.b) + log_inv_gamma_kernel(s1, h.a, h.b);
    lp += log_gamma_kernel(state.eta_f, h.c, h.d) + log_gamma_kernel(state.lambda_f, h.c, h.d);
    lp
}

fn check_state(data: &DMatrix<f64>, state: &LatentState, pen: &PenaltySet) -> Result<()> {
    let n = data.nrows();
    let p = pen.p();
    let pairs = [
        (data.ncols(), p, "data columns"),
        (state.w.len(), n, "base functions"),
        (state.z0.len(), n, "z0"),
        (state.z1.len(), n, "z1"),
        (state.f.len(), p, "target"),
    ];
    for (found, expected, context) in pairs {
        if found != expected {
            return Err(Error::DimensionMismatch {
                context,
                expected,
                found,
            });
        }
    }
    for w in &state.w {
        if w.len() != p - 1 {
            return Err(Error::DimensionMismatch {
                context: "base function",
                expected: p - 1,
                found: w.len(),
            });
        }
    }
    Ok(())
}

/// Unnormalized log joint density of data and latents, up to an additive
/// constant that depends on neither.
///
/// In the noisy model `data` holds the observations `Y`; the latent curves `X`
/// enter through `N(X_i | ·, σ_Y²)` and the registration prior with covariance
/// `γ_R⁻¹Σ + Σ_X`.
pub fn log_joint(
    data: &DMatrix<f64>,
    state: &LatentState,
    config: &ModelConfig,
    pen: &PenaltySet,
) -> Result<f64> {
    check_state(data, state, pen)?;
    let n = data.nrows();
    let points = pen.grid.points();
    let priors = BasePriors::new(config, pen, n)?;
    let mut lp = log_hierarchy_prior(state, config, pen);
    for i in 0..n {
        lp += priors.log_prior(i, &state.w[i]);
    }
    match (&state.noisy, config.noisy) {
        (None, false) => {
            let a = registration_precision(config, pen, None)?;
            let rows = data_rows(data);
            let xh = registered_curves(&rows, &state.w, points);
            for i in 0..n {
                lp += log_registration_kernel(&xh[i], state.z0[i], state.z1[i], &state.f, &a)?;
            }
        }
        (Some(nl), true) => {
            if nl.x.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "latent curves",
                    expected: n,
                    found: nl.x.len(),
                });
            }
            let cov = &pen.sigma / config.gamma_r + &pen.p1 / nl.eta_x + &pen.p2 / nl.lambda_x;
            let (a, logdet_cov) = spd_inverse_logdet(&cov).ok_or(Error::SingularPrecision {
                block: "registration",
            })?;
            let xh = registered_curves(&nl.x, &state.w, points);
            let p = pen.p() as f64;
            for i in 0..n {
                lp += log_registration_kernel(&xh[i], state.z0[i], state.z1[i], &state.f, &a)?;
                lp += -0.5 * logdet_cov;
                let resid = data.row(i).transpose() - &nl.x[i];
                lp += -0.5 * p * nl.sigma_y_sq.ln() - 0.5 * resid.norm_squared() / nl.sigma_y_sq;
            }
            let h = &config.hyper;
            lp += log_inv_gamma_kernel(nl.sigma_y_sq, h.a, h.b);
            lp += log_gamma_kernel(nl.eta_x, h.c, h.d) + log_gamma_kernel(nl.lambda_x, h.c, h.d);
        }
        _ => {
            return Err(Error::InvalidArgument(
                "latent state and config disagree on the noise model".into(),
            ))
        }
    }
    Ok(lp)
}

/// The `w_i`-dependent part of the log joint for one curve:
/// `−½ (x∘h − m)ᵀ A (x∘h − m) − ½ wᵀ K⁻¹ w`.
pub struct WarpObjective<'a> {
    /// Grid the base function lives on; `h` maps it onto `[points[0], end]`.
    pub points: &'a [f64],
    /// Times at which `curve` is sampled.
    pub curve_points: &'a [f64],
    pub curve: &'a [f64],
    pub end: f64,
    pub mean: DVector<f64>,
    pub precision: &'a DMatrix<f64>,
    pub prior_precision: &'a DMatrix<f64>,
}

impl WarpObjective<'_> {
    /// Objective at a projected base vector.
    pub fn value(&self, w: &[f64]) -> f64 {
        let h = warp_ending_at(w, self.points, self.end);
        let xh: Vec<f64> = h.iter().map(|&q| interp_clamped(self.curve_points, self.curve, q)).collect();
        let r = DVector::from_vec(xh) - &self.mean;
        let wv = DVector::from_column_slice(w);
        -0.5 * quad_form(&r, self.precision) - 0.5 * quad_form(&wv, self.prior_precision)
    }

    /// Value and gradient with respect to the coordinates of a projected `w`,
    /// holding the interpolation cell of every warped time fixed.
    pub fn value_grad(&self, w: &[f64]) -> (f64, DVector<f64>) {
        let pts = self.points;
        let p = pts.len();
        let h = warp_ending_at(w, pts, self.end);
        let xh: Vec<f64> = h.iter().map(|&q| interp_clamped(self.curve_points, self.curve, q)).collect();
        let r = DVector::from_vec(xh) - &self.mean;
        let ar = self.precision * &r;
        let wv = DVector::from_column_slice(w);
        let kw = self.prior_precision * &wv;
        let value = -0.5 * r.dot(&ar) - 0.5 * wv.dot(&kw);

        // dF/dh_j = −(A r)_j · x'(h_j); h_j depends on w_m for m < j.
        let mut grad = DVector::zeros(p - 1);
        let mut tail = 0.0;
        for j in (1..p).rev() {
            tail += -ar[j] * cell_slope(self.curve_points, self.curve, h[j]);
            let m = j - 1;
            grad[m] = tail * (pts[m + 1] - pts[m]) * w[m].exp();
        }
        (value, grad - kw)
    }

    /// Value and gradient of `u ↦ F(project(u))` at a point `u` that is already projected.
    pub fn projected_value_grad(&self, w: &[f64]) -> (f64, DVector<f64>) {
        let (value, g) = self.value_grad(w);
        (value, project_gradient(&g, w, self.points))
    }
}

/// Chain rule through the endpoint projection: `g − π (1ᵀg)` with
/// `π_m ∝ Δ_m e^{w_m}`.
pub(crate) fn project_gradient(g: &DVector<f64>, w: &[f64], points: &[f64]) -> DVector<f64> {
    let weights: Vec<f64> = (0..w.len())
        .map(|m| (points[m + 1] - points[m]) * w[m].exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let gsum = g.sum();
    DVector::from_iterator(
        w.len(),
        g.iter().zip(&weights).map(|(gi, wi)| gi - wi / total * gsum),
    )
}
