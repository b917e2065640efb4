//! Simultaneous smoothing and registration of noisy curves.
//!
//! The latent curves `X_i` get a Gaussian q-distribution. The updates that
//! involve `f(h_i⁻¹)` use the approximations `E[f(h⁻¹)] ≈ μ_f(h⁻¹)` and
//! `E[f(h⁻¹) f(h⁻¹)ᵀ] ≈ Σ_X/N + μ_f(h⁻¹) μ_f(h⁻¹)ᵀ`. Because of them the
//! ELBO is not guaranteed to increase, so after `freeze_x_after` iterations
//! the latent curves are held at their q-means and the fit continues as a
//! noiseless one, whose ELBO is monitored.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::avb::{
    all_base_steps, avb_continue, avb_init, check_data, conjugate_sweep, max_abs_change, snapshot,
    AvbOptions, NoisyQ, StopReason, VBState, ELBO_MONOTONE_TOL,
};
use crate::error::{Error, Result};
use crate::linalg::{ones, spd_inverse, trace_of_product};
use crate::model::{data_rows, registered_curves, registration_precision, BasePriors, ModelConfig};
use crate::penalties::PenaltySet;
use crate::warping::compose_inverse;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyOptions {
    pub avb: AvbOptions,
    /// Iterations with q(X) updated before the latent curves are frozen.
    pub freeze_x_after: usize,
    /// Treat `σ_Y²` as known. Zero means the observations are the curves.
    pub known_noise_var: Option<f64>,
}

impl Default for NoisyOptions {
    fn default() -> Self {
        Self {
            avb: AvbOptions::default(),
            freeze_x_after: 5,
            known_noise_var: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoisyWarning {
    /// The monitored ELBO fell after the latent curves were frozen.
    ElboDecreaseAfterFreeze { step: usize, drop: f64 },
}

#[derive(Debug, Clone)]
pub struct NoisyFit {
    pub state: VBState,
    /// Number of smoothing iterations run before the freeze.
    pub smoothing_iterations: usize,
    pub warnings: Vec<NoisyWarning>,
}

/// `avb_init` plus q(X) at the observations and the noise blocks at their priors.
pub fn noisy_init(y: &DMatrix<f64>, config: &ModelConfig, pen: &PenaltySet) -> Result<VBState> {
    let mut state = avb_init(y, config, pen)?;
    let h = &config.hyper;
    let p = pen.p();
    state.noisy = Some(NoisyQ {
        mu_x: data_rows(y),
        sigma_x: DMatrix::zeros(p, p),
        a_y: h.a,
        b_y: h.b,
        c_eta_x: h.c,
        d_eta_x: h.d,
        c_lambda_x: h.c,
        d_lambda_x: h.d,
    });
    Ok(state)
}

fn noisy_q(state: &VBState) -> Result<&NoisyQ> {
    state
        .noisy
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("state has no noisy-model blocks".into()))
}

fn noisy_q_mut(state: &mut VBState) -> Result<&mut NoisyQ> {
    state
        .noisy
        .as_mut()
        .ok_or_else(|| Error::InvalidArgument("state has no noisy-model blocks".into()))
}

/// `μ_f(h_i⁻¹)` for every curve.
pub fn target_at_inverse_warps(state: &VBState, pen: &PenaltySet) -> Vec<DVector<f64>> {
    let pts = pen.grid.points();
    state
        .w_hat
        .iter()
        .map(|w| DVector::from_vec(compose_inverse(state.mu_f.as_slice(), pts, w.as_slice())))
        .collect()
}

fn x_precision(q: &NoisyQ, pen: &PenaltySet) -> DMatrix<f64> {
    &pen.p1_ginv * q.mean_eta_x() + &pen.p2_ginv * q.mean_lambda_x()
}

/// Shared covariance and per-curve mean of q(X_i).
pub fn update_q_x(state: &mut VBState, y: &DMatrix<f64>, pen: &PenaltySet, curve_index: usize) -> Result<()> {
    let f_inv = target_at_inverse_warps(state, pen);
    update_q_x_with(state, y, pen, &f_inv, Some(curve_index))
}

pub fn update_q_x_all(state: &mut VBState, y: &DMatrix<f64>, pen: &PenaltySet) -> Result<()> {
    let f_inv = target_at_inverse_warps(state, pen);
    update_q_x_with(state, y, pen, &f_inv, None)
}

fn update_q_x_with(
    state: &mut VBState,
    y: &DMatrix<f64>,
    pen: &PenaltySet,
    f_inv: &[DVector<f64>],
    only: Option<usize>,
) -> Result<()> {
    let p = pen.p();
    let z0 = state.z0_full();
    let z1 = state.mu_z1.clone();
    let q = noisy_q_mut(state)?;
    let prior = x_precision(q, pen);
    let tau = q.mean_inv_sigma_y();
    let prec = DMatrix::identity(p, p) * tau + &prior;
    let cov = spd_inverse(&prec).ok_or(Error::SingularPrecision { block: "X" })?;
    let curves: Vec<usize> = match only {
        Some(i) => vec![i],
        None => (0..y.nrows()).collect(),
    };
    for i in curves {
        let m = &f_inv[i] * z1[i] + DVector::from_element(p, z0[i]);
        let rhs = y.row(i).transpose() * tau + &prior * m;
        q.mu_x[i] = &cov * rhs;
    }
    q.sigma_x = cov;
    Ok(())
}

pub fn update_q_sigma_y(state: &mut VBState, y: &DMatrix<f64>, config: &ModelConfig) -> Result<()> {
    let (n, p) = y.shape();
    let q = noisy_q_mut(state)?;
    let tr = q.sigma_x.trace();
    let mut ss = 0.0;
    for i in 0..n {
        let yi = y.row(i).transpose();
        ss += yi.dot(&yi) - 2.0 * q.mu_x[i].dot(&yi) + tr + q.mu_x[i].norm_squared();
    }
    q.a_y = config.hyper.a + 0.5 * (n * p) as f64;
    q.b_y = config.hyper.b + 0.5 * ss;
    Ok(())
}

/// `Σ_i E[(X_i − z0_i 1 − z1_i f(h_i⁻¹))(·)ᵀ]` under the two approximations.
fn expected_residual_outer(state: &VBState, f_inv: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let q = noisy_q(state)?;
    let n = state.n_curves();
    let p = state.mu_f.len();
    let z0 = state.z0_full();
    let v0 = state.var_z0_full();
    let one = ones(p);
    let mut acc = DMatrix::zeros(p, p);
    for i in 0..n {
        let mx = &q.mu_x[i];
        let fi = &f_inv[i];
        let m = &one * z0[i] + fi * state.mu_z1[i];
        let s1 = state.var_z1[i] + state.mu_z1[i] * state.mu_z1[i];
        let ff = &q.sigma_x / n as f64 + fi * fi.transpose();
        acc += &q.sigma_x + mx * mx.transpose();
        acc -= (mx * m.transpose()) * 2.0;
        acc += (&one * one.transpose()) * (v0[i] + z0[i] * z0[i]);
        acc += (&one * fi.transpose()) * (2.0 * z0[i] * state.mu_z1[i]);
        acc += ff * s1;
    }
    Ok(acc)
}

pub fn update_q_eta_x(state: &mut VBState, config: &ModelConfig, pen: &PenaltySet) -> Result<()> {
    let f_inv = target_at_inverse_warps(state, pen);
    let outer = expected_residual_outer(state, &f_inv)?;
    let n = state.n_curves() as f64;
    let q = noisy_q_mut(state)?;
    q.c_eta_x = config.hyper.c + n;
    q.d_eta_x = config.hyper.d + 0.5 * trace_of_product(&outer, &pen.p1_ginv);
    Ok(())
}

pub fn update_q_lambda_x(state: &mut VBState, config: &ModelConfig, pen: &PenaltySet) -> Result<()> {
    let f_inv = target_at_inverse_warps(state, pen);
    let outer = expected_residual_outer(state, &f_inv)?;
    let n = state.n_curves() as f64;
    let p = pen.p() as f64;
    let q = noisy_q_mut(state)?;
    q.c_lambda_x = config.hyper.c + 0.5 * n * (p - 2.0);
    q.d_lambda_x = config.hyper.d + 0.5 * trace_of_product(&outer, &pen.p2_ginv);
    Ok(())
}

fn latent_matrix(state: &VBState) -> Result<DMatrix<f64>> {
    let q = noisy_q(state)?;
    let n = q.mu_x.len();
    let p = state.mu_f.len();
    Ok(DMatrix::from_fn(n, p, |i, j| q.mu_x[i][j]))
}

/// Smoothing updates for q(X) and the noise blocks.
fn smoothing_pass(
    state: &mut VBState,
    y: &DMatrix<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
    fixed_noise: bool,
) -> Result<()> {
    update_q_x_all(state, y, pen)?;
    if !fixed_noise {
        update_q_sigma_y(state, y, config)?;
    }
    update_q_eta_x(state, config, pen)?;
    update_q_lambda_x(state, config, pen)
}

/// One iteration of the adjusted algorithm. With `register = false` the base
/// functions stay at the identity, which gives a smoothing-only fit.
fn noisy_iteration(
    state: &mut VBState,
    y: &DMatrix<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
    opts: &NoisyOptions,
    register: bool,
) -> Result<()> {
    let n = y.nrows();
    let points = pen.grid.points();
    let latent = noisy_q(state)?.mu_x.clone();
    if register {
        let a_reg = registration_precision(config, pen, None)?;
        let priors = BasePriors::new(config, pen, n)?;
        all_base_steps(state, &latent, &a_reg, &priors, pen, &opts.avb.optimizer);
    }
    let xh = registered_curves(&latent, &state.w_hat, points);
    let q = noisy_q(state)?;
    let a = registration_precision(config, pen, Some((q.mean_eta_x(), q.mean_lambda_x())))?;
    conjugate_sweep(state, &xh, &a, config, pen)?;
    smoothing_pass(state, y, config, pen, opts.known_noise_var.is_some())
}

fn fix_noise(state: &mut VBState, y: &DMatrix<f64>, config: &ModelConfig, var: f64) -> Result<()> {
    let (n, p) = y.shape();
    let q = noisy_q_mut(state)?;
    q.a_y = config.hyper.a + 0.5 * (n * p) as f64;
    q.b_y = q.a_y * var;
    Ok(())
}

/// Fit the noisy-observation model.
pub fn avb_fit_noisy(
    y: &DMatrix<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
    opts: &NoisyOptions,
) -> Result<NoisyFit> {
    check_data(y, pen)?;
    config.validate(y.nrows())?;
    let noiseless = ModelConfig {
        noisy: false,
        ..config.clone()
    };
    if opts.known_noise_var == Some(0.0) {
        let mut state = noisy_init(y, config, pen)?;
        avb_continue(&mut state, y, &noiseless, pen, &opts.avb)?;
        let warnings = elbo_warnings(&state.elbo_trace, 0);
        return Ok(NoisyFit {
            state,
            smoothing_iterations: 0,
            warnings,
        });
    }
    let mut state = noisy_init(y, config, pen)?;
    if let Some(v) = opts.known_noise_var {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(format!("known noise variance must be ≥ 0, got {v}")));
        }
        fix_noise(&mut state, y, config, v)?;
    }
    let smoothing_iterations = if opts.freeze_x_after == 0 {
        smoothing_pass(&mut state, y, config, pen, opts.known_noise_var.is_some())?;
        0
    } else {
        let mut done = 0;
        for _ in 0..opts.freeze_x_after {
            let before = snapshot(&state);
            noisy_iteration(&mut state, y, config, pen, opts, true)?;
            state.iterations += 1;
            done += 1;
            if max_abs_change(&before, &snapshot(&state)) < opts.avb.stop.tol {
                break;
            }
        }
        done
    };
    let start = state.elbo_trace.len();
    let frozen = latent_matrix(&state)?;
    avb_continue(&mut state, &frozen, &noiseless, pen, &opts.avb)?;
    let warnings = elbo_warnings(&state.elbo_trace, start);
    Ok(NoisyFit {
        state,
        smoothing_iterations,
        warnings,
    })
}

fn elbo_warnings(trace: &[f64], start: usize) -> Vec<NoisyWarning> {
    trace[start..]
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] - w[0] < -ELBO_MONOTONE_TOL)
        .map(|(k, w)| NoisyWarning::ElboDecreaseAfterFreeze {
            step: start + k + 1,
            drop: w[0] - w[1],
        })
        .collect()
}

/// Smooth each curve with the warps held at the identity. Returns the q-means
/// of the latent curves and the state they came from.
pub fn presmooth(
    y: &DMatrix<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
    opts: &NoisyOptions,
) -> Result<(DMatrix<f64>, VBState)> {
    check_data(y, pen)?;
    config.validate(y.nrows())?;
    let mut state = noisy_init(y, config, pen)?;
    if let Some(v) = opts.known_noise_var.filter(|v| *v > 0.0) {
        fix_noise(&mut state, y, config, v)?;
    }
    let budget = opts.avb.stop.max_iters;
    let mut reason = StopReason::MaxIters;
    for _ in 0..budget {
        let before = snapshot(&state);
        let before_x = latent_matrix(&state)?;
        noisy_iteration(&mut state, y, config, pen, opts, false)?;
        state.iterations += 1;
        let dx = (latent_matrix(&state)? - before_x).amax();
        if max_abs_change(&before, &snapshot(&state)).max(dx) < opts.avb.stop.tol {
            reason = StopReason::ParameterChange;
            break;
        }
    }
    state.stop_reason = Some(reason);
    Ok((latent_matrix(&state)?, state))
}

/// Smooth first, then register the smoothed curves with the noiseless model.
pub fn presmooth_then_register(
    y: &DMatrix<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
    opts: &NoisyOptions,
) -> Result<(DMatrix<f64>, VBState)> {
    let (smoothed, _) = presmooth(y, config, pen, opts)?;
    let noiseless = ModelConfig {
        noisy: false,
        ..config.clone()
    };
    let fit = crate::avb::avb_fit(&smoothed, &noiseless, pen, &opts.avb)?;
    Ok((smoothed, fit))
}
