//! Adapted variational Bayes: closed-form updates for the conjugate blocks and
//! a numerical maximization step for each base function.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::linalg::{ones, quad_form, spd_inverse_logdet, trace_of_product};
use crate::model::{
    data_rows, registered_curves, registration_precision, BasePriors, GammaW, ModelConfig,
    WarpObjective,
};
use crate::penalties::PenaltySet;
use crate::warping::project_to_end;

/// Allowed per-step ELBO drop before a fit is flagged as non-monotone.
pub const ELBO_MONOTONE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ParameterChange,
    ElboChange,
    MaxIters,
}

/// Settings of the per-curve quasi-Newton maximizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub memory: usize,
    /// Largest coordinate change allowed on the first step.
    pub initial_step: f64,
    /// Also run the maximizer from the identity warp and keep the better end point.
    /// Guards against an early misalignment locking a curve onto the wrong peaks.
    pub identity_restart: bool,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            grad_tol: 1e-8,
            memory: 7,
            initial_step: 0.1,
            identity_restart: true,
        }
    }
}

/// One stage of a penalty schedule; `iters = None` runs the stage to convergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyPhase {
    pub gamma_r: f64,
    pub gamma_w: GammaW,
    pub iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AvbOptions {
    pub stop: StopRule,
    pub optimizer: OptimizerOptions,
    /// Empty means a single phase with the penalties of the model config.
    pub schedule: Vec<PenaltyPhase>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseStepStatus {
    Converged,
    MaxIters,
    /// No ascent step could be found; the incumbent was kept.
    LineSearchFailure,
}

/// Extra q-distribution parameters of the noisy-observation model.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyQ {
    pub mu_x: Vec<DVector<f64>>,
    /// Shared by all curves.
    pub sigma_x: DMatrix<f64>,
    pub a_y: f64,
    pub b_y: f64,
    pub c_eta_x: f64,
    pub d_eta_x: f64,
    pub c_lambda_x: f64,
    pub d_lambda_x: f64,
}

impl NoisyQ {
    pub fn mean_inv_sigma_y(&self) -> f64 {
        self.a_y / self.b_y
    }
    pub fn mean_sigma_y_sq(&self) -> f64 {
        self.b_y / (self.a_y - 1.0)
    }
    pub fn mean_eta_x(&self) -> f64 {
        self.c_eta_x / self.d_eta_x
    }
    pub fn mean_lambda_x(&self) -> f64 {
        self.c_lambda_x / self.d_lambda_x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VBState {
    pub mu_f: DVector<f64>,
    pub sigma_f: DMatrix<f64>,
    /// First N−1 shifts; the last is minus their sum.
    pub mu_z0: DVector<f64>,
    pub var_z0: DVector<f64>,
    pub mu_z1: DVector<f64>,
    pub var_z1: DVector<f64>,
    pub a_z0: f64,
    pub b_z0: f64,
    pub a_z1: f64,
    pub b_z1: f64,
    pub c_eta: f64,
    pub d_eta: f64,
    pub c_lambda: f64,
    pub d_lambda: f64,
    pub w_hat: Vec<DVector<f64>>,
    pub noisy: Option<NoisyQ>,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub stop_reason: Option<StopReason>,
    pub base_status: Vec<BaseStepStatus>,
}

impl VBState {
    pub fn n_curves(&self) -> usize {
        self.mu_z1.len()
    }

    /// All N shift means, including the dependent last one.
    pub fn z0_full(&self) -> DVector<f64> {
        let n = self.n_curves();
        let mut z = DVector::zeros(n);
        z.rows_mut(0, n - 1).copy_from(&self.mu_z0);
        z[n - 1] = -self.mu_z0.sum();
        z
    }

    pub fn var_z0_full(&self) -> DVector<f64> {
        let n = self.n_curves();
        let mut v = DVector::zeros(n);
        v.rows_mut(0, n - 1).copy_from(&self.var_z0);
        v[n - 1] = self.var_z0.sum();
        v
    }

    pub fn mean_eta_f(&self) -> f64 {
        self.c_eta / self.d_eta
    }
    pub fn mean_lambda_f(&self) -> f64 {
        self.c_lambda / self.d_lambda
    }
    pub fn mean_inv_sigma_z0(&self) -> f64 {
        self.a_z0 / self.b_z0
    }
    pub fn mean_inv_sigma_z1(&self) -> f64 {
        self.a_z1 / self.b_z1
    }

    /// Mean of the registration model for curve `i`: `μ_z0 1 + μ_z1 μ_f`.
    pub fn curve_mean(&self, i: usize) -> DVector<f64> {
        let z0 = self.z0_full();
        &self.mu_f * self.mu_z1[i] + DVector::from_element(self.mu_f.len(), z0[i])
    }

    /// Whether every recorded ELBO step respects the monotonicity tolerance.
    pub fn elbo_monotone(&self) -> bool {
        self.elbo_trace
            .windows(2)
            .all(|w| w[1] - w[0] >= -ELBO_MONOTONE_TOL)
    }
}

pub(crate) fn check_data(data: &DMatrix<f64>, pen: &PenaltySet) -> Result<()> {
    if data.ncols() != pen.p() {
        return Err(Error::InconsistentGrid(format!(
            "curves have {} values, grid has {} points",
            data.ncols(),
            pen.p()
        )));
    }
    if data.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 curves, got {}",
            data.nrows()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("data contain non-finite values".into()));
    }
    Ok(())
}

pub fn avb_init(data: &DMatrix<f64>, config: &ModelConfig, pen: &PenaltySet) -> Result<VBState> {
    check_data(data, pen)?;
    config.validate(data.nrows())?;
    let n = data.nrows();
    let p = pen.p();
    let h = &config.hyper;
    let mu_f = data.row_mean().transpose();
    Ok(VBState {
        mu_f,
        sigma_f: pen.sigma.clone(),
        mu_z0: DVector::zeros(n - 1),
        var_z0: DVector::zeros(n - 1),
        mu_z1: DVector::from_element(n, 1.0),
        var_z1: DVector::zeros(n),
        a_z0: h.a,
        b_z0: h.b,
        a_z1: h.a,
        b_z1: h.b,
        c_eta: h.c,
        d_eta: h.d,
        c_lambda: h.c,
        d_lambda: h.d,
        w_hat: vec![DVector::zeros(p - 1); n],
        noisy: None,
        elbo_trace: Vec::new(),
        iterations: 0,
        stop_reason: None,
        base_status: vec![BaseStepStatus::Converged; n],
    })
}

/// Maximize `F(project(u))` by limited-memory BFGS with Armijo backtracking,
/// starting from the projected incumbent. Never returns a worse point.
///
/// `precond` is an optional SPD matrix used as the initial inverse Hessian
/// (up to scale); the prior covariance of `w` makes a good one.
pub(crate) fn maximize_projected(
    obj: &WarpObjective<'_>,
    start: &[f64],
    end_value: f64,
    precond: Option<&DMatrix<f64>>,
    opts: &OptimizerOptions,
) -> (Vec<f64>, f64, BaseStepStatus) {
    let apply = |v: &DVector<f64>| match precond {
        Some(m) => m * v,
        None => v.clone(),
    };
    let pts = obj.points;
    let mut w = project_to_end(start, pts, end_value);
    let (mut val, mut g) = obj.projected_value_grad(&w);
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut improved = false;

    for _ in 0..opts.max_iters {
        if !val.is_finite() || g.amax() < opts.grad_tol {
            return (w, val, BaseStepStatus::Converged);
        }
        // Two-loop recursion on the minimization problem −F.
        let mut q = -&g;
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for idx in (0..k).rev() {
            let rho = 1.0 / y_hist[idx].dot(&s_hist[idx]);
            alphas[idx] = rho * s_hist[idx].dot(&q);
            q -= &y_hist[idx] * alphas[idx];
        }
        let mut dir = if k > 0 {
            let hy = apply(&y_hist[k - 1]);
            let gamma = s_hist[k - 1].dot(&y_hist[k - 1]) / y_hist[k - 1].dot(&hy);
            apply(&q) * gamma
        } else {
            let hq = apply(&q);
            let scale = opts.initial_step / hq.amax();
            hq * scale
        };
        for idx in 0..k {
            let rho = 1.0 / y_hist[idx].dot(&s_hist[idx]);
            let beta = rho * y_hist[idx].dot(&dir);
            dir += &s_hist[idx] * (alphas[idx] - beta);
        }
        // dir descends −F, so −dir ascends F.
        let mut ascent = -dir;
        let mut slope = g.dot(&ascent);
        if !(slope > 0.0) {
            s_hist.clear();
            y_hist.clear();
            let hg = apply(&g);
            ascent = &hg * (opts.initial_step / hg.amax());
            slope = g.dot(&ascent);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = w.iter().zip(ascent.iter()).map(|(a, d)| a + step * d).collect();
            let trial = project_to_end(&trial, pts, end_value);
            let tv = obj.value(&trial);
            if tv.is_finite() && tv >= val + 1e-4 * step * slope && tv > val {
                accepted = Some((trial, tv));
                break;
            }
            step *= 0.5;
        }
        let Some((w_new, v_new)) = accepted else {
            let status = if improved {
                BaseStepStatus::Converged
            } else {
                BaseStepStatus::LineSearchFailure
            };
            return (w, val, status);
        };
        improved = true;
        let (_, g_new) = obj.projected_value_grad(&w_new);
        let s = DVector::from_iterator(w.len(), w_new.iter().zip(&w).map(|(a, b)| a - b));
        let y = &g - &g_new;
        if s.dot(&y) > 1e-12 * s.norm() * y.norm() {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let gain = v_new - val;
        w = w_new;
        val = v_new;
        g = g_new;
        if gain <= 1e-14 * val.abs().max(1.0) {
            return (w, val, BaseStepStatus::Converged);
        }
    }
    (w, val, BaseStepStatus::MaxIters)
}

/// Base-function step for curve `i` against curve values `curve`.
pub(crate) fn base_step(
    state: &VBState,
    i: usize,
    curve: &[f64],
    reg_precision: &DMatrix<f64>,
    priors: &BasePriors,
    pen: &PenaltySet,
    opts: &OptimizerOptions,
) -> (DVector<f64>, BaseStepStatus) {
    let obj = WarpObjective {
        points: pen.grid.points(),
        curve_points: pen.grid.points(),
        curve,
        end: pen.grid.last(),
        mean: state.curve_mean(i),
        precision: reg_precision,
        prior_precision: priors.precision(i),
    };
    let incumbent = state.w_hat[i].as_slice();
    let before = obj.value(incumbent);
    let cov = Some(priors.covariance(i));
    let (mut w, mut val, mut status) = maximize_projected(&obj, incumbent, pen.grid.last(), cov, opts);
    if opts.identity_restart {
        let zero = vec![0.0; incumbent.len()];
        let (w2, v2, s2) = maximize_projected(&obj, &zero, pen.grid.last(), cov, opts);
        if v2 > val {
            (w, val, status) = (w2, v2, s2);
        }
    }
    if val >= before {
        (DVector::from_vec(w), status)
    } else {
        (state.w_hat[i].clone(), BaseStepStatus::LineSearchFailure)
    }
}

/// Maximize the w-dependent part of the log joint for one curve, with all
/// other parameters at their q-means.
pub fn maximize_base(
    state: &VBState,
    curve_index: usize,
    data: &DMatrix<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
    opts: &OptimizerOptions,
) -> Result<(DVector<f64>, BaseStepStatus)> {
    let a = registration_precision(config, pen, None)?;
    let priors = BasePriors::new(config, pen, data.nrows())?;
    let row = data.row(curve_index).transpose();
    Ok(base_step(state, curve_index, row.as_slice(), &a, &priors, pen, opts))
}

/// Run the base step for every curve in parallel.
pub(crate) fn all_base_steps(
    state: &mut VBState,
    curves: &[DVector<f64>],
    reg_precision: &DMatrix<f64>,
    priors: &BasePriors,
    pen: &PenaltySet,
    opts: &OptimizerOptions,
) {
    let results: Vec<(DVector<f64>, BaseStepStatus)> = (0..curves.len())
        .into_par_iter()
        .map(|i| base_step(state, i, curves[i].as_slice(), reg_precision, priors, pen, opts))
        .collect();
    for (i, (w, status)) in results.into_iter().enumerate() {
        state.w_hat[i] = w;
        state.base_status[i] = status;
    }
}

// ---- closed-form block updates; `xh` are the registered curves, `a` the
// ---- registration precision used by the conjugate blocks.

pub fn update_q_f(state: &mut VBState, xh: &[DVector<f64>], a: &DMatrix<f64>, pen: &PenaltySet) -> Result<()> {
    let n = xh.len();
    let p = pen.p();
    let z0 = state.z0_full();
    let mut scale = 0.0;
    let mut acc = DVector::zeros(p);
    for i in 0..n {
        scale += state.var_z1[i] + state.mu_z1[i] * state.mu_z1[i];
        acc += (&xh[i] - DVector::from_element(p, z0[i])) * state.mu_z1[i];
    }
    let prec = a * scale + &pen.p1_ginv * state.mean_eta_f() + &pen.p2_ginv * state.mean_lambda_f();
    let (cov, _) = spd_inverse_logdet(&prec).ok_or(Error::SingularPrecision { block: "f" })?;
    state.mu_f = &cov * (a * acc);
    state.sigma_f = cov;
    Ok(())
}

pub fn update_q_z0(state: &mut VBState, xh: &[DVector<f64>], a: &DMatrix<f64>) {
    let n = xh.len();
    let p = a.nrows();
    let a1 = a * ones(p);
    let one_a_one = a1.sum();
    let var = 1.0 / (state.mean_inv_sigma_z0() + 2.0 * one_a_one);
    for i in 0..n - 1 {
        let others: f64 = (0..n - 1).filter(|&j| j != i).map(|j| state.mu_z0[j]).sum();
        let v = &xh[i] - &xh[n - 1] + &state.mu_f * (state.mu_z1[n - 1] - state.mu_z1[i])
            - DVector::from_element(p, others);
        state.var_z0[i] = var;
        state.mu_z0[i] = var * v.dot(&a1);
    }
}

pub fn update_q_z1(state: &mut VBState, xh: &[DVector<f64>], a: &DMatrix<f64>) {
    let p = a.nrows();
    let z0 = state.z0_full();
    let second = &state.sigma_f + &state.mu_f * state.mu_f.transpose();
    let inv_s1 = state.mean_inv_sigma_z1();
    let var = 1.0 / (inv_s1 + trace_of_product(&second, a));
    let af = a * &state.mu_f;
    for (i, x) in xh.iter().enumerate() {
        let r = x - DVector::from_element(p, z0[i]);
        state.var_z1[i] = var;
        state.mu_z1[i] = var * (inv_s1 + af.dot(&r));
    }
}

pub fn update_q_eta_f(state: &mut VBState, config: &ModelConfig, pen: &PenaltySet) {
    let second = &state.sigma_f + &state.mu_f * state.mu_f.transpose();
    state.c_eta = config.hyper.c + 1.0;
    state.d_eta = config.hyper.d + 0.5 * trace_of_product(&pen.p1_ginv, &second);
}

pub fn update_q_lambda_f(state: &mut VBState, config: &ModelConfig, pen: &PenaltySet) {
    let second = &state.sigma_f + &state.mu_f * state.mu_f.transpose();
    state.c_lambda = config.hyper.c + 0.5 * (pen.p() as f64 - 2.0);
    state.d_lambda = config.hyper.d + 0.5 * trace_of_product(&pen.p2_ginv, &second);
}

pub fn update_q_sigma_z0(state: &mut VBState, config: &ModelConfig) {
    let n = state.n_curves();
    let ss: f64 = state
        .mu_z0
        .iter()
        .zip(state.var_z0.iter())
        .map(|(m, v)| v + m * m)
        .sum();
    state.a_z0 = config.hyper.a + 0.5 * (n as f64 - 1.0);
    state.b_z0 = config.hyper.b + 0.5 * ss;
}

pub fn update_q_sigma_z1(state: &mut VBState, config: &ModelConfig) {
    let n = state.n_curves();
    let ss: f64 = state
        .mu_z1
        .iter()
        .zip(state.var_z1.iter())
        .map(|(m, v)| v + (m - 1.0) * (m - 1.0))
        .sum();
    state.a_z1 = config.hyper.a + 0.5 * n as f64;
    state.b_z1 = config.hyper.b + 0.5 * ss;
}

/// The conjugate updates in their required order.
pub(crate) fn conjugate_sweep(
    state: &mut VBState,
    xh: &[DVector<f64>],
    a: &DMatrix<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
) -> Result<()> {
    update_q_f(state, xh, a, pen)?;
    update_q_z0(state, xh, a);
    update_q_z1(state, xh, a);
    update_q_eta_f(state, config, pen);
    update_q_lambda_f(state, config, pen);
    update_q_sigma_z0(state, config);
    update_q_sigma_z1(state, config);
    Ok(())
}

fn inv_gamma_terms(a: f64, b: f64, aq: f64, bq: f64) -> f64 {
    // E_q[log IG(σ²; a, b)] − E_q[log q(σ²)]
    let e_log = bq.ln() - digamma(aq);
    let e_inv = aq / bq;
    let prior = a * b.ln() - ln_gamma(a) - (a + 1.0) * e_log - b * e_inv;
    let entropy = aq + bq.ln() + ln_gamma(aq) - (1.0 + aq) * digamma(aq);
    prior + entropy
}

fn gamma_terms(c: f64, d: f64, cq: f64, dq: f64) -> f64 {
    let e_log = digamma(cq) - dq.ln();
    let e = cq / dq;
    let prior = c * d.ln() - ln_gamma(c) + (c - 1.0) * e_log - d * e;
    let entropy = cq - dq.ln() + ln_gamma(cq) + (1.0 - cq) * digamma(cq);
    prior + entropy
}

/// Evidence lower bound with respect to the q-distributions, with the base
/// functions at their point estimates; `xh` are the registered curves.
pub(crate) fn elbo_with(
    state: &VBState,
    xh: &[DVector<f64>],
    a: &DMatrix<f64>,
    priors: &BasePriors,
    config: &ModelConfig,
    pen: &PenaltySet,
) -> f64 {
    let n = xh.len();
    let p = pen.p();
    let h = &config.hyper;
    let z0 = state.z0_full();
    let v0 = state.var_z0_full();
    let one_a_one = quad_form(&ones(p), a);
    let tr_af = trace_of_product(a, &state.sigma_f);
    let f_af = quad_form(&state.mu_f, a);

    let e_inv0 = state.mean_inv_sigma_z0();
    let e_log0 = state.b_z0.ln() - digamma(state.a_z0);
    let e_inv1 = state.mean_inv_sigma_z1();
    let e_log1 = state.b_z1.ln() - digamma(state.a_z1);
    let e_eta = state.mean_eta_f();
    let e_log_eta = digamma(state.c_eta) - state.d_eta.ln();
    let e_lam = state.mean_lambda_f();
    let e_log_lam = digamma(state.c_lambda) - state.d_lambda.ln();

    let mut total = 0.0;
    for i in 0..n {
        let m = &state.mu_f * state.mu_z1[i] + DVector::from_element(p, z0[i]);
        let r = &xh[i] - m;
        let s1 = state.var_z1[i] + state.mu_z1[i] * state.mu_z1[i];
        let e_quad = quad_form(&r, a) + v0[i] * one_a_one + s1 * tr_af + state.var_z1[i] * f_af;
        total += -0.5 * e_quad;
        total += -0.5 * quad_form(&state.w_hat[i], priors.precision(i));
    }

    // f
    let second = &state.sigma_f + &state.mu_f * state.mu_f.transpose();
    total += e_log_eta + 0.5 * (p as f64 - 2.0) * e_log_lam
        - 0.5 * (e_eta * trace_of_product(&pen.p1_ginv, &second)
            + e_lam * trace_of_product(&pen.p2_ginv, &second));
    let logdet_f = spd_inverse_logdet(&state.sigma_f).map_or(f64::NEG_INFINITY, |(_, ld)| ld);
    total += 0.5 * logdet_f;

    for i in 0..n - 1 {
        let (m, v) = (state.mu_z0[i], state.var_z0[i]);
        total += -0.5 * e_log0 - 0.5 * e_inv0 * (v + m * m) + 0.5 * v.ln();
    }
    for i in 0..n {
        let (m, v) = (state.mu_z1[i], state.var_z1[i]);
        total += -0.5 * e_log1 - 0.5 * e_inv1 * (v + (m - 1.0) * (m - 1.0)) + 0.5 * v.ln();
    }

    total += inv_gamma_terms(h.a, h.b, state.a_z0, state.b_z0);
    total += inv_gamma_terms(h.a, h.b, state.a_z1, state.b_z1);
    total += gamma_terms(h.c, h.d, state.c_eta, state.d_eta);
    total += gamma_terms(h.c, h.d, state.c_lambda, state.d_lambda);
    total
}

/// Evidence lower bound of the noiseless model at the current state.
pub fn elbo(state: &VBState, data: &DMatrix<f64>, config: &ModelConfig, pen: &PenaltySet) -> Result<f64> {
    check_data(data, pen)?;
    let a = registration_precision(config, pen, None)?;
    let priors = BasePriors::new(config, pen, data.nrows())?;
    let xh = registered_curves(&data_rows(data), &state.w_hat, pen.grid.points());
    Ok(elbo_with(state, &xh, &a, &priors, config, pen))
}

pub(crate) fn snapshot(state: &VBState) -> Vec<f64> {
    let mut v: Vec<f64> = Vec::new();
    v.extend(state.mu_f.iter());
    v.extend(state.mu_z0.iter());
    v.extend(state.mu_z1.iter());
    for w in &state.w_hat {
        v.extend(w.iter());
    }
    v
}

pub(crate) fn max_abs_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub(crate) fn phases(config: &ModelConfig, opts: &AvbOptions) -> Vec<(ModelConfig, Option<usize>)> {
    if opts.schedule.is_empty() {
        return vec![(config.clone(), None)];
    }
    opts.schedule
        .iter()
        .map(|ph| {
            let cfg = ModelConfig {
                gamma_r: ph.gamma_r,
                gamma_w: ph.gamma_w.clone(),
                ..config.clone()
            };
            (cfg, ph.iters)
        })
        .collect()
}

/// Iterate base steps and conjugate updates until a stopping rule fires.
pub fn avb_fit(
    data: &DMatrix<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
    opts: &AvbOptions,
) -> Result<VBState> {
    let mut state = avb_init(data, config, pen)?;
    avb_continue(&mut state, data, config, pen, opts)?;
    Ok(state)
}

/// Resume a fit from an existing state (e.g. from a previous phase).
pub fn avb_continue(
    state: &mut VBState,
    data: &DMatrix<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
    opts: &AvbOptions,
) -> Result<()> {
    check_data(data, pen)?;
    let curves = data_rows(data);
    let points = pen.grid.points();
    let all_phases = phases(config, opts);
    let last_phase = all_phases.len() - 1;
    for (k, (cfg, phase_iters)) in all_phases.into_iter().enumerate() {
        cfg.validate(data.nrows())?;
        let a = registration_precision(&cfg, pen, None)?;
        let priors = BasePriors::new(&cfg, pen, data.nrows())?;
        let budget = phase_iters.unwrap_or(opts.stop.max_iters);
        let mut prev_elbo: Option<f64> = None;
        let mut reason = StopReason::MaxIters;
        for _ in 0..budget {
            let before = snapshot(state);
            all_base_steps(state, &curves, &a, &priors, pen, &opts.optimizer);
            let xh = registered_curves(&curves, &state.w_hat, points);
            conjugate_sweep(state, &xh, &a, &cfg, pen)?;
            let value = elbo_with(state, &xh, &a, &priors, &cfg, pen);
            state.elbo_trace.push(value);
            state.iterations += 1;
            let change = max_abs_change(&before, &snapshot(state));
            if change < opts.stop.tol {
                reason = StopReason::ParameterChange;
                break;
            }
            if let Some(prev) = prev_elbo {
                if (value - prev).abs() < opts.stop.tol {
                    reason = StopReason::ElboChange;
                    break;
                }
            }
            prev_elbo = Some(value);
        }
        if k == last_phase {
            state.stop_reason = Some(reason);
        }
    }
    Ok(())
}

/// Registered curves `x_i ∘ h_i` under the fitted warps.
pub fn registered_from_state(state: &VBState, data: &DMatrix<f64>, pen: &PenaltySet) -> Vec<DVector<f64>> {
    registered_curves(&data_rows(data), &state.w_hat, pen.grid.points())
}
