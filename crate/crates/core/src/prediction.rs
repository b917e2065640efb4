//! Completing a partially observed curve from the registered sample.
//!
//! The partial curve is registered against the target truncated at a
//! candidate final time, the registered values and base function are extended
//! by Gaussian conditioning on the sample laws, and the unregistered curve is
//! rebuilt through the inverse of the completed warp.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avb::{maximize_projected, OptimizerOptions};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, psd_factor, spd_inverse, symmetrized};
use crate::mcmc::quantile_sorted;
use crate::model::{GammaW, ModelConfig, WarpObjective};
use crate::penalties::{build_penalty_set, PenaltySet, TimeGrid};
use crate::warping::{interp_clamped, project_to_end, warp_ending_at, warp_values};

/// Candidate times closer than this fraction of the domain to a grid point are snapped to it.
const SNAP_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ridge {
    Absolute(f64),
    /// Multiple of the mean diagonal of each sample covariance.
    Relative(f64),
}

impl Default for Ridge {
    // N curves give a rank N−1 sample covariance; a tiny ridge lets the
    // conditional mean extrapolate the null directions wildly
    fn default() -> Self {
        Ridge::Relative(1e-2)
    }
}

impl Ridge {
    fn amount(self, cov: &DMatrix<f64>) -> f64 {
        match self {
            Ridge::Absolute(v) => v,
            // floored so a degenerate sample still gives a PD law
            Ridge::Relative(k) => (k * cov.diagonal().mean()).max(1e-12),
        }
    }
}

/// Gaussian laws of the registered curves and of the base functions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalLaw {
    pub mu_reg: DVector<f64>,
    pub cov_reg: DMatrix<f64>,
    pub mu_base: DVector<f64>,
    pub cov_base: DMatrix<f64>,
}

fn mean_and_cov(rows: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.nrows();
    let mu = rows.row_mean().transpose();
    let mut centred = rows.clone();
    for i in 0..n {
        let mut r = centred.row_mut(i);
        r -= mu.transpose();
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    (mu, symmetrized(&cov))
}

pub fn fit_empirical_laws(registered: &DMatrix<f64>, bases: &DMatrix<f64>, ridge: Ridge) -> Result<EmpiricalLaw> {
    let n = registered.nrows();
    if n < 2 {
        return Err(Error::DegenerateSample { got: n });
    }
    if bases.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "base estimates rows",
            expected: n,
            found: bases.nrows(),
        });
    }
    if bases.ncols() + 1 != registered.ncols() {
        return Err(Error::DimensionMismatch {
            context: "base estimates columns",
            expected: registered.ncols() - 1,
            found: bases.ncols(),
        });
    }
    let (mu_reg, mut cov_reg) = mean_and_cov(registered);
    let (mu_base, mut cov_base) = mean_and_cov(bases);
    for cov in [&mut cov_reg, &mut cov_base] {
        let r = ridge.amount(cov);
        for k in 0..cov.nrows() {
            cov[(k, k)] += r;
        }
    }
    Ok(EmpiricalLaw {
        mu_reg,
        cov_reg,
        mu_base,
        cov_base,
    })
}

/// Values of a curve at the first `r` grid times.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialObservation {
    pub values: Vec<f64>,
}

impl PartialObservation {
    pub fn new(values: Vec<f64>, grid: &TimeGrid) -> Result<Self> {
        let r = values.len();
        if r < 2 || r >= grid.len() {
            return Err(Error::InvalidArgument(format!(
                "partial curve needs 2 ≤ r < {} observed points, got {r}",
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite partial value at index {k}")));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialOptions {
    /// Prior variances of the shift and scale of the new curve, usually taken from the training fit.
    pub sigma_z0_sq: f64,
    pub sigma_z1_sq: f64,
    pub sweeps: usize,
    pub tol: f64,
    pub optimizer: OptimizerOptions,
}

impl Default for PartialOptions {
    fn default() -> Self {
        Self {
            sigma_z0_sq: 1.0,
            sigma_z1_sq: 1.0,
            sweeps: 50,
            tol: 1e-10,
            optimizer: OptimizerOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialRegistration {
    pub t_f: f64,
    /// Registered times `t_1, …, t_f`: the grid points before `t_f`, then `t_f`.
    pub points: Vec<f64>,
    /// Base function on the intervals of `points`.
    pub base: DVector<f64>,
    /// `h` on `points`, mapping `[t_1, t_f]` onto `[t_1, t_r]`.
    pub warp: DVector<f64>,
    /// Partial curve at the warped times.
    pub registered: DVector<f64>,
    pub z0: f64,
    pub z1: f64,
}

impl PartialRegistration {
    /// Number of leading entries of `points` that are grid points.
    pub fn grid_count(&self, grid: &TimeGrid) -> usize {
        let last = *self.points.last().expect("nonempty");
        if grid.points().contains(&last) {
            self.points.len()
        } else {
            self.points.len() - 1
        }
    }
}

fn truncated_points(grid: &TimeGrid, t_f: f64) -> Result<Vec<f64>> {
    let (lo, hi) = (grid.first(), grid.last());
    if !(t_f > lo && t_f < hi) {
        return Err(Error::QueryOutOfDomain { query: t_f, lo, hi });
    }
    let snap = SNAP_RTOL * (hi - lo);
    let mut pts: Vec<f64> = grid.points().iter().copied().filter(|&t| t < t_f - snap).collect();
    match grid.points().iter().find(|&&t| (t - t_f).abs() <= snap) {
        Some(&t) => pts.push(t),
        None => pts.push(t_f),
    }
    Ok(pts)
}

fn gamma_w_new_curve(config: &ModelConfig) -> f64 {
    match &config.gamma_w {
        GammaW::Global(g) => *g,
        GammaW::PerCurve(v) => v.iter().sum::<f64>() / v.len() as f64,
    }
}

/// Register the partial curve against `target` truncated at `t_f`, with the
/// warp constrained by `h(t_f) = t_r`. Alternates base-function steps with the
/// closed-form shift and scale given the warp.
pub fn register_partial(
    partial: &PartialObservation,
    target: &DVector<f64>,
    t_f: f64,
    config: &ModelConfig,
    pen: &PenaltySet,
    opts: &PartialOptions,
) -> Result<PartialRegistration> {
    let grid = &pen.grid;
    if target.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            context: "target",
            expected: grid.len(),
            found: target.len(),
        });
    }
    let r = partial.len();
    let obs_pts = &grid.points()[..r];
    let t_r = obs_pts[r - 1];
    let pts = truncated_points(grid, t_f)?;
    let t_f = *pts.last().expect("nonempty");
    let sub = build_penalty_set(&TimeGrid::new(pts.clone())?, pen.order_w)?;
    let f_s = DVector::from_iterator(
        pts.len(),
        pts.iter().map(|&s| interp_clamped(grid.points(), target.as_slice(), s)),
    );
    let g = gamma_w_new_curve(config);
    let prior_cov = &sub.sigma_base / g + &sub.pw / config.lambda_w;
    let prior_prec = spd_inverse(&prior_cov).ok_or(Error::SingularPriorCovariance { gamma_w: g })?;
    let a = &sub.sigma_inv * config.gamma_r;
    let ones = DVector::from_element(pts.len(), 1.0);
    let a1 = &a * &ones;
    let af = &a * &f_s;

    let mut w = project_to_end(&vec![0.0; pts.len() - 1], &pts, t_r);
    let (mut z0, mut z1) = (0.0, 1.0);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..opts.sweeps {
        let obj = WarpObjective {
            points: &pts,
            curve_points: obs_pts,
            curve: &partial.values,
            end: t_r,
            mean: &f_s * z1 + &ones * z0,
            precision: &a,
            prior_precision: &prior_prec,
        };
        let current = obj.value(&w);
        let (w_new, val, _) = maximize_projected(&obj, &w, t_r, Some(&prior_cov), &opts.optimizer);
        if val > current {
            w = w_new;
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::OptimizerFailure("non-finite base function".into()));
        }
        let h = warp_ending_at(&w, &pts, t_r);
        let xh = DVector::from_iterator(
            pts.len(),
            h.iter().map(|&q| interp_clamped(obs_pts, &partial.values, q)),
        );
        // MAP shift and scale given the warp
        let m = nalgebra::Matrix2::new(
            ones.dot(&a1) + 1.0 / opts.sigma_z0_sq,
            ones.dot(&af),
            f_s.dot(&a1),
            f_s.dot(&af) + 1.0 / opts.sigma_z1_sq,
        );
        let rhs = nalgebra::Vector2::new(xh.dot(&a1), xh.dot(&af) + 1.0 / opts.sigma_z1_sq);
        let z = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::OptimizerFailure("singular shift/scale system".into()))?;
        let (nz0, nz1) = (z[0], z[1]);
        let resid = &xh - &f_s * nz1 - &ones * nz0;
        let wv = DVector::from_column_slice(&w);
        let value = -0.5 * resid.dot(&(&a * &resid))
            - 0.5 * wv.dot(&(&prior_prec * &wv))
            - 0.5 * nz0 * nz0 / opts.sigma_z0_sq
            - 0.5 * (nz1 - 1.0).powi(2) / opts.sigma_z1_sq;
        let change = (nz0 - z0).abs().max((nz1 - z1).abs());
        z0 = nz0;
        z1 = nz1;
        let gain = value - best;
        best = value;
        if change < opts.tol && gain.abs() < opts.tol * (1.0 + value.abs()) {
            break;
        }
    }
    let h = warp_ending_at(&w, &pts, t_r);
    let registered = DVector::from_iterator(
        pts.len(),
        h.iter().map(|&q| interp_clamped(obs_pts, &partial.values, q)),
    );
    Ok(PartialRegistration {
        t_f,
        points: pts,
        base: DVector::from_vec(w),
        warp: DVector::from_vec(h),
        registered,
        z0,
        z1,
    })
}

/// `‖X^P − (z0 1 + z1 f^U)‖₂` with `f^U` the target at the inverse-warped observed times.
pub fn final_time_distance(
    partial: &PartialObservation,
    target: &DVector<f64>,
    reg: &PartialRegistration,
    grid: &TimeGrid,
) -> f64 {
    let r = partial.len();
    grid.points()[..r]
        .iter()
        .zip(&partial.values)
        .map(|(&t, &x)| {
            let s = interp_clamped(reg.warp.as_slice(), &reg.points, t);
            let fu = interp_clamped(grid.points(), target.as_slice(), s);
            let d = x - (reg.z0 + reg.z1 * fu);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalTimeSelection {
    pub t_f: f64,
    pub distance: f64,
    /// `(candidate, distance)` in increasing time order.
    pub candidates: Vec<(f64, f64)>,
    pub registration: PartialRegistration,
}

/// Choose `t_f` minimizing the distance over the window; ties go to the smallest time.
pub fn select_final_time(
    partial: &PartialObservation,
    target: &DVector<f64>,
    window: &[f64],
    config: &ModelConfig,
    pen: &PenaltySet,
    opts: &PartialOptions,
) -> Result<FinalTimeSelection> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut times = window.to_vec();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let regs = times
        .par_iter()
        .map(|&t| register_partial(partial, target, t, config, pen, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut candidates = Vec::with_capacity(times.len());
    let mut best: Option<(usize, f64)> = None;
    for (k, reg) in regs.iter().enumerate() {
        let d = final_time_distance(partial, target, reg, &pen.grid);
        candidates.push((reg.t_f, d));
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    let (k, distance) = best.expect("nonempty window");
    Ok(FinalTimeSelection {
        t_f: regs[k].t_f,
        distance,
        candidates,
        registration: regs[k].clone(),
    })
}

/// Condition `N(mu, cov)` on the coordinates `observed_idx` taking `observed`.
/// Returns full-length moments: observed coordinates carry their values and zero covariance.
pub fn conditional_mvn(
    mu: &DVector<f64>,
    cov: &DMatrix<f64>,
    observed_idx: &[usize],
    observed: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = mu.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "conditional covariance",
            expected: n,
            found: cov.nrows(),
        });
    }
    if observed_idx.len() != observed.len() {
        return Err(Error::DimensionMismatch {
            context: "observed values",
            expected: observed_idx.len(),
            found: observed.len(),
        });
    }
    let mut is_obs = vec![false; n];
    for &k in observed_idx {
        if k >= n || is_obs[k] {
            return Err(Error::InvalidArgument(format!("bad observed index {k}")));
        }
        is_obs[k] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&k| !is_obs[k]).collect();
    let o = observed_idx.len();
    let u = free.len();
    let mut mean = mu.clone();
    for (&k, &v) in observed_idx.iter().zip(observed) {
        mean[k] = v;
    }
    let mut out_cov = DMatrix::zeros(n, n);
    if u == 0 {
        return Ok((mean, out_cov));
    }
    if o == 0 {
        return Ok((mu.clone(), cov.clone()));
    }
    let s_oo = DMatrix::from_fn(o, o, |a, b| cov[(observed_idx[a], observed_idx[b])]);
    let s_uo = DMatrix::from_fn(u, o, |a, b| cov[(free[a], observed_idx[b])]);
    let s_uu = DMatrix::from_fn(u, u, |a, b| cov[(free[a], free[b])]);
    let chol = cholesky(&s_oo).ok_or(Error::SingularObservedBlock)?;
    let dev = DVector::from_iterator(o, observed_idx.iter().zip(observed).map(|(&k, &v)| v - mu[k]));
    let shift = &s_uo * chol.solve(&dev);
    let schur = symmetrized(&(&s_uu - &s_uo * chol.solve(&s_uo.transpose())));
    for (a, &k) in free.iter().enumerate() {
        mean[k] = mu[k] + shift[a];
        for (b, &l) in free.iter().enumerate() {
            out_cov[(k, l)] = schur[(a, b)];
        }
    }
    Ok((mean, out_cov))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub t_f: f64,
    pub registered_full: DVector<f64>,
    pub warp_full: DVector<f64>,
    pub base_full: DVector<f64>,
    pub unregistered_full: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    /// Gaussian conditional mean given the registered prefix.
    Conditional,
    /// Plain law means for the unobserved part; a baseline.
    Unconditional,
}

/// Shift the base coordinates from `from` on by a constant so the warp ends at
/// the grid end. The prefix, and with it the partial warp, is untouched.
fn project_future(base: &mut DVector<f64>, from: usize, grid: &TimeGrid) -> Result<()> {
    let pts = grid.points();
    let h = warp_values(base.as_slice(), pts);
    let start = h[from];
    let span: f64 = (from..base.len()).map(|k| (pts[k + 1] - pts[k]) * base[k].exp()).sum();
    let need = grid.last() - start;
    if need <= 0.0 {
        return Err(Error::EndpointViolation {
            expected: grid.last(),
            found: start,
        });
    }
    let c = (need / span).ln();
    for k in from..base.len() {
        base[k] += c;
    }
    Ok(())
}

fn unregistered_from(
    partial: &PartialObservation,
    registered: &DVector<f64>,
    warp: &DVector<f64>,
    grid: &TimeGrid,
) -> DVector<f64> {
    let pts = grid.points();
    let r = partial.len();
    DVector::from_iterator(
        pts.len(),
        pts.iter().enumerate().map(|(j, &t)| {
            if j < r {
                partial.values[j]
            } else {
                let s = interp_clamped(warp.as_slice(), pts, t);
                interp_clamped(pts, registered.as_slice(), s)
            }
        }),
    )
}

/// Observed coordinates of the registered and base vectors implied by a partial registration.
fn observed_parts(reg: &PartialRegistration, grid: &TimeGrid) -> (Vec<usize>, Vec<f64>, Vec<usize>, Vec<f64>) {
    let q = reg.grid_count(grid);
    let reg_idx: Vec<usize> = (0..q).collect();
    let reg_vals: Vec<f64> = reg.registered.iter().take(q).copied().collect();
    let base_idx: Vec<usize> = (0..q - 1).collect();
    let base_vals: Vec<f64> = reg.base.iter().take(q - 1).copied().collect();
    (reg_idx, reg_vals, base_idx, base_vals)
}

/// Complete the registered curve, base function, warp and unregistered curve
/// from a partial registration.
pub fn complete_from_registration(
    partial: &PartialObservation,
    law: &EmpiricalLaw,
    reg: &PartialRegistration,
    grid: &TimeGrid,
    mode: Completion,
) -> Result<PredictionResult> {
    let (reg_idx, reg_vals, base_idx, base_vals) = observed_parts(reg, grid);
    let (mut registered, mut base) = match mode {
        Completion::Conditional => (
            conditional_mvn(&law.mu_reg, &law.cov_reg, &reg_idx, &reg_vals)?.0,
            conditional_mvn(&law.mu_base, &law.cov_base, &base_idx, &base_vals)?.0,
        ),
        Completion::Unconditional => (law.mu_reg.clone(), law.mu_base.clone()),
    };
    for (&k, &v) in reg_idx.iter().zip(&reg_vals) {
        registered[k] = v;
    }
    for (&k, &v) in base_idx.iter().zip(&base_vals) {
        base[k] = v;
    }
    project_future(&mut base, base_idx.len(), grid)?;
    let warp = DVector::from_vec(warp_ending_at(base.as_slice(), grid.points(), grid.last()));
    let unregistered = unregistered_from(partial, &registered, &warp, grid);
    Ok(PredictionResult {
        t_f: reg.t_f,
        registered_full: registered,
        warp_full: warp,
        base_full: base,
        unregistered_full: unregistered,
    })
}

/// Full pipeline: select `t_f` against the law's registered mean, then complete.
pub fn predict_complete(
    partial: &PartialObservation,
    law: &EmpiricalLaw,
    window: &[f64],
    config: &ModelConfig,
    pen: &PenaltySet,
    opts: &PartialOptions,
) -> Result<(PredictionResult, FinalTimeSelection)> {
    let sel = select_final_time(partial, &law.mu_reg, window, config, pen, opts)?;
    let pred = complete_from_registration(partial, law, &sel.registration, &pen.grid, Completion::Conditional)?;
    Ok((pred, sel))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    /// Outer resamples of the laws.
    pub m: usize,
    /// Conditional draws per outer resample.
    pub s: usize,
    pub level: f64,
    pub ridge: Ridge,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            m: 20,
            s: 50,
            level: 0.95,
            ridge: Ridge::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapBands {
    pub registered: Band,
    pub warp: Band,
    pub unregistered: Band,
    pub m: usize,
    pub s: usize,
    /// Outer iterations skipped after an error.
    pub failed: usize,
}

fn draw_rows(rng: &mut ChaCha8Rng, mu: &DVector<f64>, factor: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let k = mu.len();
    let mut out = DMatrix::zeros(n, k);
    for i in 0..n {
        let eps = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
        let x = mu + factor * eps;
        out.row_mut(i).copy_from(&x.transpose());
    }
    out
}

type Draws = (Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>);

#[allow(clippy::too_many_arguments)]
fn bootstrap_iteration(
    m: usize,
    partial: &PartialObservation,
    law: &EmpiricalLaw,
    factors: &(DMatrix<f64>, DMatrix<f64>),
    n: usize,
    t_f: f64,
    config: &ModelConfig,
    pen: &PenaltySet,
    popts: &PartialOptions,
    bopts: &BootstrapOptions,
) -> Result<Draws> {
    let mut rng = ChaCha8Rng::seed_from_u64(bopts.seed);
    rng.set_stream(m as u64);
    let reg_rows = draw_rows(&mut rng, &law.mu_reg, &factors.0, n);
    let base_rows = draw_rows(&mut rng, &law.mu_base, &factors.1, n);
    let law_m = fit_empirical_laws(&reg_rows, &base_rows, bopts.ridge)?;
    let reg = register_partial(partial, &law_m.mu_reg, t_f, config, pen, popts)?;
    let (reg_idx, reg_vals, base_idx, base_vals) = observed_parts(&reg, &pen.grid);
    let (reg_mean, reg_cov) = conditional_mvn(&law_m.mu_reg, &law_m.cov_reg, &reg_idx, &reg_vals)?;
    let (base_mean, base_cov) = conditional_mvn(&law_m.mu_base, &law_m.cov_base, &base_idx, &base_vals)?;
    let (lr, lb) = (psd_factor(&reg_cov), psd_factor(&base_cov));
    let mut out: Draws = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..bopts.s {
        let er = DVector::from_fn(reg_mean.len(), |_, _| StandardNormal.sample(&mut rng));
        let eb = DVector::from_fn(base_mean.len(), |_, _| StandardNormal.sample(&mut rng));
        let mut registered = &reg_mean + &lr * er;
        let mut base = &base_mean + &lb * eb;
        for (&k, &v) in reg_idx.iter().zip(&reg_vals) {
            registered[k] = v;
        }
        for (&k, &v) in base_idx.iter().zip(&base_vals) {
            base[k] = v;
        }
        project_future(&mut base, base_idx.len(), &pen.grid)?;
        let warp = DVector::from_vec(warp_ending_at(base.as_slice(), pen.grid.points(), pen.grid.last()));
        let unregistered = unregistered_from(partial, &registered, &warp, &pen.grid);
        out.0.push(registered);
        out.1.push(warp);
        out.2.push(unregistered);
    }
    Ok(out)
}

fn band(samples: &[DVector<f64>], level: f64) -> Band {
    let p = samples[0].len();
    let alpha = 0.5 * (1.0 - level);
    let mut lower = DVector::zeros(p);
    let mut upper = DVector::zeros(p);
    let mut col = vec![0.0; samples.len()];
    for j in 0..p {
        for (k, s) in samples.iter().enumerate() {
            col[k] = s[j];
        }
        col.sort_by(f64::total_cmp);
        lower[j] = quantile_sorted(&col, alpha);
        upper[j] = quantile_sorted(&col, 1.0 - alpha);
    }
    Band { lower, upper }
}

/// Pointwise bootstrap bands over `M × S` completions. Outer iterations run in
/// parallel on their own RNG streams and are merged in index order.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_bands(
    partial: &PartialObservation,
    registered_estimates: &DMatrix<f64>,
    base_estimates: &DMatrix<f64>,
    t_f: f64,
    config: &ModelConfig,
    pen: &PenaltySet,
    popts: &PartialOptions,
    bopts: &BootstrapOptions,
) -> Result<BootstrapBands> {
    if bopts.m == 0 || bopts.s == 0 {
        return Err(Error::InvalidArgument("bootstrap needs M ≥ 1 and S ≥ 1".into()));
    }
    if !(bopts.level > 0.0 && bopts.level < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {} not in (0, 1)", bopts.level)));
    }
    let law = fit_empirical_laws(registered_estimates, base_estimates, bopts.ridge)?;
    let factors = (psd_factor(&law.cov_reg), psd_factor(&law.cov_base));
    let n = registered_estimates.nrows();
    let results: Vec<Result<Draws>> = (0..bopts.m)
        .into_par_iter()
        .map(|m| bootstrap_iteration(m, partial, &law, &factors, n, t_f, config, pen, popts, bopts))
        .collect();
    let mut all: Draws = (Vec::new(), Vec::new(), Vec::new());
    let mut failed = 0;
    let mut last_err = None;
    for r in results {
        match r {
            Ok((a, b, c)) => {
                all.0.extend(a);
                all.1.extend(b);
                all.2.extend(c);
            }
            Err(e) => {
                failed += 1;
                last_err = Some(e);
            }
        }
    }
    if all.0.is_empty() {
        return Err(last_err.expect("at least one iteration ran"));
    }
    Ok(BootstrapBands {
        registered: band(&all.0, bopts.level),
        warp: band(&all.1, bopts.level),
        unregistered: band(&all.2, bopts.level),
        m: bopts.m,
        s: bopts.s,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::penalties::DerivativeOrder;

    #[test]
    fn identical_rows_give_ridge_only() {
        let reg = DMatrix::from_fn(4, 3, |_, j| j as f64);
        let base = DMatrix::from_fn(4, 2, |_, j| 0.1 * j as f64);
        let law = fit_empirical_laws(&reg, &base, Ridge::Absolute(0.5)).unwrap();
        assert_eq!(law.cov_reg, DMatrix::identity(3, 3) * 0.5);
        assert_eq!(law.cov_base, DMatrix::identity(2, 2) * 0.5);
    }

    #[test]
    fn single_row_is_degenerate() {
        let reg = DMatrix::zeros(1, 3);
        let base = DMatrix::zeros(1, 2);
        assert_eq!(
            fit_empirical_laws(&reg, &base, Ridge::default()),
            Err(Error::DegenerateSample { got: 1 })
        );
    }

    #[test]
    fn conditioning_edge_cases() {
        let mu = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let (m, c) = conditional_mvn(&mu, &cov, &[0], &[5.0]).unwrap();
        assert_eq!(m.as_slice(), &[5.0, 2.0, 3.0]);
        assert_eq!(c[(1, 1)], 2.0);
        let (m, c) = conditional_mvn(&mu, &cov, &[0, 1, 2], &[7.0, 8.0, 9.0]).unwrap();
        assert_eq!(m.as_slice(), &[7.0, 8.0, 9.0]);
        assert_eq!(c, DMatrix::zeros(3, 3));
        let sing = DMatrix::zeros(3, 3);
        assert_eq!(conditional_mvn(&mu, &sing, &[1], &[0.0]), Err(Error::SingularObservedBlock));
    }

    #[test]
    fn truncation_snaps_to_grid() {
        let g = TimeGrid::uniform(0.0, 1.0, 11).unwrap();
        assert_eq!(truncated_points(&g, 0.3 + 1e-12).unwrap().len(), 4);
        let off = truncated_points(&g, 0.35).unwrap();
        assert_eq!(off.len(), 5);
        assert_eq!(*off.last().unwrap(), 0.35);
        assert!(truncated_points(&g, 1.0).is_err());
        assert!(truncated_points(&g, 0.0).is_err());
    }

    #[test]
    fn future_projection_keeps_prefix() {
        let g = TimeGrid::uniform(0.0, 2.0, 9).unwrap();
        let mut base = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.5, -0.1, 0.2]);
        let before = warp_values(base.as_slice(), g.points());
        project_future(&mut base, 3, &g).unwrap();
        let after = warp_values(base.as_slice(), g.points());
        assert_eq!(&before[..4], &after[..4]);
        assert!((after[8] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_window() {
        let g = TimeGrid::uniform(0.0, 1.0, 11).unwrap();
        let pen = build_penalty_set(&g, DerivativeOrder::Second).unwrap();
        let partial = PartialObservation::new(vec![0.0; 5], &g).unwrap();
        let target = DVector::zeros(11);
        let r = select_final_time(&partial, &target, &[], &ModelConfig::default(), &pen, &PartialOptions::default());
        assert_eq!(r.unwrap_err(), Error::EmptyWindow);
    }
}
