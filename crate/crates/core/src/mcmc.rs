//! Metropolis-within-Gibbs sampler over the full conditionals of the model.
//!
//! Conjugate blocks are drawn exactly. Each base function gets random-walk
//! Metropolis steps whose proposals are shaped by its prior covariance and
//! then shifted back onto the endpoint constraint. The target density of `w`
//! is taken with respect to surface measure on the constraint set; the
//! acceptance ratio carries the matching Jacobian of the shift.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::avb::{avb_init, check_data, VBState};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, ones, psd_factor, quad_form};
use crate::model::{
    data_rows, registered_curves, registration_precision, BasePriors, LatentState, ModelConfig,
    NoisyLatent, WarpObjective,
};
use crate::penalties::PenaltySet;
use crate::warping::{compose_inverse, project_to_end, register_curve, registration_matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    X,
    W,
    F,
    SigmaY,
    EtaX,
    LambdaX,
    Z0,
    SigmaZ0,
    Z1,
    SigmaZ1,
    EtaF,
    LambdaF,
}

impl Block {
    /// Sweep order. Each latent curve is drawn before its base function.
    pub const ORDER: [Block; 12] = [
        Block::X,
        Block::W,
        Block::F,
        Block::SigmaY,
        Block::EtaX,
        Block::LambdaX,
        Block::Z0,
        Block::SigmaZ0,
        Block::Z1,
        Block::SigmaZ1,
        Block::EtaF,
        Block::LambdaF,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::X => "x",
            Block::W => "w",
            Block::F => "f",
            Block::SigmaY => "sigma_y_sq",
            Block::EtaX => "eta_x",
            Block::LambdaX => "lambda_x",
            Block::Z0 => "z0",
            Block::SigmaZ0 => "sigma_z0_sq",
            Block::Z1 => "z1",
            Block::SigmaZ1 => "sigma_z1_sq",
            Block::EtaF => "eta_f",
            Block::LambdaF => "lambda_f",
        }
    }

    fn noisy_only(self) -> bool {
        matches!(self, Block::X | Block::SigmaY | Block::EtaX | Block::LambdaX)
    }
}

/// How the smoothing prior on a latent curve is carried back to the
/// unregistered time scale when drawing `X_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XConditional {
    /// Exact: for fixed `w_i` the registered curve is `R_i X_i` with `R_i` the
    /// interpolation matrix, so the penalty on `R_i X_i − z0 − z1 f` is a
    /// Gaussian factor in `X_i`.
    Pullback,
    /// Penalize `X_i − z0 − z1 f(h_i⁻¹)` directly (the composed approximation).
    Composed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOptions {
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Initial proposal scale, in units of the prior standard deviation of `w`.
    pub init_step: f64,
    /// Adapt the proposal scales during burn-in.
    pub adapt: bool,
    /// Metropolis steps per base function per sweep.
    pub w_steps: usize,
    /// Blocks held at their initial values.
    pub fixed: Vec<Block>,
    pub x_conditional: XConditional,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self {
            iters: 2000,
            burn_in: 500,
            thin: 1,
            seed: 1,
            init_step: 0.1,
            adapt: true,
            w_steps: 1,
            fixed: Vec::new(),
            x_conditional: XConditional::Pullback,
        }
    }
}

/// Target acceptance window for the adapted base-function proposals.
const ACCEPT_LO: f64 = 0.2;
const ACCEPT_HI: f64 = 0.4;
const ADAPT_BATCH: usize = 20;

#[derive(Debug, Clone)]
pub struct ChainState {
    pub latent: LatentState,
    pub rng_seed: u64,
    pub rng: ChaCha8Rng,
    /// Proposal scale for each base function.
    pub step_sizes: Vec<f64>,
    pub accept_counts: Vec<u64>,
    pub proposal_counts: Vec<u64>,
}

impl ChainState {
    pub fn new(latent: LatentState, seed: u64, init_step: f64) -> Self {
        let n = latent.n_curves();
        Self {
            latent,
            rng_seed: seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step_sizes: vec![init_step; n],
            accept_counts: vec![0; n],
            proposal_counts: vec![0; n],
        }
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.accept_counts
            .iter()
            .zip(&self.proposal_counts)
            .map(|(&a, &t)| if t == 0 { 1.0 } else { a as f64 / t as f64 })
            .collect()
    }

    fn reset_counts(&mut self) {
        self.accept_counts.fill(0);
        self.proposal_counts.fill(0);
    }
}

/// Point values of a variational fit, used to start a chain.
pub fn latent_from_vb(vb: &VBState, data: &DMatrix<f64>, config: &ModelConfig) -> LatentState {
    let noisy = config.noisy.then(|| match &vb.noisy {
        Some(q) => NoisyLatent {
            x: q.mu_x.clone(),
            sigma_y_sq: q.b_y / q.a_y,
            eta_x: q.mean_eta_x(),
            lambda_x: q.mean_lambda_x(),
        },
        None => NoisyLatent {
            x: data_rows(data),
            sigma_y_sq: 1.0,
            eta_x: config.hyper.c / config.hyper.d,
            lambda_x: config.hyper.c / config.hyper.d,
        },
    });
    LatentState {
        w: vb.w_hat.clone(),
        z0: vb.z0_full(),
        z1: vb.mu_z1.clone(),
        f: vb.mu_f.clone(),
        sigma_z0_sq: 1.0 / vb.mean_inv_sigma_z0(),
        sigma_z1_sq: 1.0 / vb.mean_inv_sigma_z1(),
        eta_f: vb.mean_eta_f(),
        lambda_f: vb.mean_lambda_f(),
        noisy,
    }
}

/// Data, penalties and the factorizations every sweep reuses.
pub struct Sampler<'a> {
    pub data: &'a DMatrix<f64>,
    pub config: &'a ModelConfig,
    pub pen: &'a PenaltySet,
    rows: Vec<DVector<f64>>,
    priors: BasePriors,
    /// `L` with `L Lᵀ` the prior covariance of each base function.
    proposal_factors: Vec<DMatrix<f64>>,
    /// `γ_R Σ⁻¹`.
    reg_precision: DMatrix<f64>,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a DMatrix<f64>, config: &'a ModelConfig, pen: &'a PenaltySet) -> Result<Self> {
        check_data(data, pen)?;
        config.validate(data.nrows())?;
        let n = data.nrows();
        let priors = BasePriors::new(config, pen, n)?;
        let proposal_factors = (0..n).map(|i| psd_factor(priors.covariance(i))).collect();
        Ok(Self {
            data,
            config,
            pen,
            rows: data_rows(data),
            priors,
            proposal_factors,
            reg_precision: registration_precision(config, pen, None)?,
        })
    }

    fn check_state(&self, latent: &LatentState) -> Result<()> {
        if latent.n_curves() != self.rows.len() {
            return Err(Error::DimensionMismatch {
                context: "chain state curves",
                expected: self.rows.len(),
                found: latent.n_curves(),
            });
        }
        if latent.noisy.is_some() != self.config.noisy {
            return Err(Error::InvalidArgument(
                "latent state and config disagree on the noise model".into(),
            ));
        }
        Ok(())
    }

    /// Curves the registration kernel acts on for curve `i`.
    fn curve<'s>(&'s self, latent: &'s LatentState, i: usize) -> &'s DVector<f64> {
        match &latent.noisy {
            Some(nl) => &nl.x[i],
            None => &self.rows[i],
        }
    }

    fn registered(&self, latent: &LatentState) -> Vec<DVector<f64>> {
        let curves: Vec<DVector<f64>> = match &latent.noisy {
            Some(nl) => nl.x.clone(),
            None => self.rows.clone(),
        };
        registered_curves(&curves, &latent.w, self.pen.grid.points())
    }

    /// Precision of the conjugate blocks' registration kernel.
    fn conjugate_precision(&self, latent: &LatentState) -> Result<DMatrix<f64>> {
        match &latent.noisy {
            None => Ok(self.reg_precision.clone()),
            Some(nl) => registration_precision(self.config, self.pen, Some((nl.eta_x, nl.lambda_x))),
        }
    }

    fn warp_objective<'s>(&'s self, latent: &'s LatentState, i: usize) -> WarpObjective<'s> {
        let p = self.pen.p();
        let pts = self.pen.grid.points();
        WarpObjective {
            points: pts,
            curve_points: pts,
            curve: self.curve(latent, i).as_slice(),
            end: self.pen.grid.last(),
            mean: &latent.f * latent.z1[i] + DVector::from_element(p, latent.z0[i]),
            precision: &self.reg_precision,
            prior_precision: self.priors.precision(i),
        }
    }

    /// Log acceptance ratio for moving base function `i` to the projected `proposal`.
    pub fn mh_log_ratio(&self, latent: &LatentState, i: usize, proposal: &DVector<f64>) -> f64 {
        let obj = self.warp_objective(latent, i);
        let current = latent.w[i].as_slice();
        let pts = self.pen.grid.points();
        obj.value(proposal.as_slice()) - obj.value(current) + log_normal_norm(proposal.as_slice(), pts)
            - log_normal_norm(current, pts)
    }

    /// One Metropolis step on base function `i`. Returns whether it moved.
    pub fn metropolis_base(&self, state: &mut ChainState, i: usize) -> bool {
        let pts = self.pen.grid.points();
        let m = pts.len() - 1;
        let eps = DVector::from_fn(m, |_, _| state.rng.sample::<f64, _>(StandardNormal));
        let step = &self.proposal_factors[i] * eps * state.step_sizes[i];
        let raw = &state.latent.w[i] + step;
        let proposal = DVector::from_vec(project_to_end(raw.as_slice(), pts, self.pen.grid.last()));
        let log_ratio = self.mh_log_ratio(&state.latent, i, &proposal);
        state.proposal_counts[i] += 1;
        let u: f64 = state.rng.random();
        let accept = log_ratio >= 0.0 || u.ln() < log_ratio;
        if accept && proposal.iter().all(|v| v.is_finite()) {
            state.latent.w[i] = proposal;
            state.accept_counts[i] += 1;
            true
        } else {
            false
        }
    }

    /// Redraw one block from its full conditional (or Metropolis for `W`).
    pub fn draw_block(&self, state: &mut ChainState, block: Block, opts: &ChainOptions) -> Result<()> {
        let noisy = state.latent.noisy.is_some();
        if block.noisy_only() && !noisy {
            return Ok(());
        }
        let n = self.rows.len();
        let p = self.pen.p();
        let h = self.config.hyper;
        match block {
            Block::X => {
                for i in 0..n {
                    self.draw_x(state, i, opts.x_conditional)?;
                }
            }
            Block::W => {
                for i in 0..n {
                    for _ in 0..opts.w_steps {
                        self.metropolis_base(state, i);
                    }
                }
            }
            Block::F => self.draw_f(state)?,
            Block::SigmaY => {
                let nl = state.latent.noisy.as_ref().expect("noisy state");
                let ss: f64 = (0..n)
                    .map(|i| (self.rows[i].clone() - &nl.x[i]).norm_squared())
                    .sum();
                let v = draw_inv_gamma(&mut state.rng, h.a + 0.5 * (n * p) as f64, h.b + 0.5 * ss, block)?;
                state.latent.noisy.as_mut().expect("noisy state").sigma_y_sq = v;
            }
            Block::EtaX | Block::LambdaX => {
                let resid = self.residuals(&state.latent);
                let (pen_m, shape) = if block == Block::EtaX {
                    (&self.pen.p1_ginv, h.c + n as f64)
                } else {
                    (&self.pen.p2_ginv, h.c + 0.5 * (n as f64) * (p as f64 - 2.0))
                };
                let rate = h.d + 0.5 * resid.iter().map(|r| quad_form(r, pen_m)).sum::<f64>();
                let v = draw_gamma(&mut state.rng, shape, rate, block)?;
                let nl = state.latent.noisy.as_mut().expect("noisy state");
                if block == Block::EtaX {
                    nl.eta_x = v;
                } else {
                    nl.lambda_x = v;
                }
            }
            Block::Z0 => self.draw_z0(state)?,
            Block::SigmaZ0 => {
                let ss: f64 = state.latent.z0.rows(0, n - 1).iter().map(|z| z * z).sum();
                state.latent.sigma_z0_sq =
                    draw_inv_gamma(&mut state.rng, h.a + 0.5 * (n as f64 - 1.0), h.b + 0.5 * ss, block)?;
            }
            Block::Z1 => self.draw_z1(state)?,
            Block::SigmaZ1 => {
                let ss: f64 = state.latent.z1.iter().map(|z| (z - 1.0) * (z - 1.0)).sum();
                state.latent.sigma_z1_sq =
                    draw_inv_gamma(&mut state.rng, h.a + 0.5 * n as f64, h.b + 0.5 * ss, block)?;
            }
            Block::EtaF => {
                let rate = h.d + 0.5 * quad_form(&state.latent.f, &self.pen.p1_ginv);
                state.latent.eta_f = draw_gamma(&mut state.rng, h.c + 1.0, rate, block)?;
            }
            Block::LambdaF => {
                let rate = h.d + 0.5 * quad_form(&state.latent.f, &self.pen.p2_ginv);
                state.latent.lambda_f = draw_gamma(&mut state.rng, h.c + 0.5 * (p as f64 - 2.0), rate, block)?;
            }
        }
        Ok(())
    }

    /// `X_i(h_i) − z0_i 1 − z1_i f` for every curve.
    fn residuals(&self, latent: &LatentState) -> Vec<DVector<f64>> {
        let p = self.pen.p();
        self.registered(latent)
            .into_iter()
            .enumerate()
            .map(|(i, xh)| xh - &latent.f * latent.z1[i] - DVector::from_element(p, latent.z0[i]))
            .collect()
    }

    fn draw_x(&self, state: &mut ChainState, i: usize, mode: XConditional) -> Result<()> {
        let p = self.pen.p();
        let pts = self.pen.grid.points();
        let latent = &state.latent;
        let nl = latent.noisy.as_ref().expect("noisy state");
        let prior = &self.pen.p1_ginv * nl.eta_x + &self.pen.p2_ginv * nl.lambda_x;
        let tau = 1.0 / nl.sigma_y_sq;
        let shift = DVector::from_element(p, latent.z0[i]);
        let (prec, rhs) = match mode {
            XConditional::Pullback => {
                let r = registration_matrix(pts, latent.w[i].as_slice());
                let rt_prior = r.transpose() * &prior;
                let prec = DMatrix::identity(p, p) * tau + &rt_prior * &r;
                let m = &latent.f * latent.z1[i] + shift;
                (prec, &self.rows[i] * tau + rt_prior * m)
            }
            XConditional::Composed => {
                let f_inv = DVector::from_vec(compose_inverse(latent.f.as_slice(), pts, latent.w[i].as_slice()));
                let m = f_inv * latent.z1[i] + shift;
                (DMatrix::identity(p, p) * tau + &prior, &self.rows[i] * tau + &prior * m)
            }
        };
        let x = draw_gaussian_canonical(&mut state.rng, &prec, &rhs, Block::X)?;
        state.latent.noisy.as_mut().expect("noisy state").x[i] = x;
        Ok(())
    }

    fn draw_f(&self, state: &mut ChainState) -> Result<()> {
        let latent = &state.latent;
        let p = self.pen.p();
        let a = self.conjugate_precision(latent)?;
        let xh = self.registered(latent);
        let mut scale = 0.0;
        let mut acc = DVector::zeros(p);
        for (i, x) in xh.iter().enumerate() {
            let z1 = latent.z1[i];
            scale += z1 * z1;
            acc += (x - DVector::from_element(p, latent.z0[i])) * z1;
        }
        let prec = &a * scale + &self.pen.p1_ginv * latent.eta_f + &self.pen.p2_ginv * latent.lambda_f;
        let rhs = &a * acc;
        state.latent.f = draw_gaussian_canonical(&mut state.rng, &prec, &rhs, Block::F)?;
        Ok(())
    }

    fn draw_z0(&self, state: &mut ChainState) -> Result<()> {
        let n = self.rows.len();
        let p = self.pen.p();
        let a = self.conjugate_precision(&state.latent)?;
        let xh = self.registered(&state.latent);
        let a1 = &a * ones(p);
        let var = 1.0 / (1.0 / state.latent.sigma_z0_sq + 2.0 * a1.sum());
        for i in 0..n - 1 {
            let latent = &state.latent;
            let others: f64 = (0..n - 1).filter(|&j| j != i).map(|j| latent.z0[j]).sum();
            let v = &xh[i] - &xh[n - 1] + &latent.f * (latent.z1[n - 1] - latent.z1[i])
                - DVector::from_element(p, others);
            let mean = var * v.dot(&a1);
            let e: f64 = state.rng.sample(StandardNormal);
            let z = mean + var.sqrt() * e;
            if !z.is_finite() {
                return Err(Error::NonFiniteDraw { block: "z0".into() });
            }
            state.latent.z0[i] = z;
            state.latent.recenter_z0();
        }
        Ok(())
    }

    fn draw_z1(&self, state: &mut ChainState) -> Result<()> {
        let p = self.pen.p();
        let a = self.conjugate_precision(&state.latent)?;
        let xh = self.registered(&state.latent);
        let af = &a * &state.latent.f;
        let inv_s1 = 1.0 / state.latent.sigma_z1_sq;
        let var = 1.0 / (inv_s1 + state.latent.f.dot(&af));
        for (i, x) in xh.iter().enumerate() {
            let r = x - DVector::from_element(p, state.latent.z0[i]);
            let mean = var * (inv_s1 + af.dot(&r));
            let e: f64 = state.rng.sample(StandardNormal);
            let z = mean + var.sqrt() * e;
            if !z.is_finite() {
                return Err(Error::NonFiniteDraw { block: "z1".into() });
            }
            state.latent.z1[i] = z;
        }
        Ok(())
    }

    /// One full sweep in [`Block::ORDER`], skipping the fixed blocks.
    pub fn gibbs_sweep(&self, state: &mut ChainState, opts: &ChainOptions) -> Result<()> {
        self.check_state(&state.latent)?;
        for block in Block::ORDER {
            if !opts.fixed.contains(&block) {
                self.draw_block(state, block, opts)?;
            }
        }
        Ok(())
    }
}

/// `ln ‖(Δ_k e^{w_k})_k‖`, the log of the constraint gradient norm at `w`.
fn log_normal_norm(w: &[f64], points: &[f64]) -> f64 {
    let ss: f64 = points
        .windows(2)
        .zip(w)
        .map(|(t, wk)| {
            let v = (t[1] - t[0]) * wk.exp();
            v * v
        })
        .sum();
    0.5 * ss.ln()
}

/// Draw from `N(Q⁻¹ b, Q⁻¹)` given the precision `Q`.
fn draw_gaussian_canonical(
    rng: &mut ChaCha8Rng,
    prec: &DMatrix<f64>,
    rhs: &DVector<f64>,
    block: Block,
) -> Result<DVector<f64>> {
    let chol = cholesky(prec).ok_or(Error::SingularPrecision { block: block.name() })?;
    let mean = chol.solve(rhs);
    let eps = DVector::from_fn(rhs.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let lt = chol.l().transpose();
    let noise = lt
        .solve_upper_triangular(&eps)
        .ok_or(Error::SingularPrecision { block: block.name() })?;
    let x = mean + noise;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::NonFiniteDraw {
            block: block.name().into(),
        })
    }
}

fn draw_gamma(rng: &mut ChaCha8Rng, shape: f64, rate: f64, block: Block) -> Result<f64> {
    let dist = Gamma::new(shape, 1.0 / rate).map_err(|_| Error::NonFiniteDraw {
        block: block.name().into(),
    })?;
    let v = dist.sample(rng);
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::NonFiniteDraw {
            block: block.name().into(),
        })
    }
}

fn draw_inv_gamma(rng: &mut ChaCha8Rng, shape: f64, scale: f64, block: Block) -> Result<f64> {
    draw_gamma(rng, shape, scale, block).map(|g| 1.0 / g)
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Thinned post-burn-in states.
    pub draws: Vec<LatentState>,
    /// Post-burn-in Metropolis acceptance rate of each base function.
    pub acceptance: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub options: ChainOptions,
    pub config: ModelConfig,
}

/// Run a chain started from `init` (a variational fit) or from the plain
/// initial state of the variational algorithm.
pub fn run_chain(
    data: &DMatrix<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
    opts: &ChainOptions,
    init: Option<&VBState>,
) -> Result<ChainOutput> {
    let latent = match init {
        Some(vb) => latent_from_vb(vb, data, config),
        None => latent_from_vb(&avb_init(data, config, pen)?, data, config),
    };
    run_chain_from(data, config, pen, opts, latent)
}

pub fn run_chain_from(
    data: &DMatrix<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
    opts: &ChainOptions,
    latent: LatentState,
) -> Result<ChainOutput> {
    if opts.thin == 0 {
        return Err(Error::InvalidArgument("thin must be at least 1".into()));
    }
    if opts.iters <= opts.burn_in {
        return Err(Error::InvalidArgument(format!(
            "iters ({}) must exceed burn_in ({})",
            opts.iters, opts.burn_in
        )));
    }
    let sampler = Sampler::new(data, config, pen)?;
    let mut state = ChainState::new(latent, opts.seed, opts.init_step);
    let n = data.nrows();
    let mut batch_acc = vec![0u64; n];
    let mut batch_tot = vec![0u64; n];
    for sweep in 0..opts.burn_in {
        sampler.gibbs_sweep(&mut state, opts)?;
        if opts.adapt && (sweep + 1) % ADAPT_BATCH == 0 {
            for i in 0..n {
                let acc = state.accept_counts[i] - batch_acc[i];
                let tot = state.proposal_counts[i] - batch_tot[i];
                if tot > 0 {
                    let rate = acc as f64 / tot as f64;
                    if !(ACCEPT_LO..=ACCEPT_HI).contains(&rate) {
                        state.step_sizes[i] *= (2.0 * (rate - 0.3)).exp();
                    }
                }
                batch_acc[i] = state.accept_counts[i];
                batch_tot[i] = state.proposal_counts[i];
            }
        }
    }
    state.reset_counts();
    let keep = (opts.iters - opts.burn_in) / opts.thin;
    let mut draws = Vec::with_capacity(keep);
    for k in 1..=opts.iters - opts.burn_in {
        sampler.gibbs_sweep(&mut state, opts)?;
        if k % opts.thin == 0 {
            draws.push(state.latent.clone());
        }
    }
    Ok(ChainOutput {
        draws,
        acceptance: state.acceptance_rates(),
        step_sizes: state.step_sizes.clone(),
        options: opts.clone(),
        config: config.clone(),
    })
}

impl ChainOutput {
    /// Posterior mean of each registered curve. In the noisy model the latent
    /// curves of each draw are registered.
    pub fn mean_registered(&self, data: &DMatrix<f64>, pen: &PenaltySet) -> Vec<DVector<f64>> {
        let n = data.nrows();
        let p = pen.p();
        let pts = pen.grid.points();
        let rows = data_rows(data);
        let mut acc = vec![DVector::zeros(p); n];
        for d in &self.draws {
            for i in 0..n {
                let x = match &d.noisy {
                    Some(nl) => &nl.x[i],
                    None => &rows[i],
                };
                acc[i] += DVector::from_vec(register_curve(x.as_slice(), pts, d.w[i].as_slice()));
            }
        }
        let m = self.draws.len().max(1) as f64;
        acc.into_iter().map(|v| v / m).collect()
    }

    /// Samples of `f`, one per stored draw.
    pub fn target_samples(&self) -> Vec<DVector<f64>> {
        self.draws.iter().map(|d| d.f.clone()).collect()
    }

    pub fn scalar_mean(&self, pick: impl Fn(&LatentState) -> f64) -> f64 {
        self.draws.iter().map(pick).sum::<f64>() / self.draws.len().max(1) as f64
    }

    /// Column names and rows of one block, one row per stored draw. Vector
    /// blocks over curves are flattened curve-major.
    pub fn block_table(&self, block: Block) -> (Vec<String>, Vec<Vec<f64>>) {
        let name = block.name();
        let first = match self.draws.first() {
            Some(d) => d,
            None => return (vec!["draw".into()], Vec::new()),
        };
        let values = |d: &LatentState| -> Vec<f64> {
            match block {
                Block::X => d
                    .noisy
                    .as_ref()
                    .map(|nl| nl.x.iter().flat_map(|x| x.iter().copied()).collect())
                    .unwrap_or_default(),
                Block::W => d.w.iter().flat_map(|w| w.iter().copied()).collect(),
                Block::F => d.f.iter().copied().collect(),
                Block::SigmaY => d.noisy.as_ref().map(|nl| vec![nl.sigma_y_sq]).unwrap_or_default(),
                Block::EtaX => d.noisy.as_ref().map(|nl| vec![nl.eta_x]).unwrap_or_default(),
                Block::LambdaX => d.noisy.as_ref().map(|nl| vec![nl.lambda_x]).unwrap_or_default(),
                Block::Z0 => d.z0.iter().copied().collect(),
                Block::SigmaZ0 => vec![d.sigma_z0_sq],
                Block::Z1 => d.z1.iter().copied().collect(),
                Block::SigmaZ1 => vec![d.sigma_z1_sq],
                Block::EtaF => vec![d.eta_f],
                Block::LambdaF => vec![d.lambda_f],
            }
        };
        let width = values(first).len();
        let mut header = vec!["draw".to_string()];
        let per_curve = matches!(block, Block::X | Block::W);
        let n = first.n_curves();
        for k in 0..width {
            header.push(match (per_curve, width) {
                (true, _) => {
                    let m = width / n;
                    format!("{name}_{}_{}", k / m + 1, k % m + 1)
                }
                (false, 1) => name.to_string(),
                (false, _) => format!("{name}_{}", k + 1),
            });
        }
        let rows = self
            .draws
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let mut row = vec![(k + 1) as f64];
                row.extend(values(d));
                row
            })
            .collect();
        (header, rows)
    }
}

/// Linearly interpolated sample quantile of sorted values (`0 ≤ q ≤ 1`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pointwise equal-tailed band at `level` over a set of sampled vectors.
pub fn credible_band(samples: &[DVector<f64>], level: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    let first = samples.first().ok_or(Error::DegenerateSample { got: 0 })?;
    let p = first.len();
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
    Ok((lower, upper))
}
