//! Oracle checks for the joint density, the variational updates and the
//! Metropolis ratio on small problems.

use gpreg::avb::{
    avb_fit, elbo, update_q_eta_f, update_q_f, update_q_lambda_f, update_q_sigma_z0, update_q_sigma_z1, update_q_z0,
    update_q_z1, AvbOptions, StopRule, VBState,
};
use gpreg::mcmc::{latent_from_vb, Sampler};
use gpreg::model::{data_rows, log_joint, registered_curves, registration_precision, GammaW, LatentState, ModelConfig};
use gpreg::simulate::{simulate_dataset, SimKind, SimOptions};
use gpreg::{build_penalty_set, DerivativeOrder, PenaltySet, TimeGrid};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn setup(p: usize, n: usize) -> (DMatrix<f64>, ModelConfig, PenaltySet) {
    let g = TimeGrid::uniform(0.0, 1.0, p).unwrap();
    let pen = build_penalty_set(&g, DerivativeOrder::Second).unwrap();
    let sim = simulate_dataset(&g, &SimOptions::new(SimKind::Gauss3mix, n, 0.0, 3)).unwrap();
    let config = ModelConfig {
        gamma_w: GammaW::PerCurve((0..n).map(|i| 5.0 + i as f64).collect()),
        lambda_w: 2.0,
        gamma_r: 0.7,
        ..Default::default()
    };
    (sim.curves, config, pen)
}

// ---- independent oracle for the log joint, built from covariances rather than precisions

fn lin(xs: &[f64], ys: &[f64], q: f64) -> f64 {
    let k = (1..xs.len()).find(|&k| q <= xs[k]).unwrap_or(xs.len() - 1);
    let u = (q - xs[k - 1]) / (xs[k] - xs[k - 1]);
    ys[k - 1] + u * (ys[k] - ys[k - 1])
}

fn gauss_kernel(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    -0.5 * x.dot(&cov.clone().lu().solve(x).unwrap())
}

fn oracle_log_joint(data: &DMatrix<f64>, s: &LatentState, c: &ModelConfig, pen: &PenaltySet) -> f64 {
    let pts = pen.grid.points();
    let p = pts.len();
    let n = data.nrows();
    let h = &c.hyper;
    let mut lp = 0.0;
    // f | η, λ ~ N(0, P1/η + P2/λ)
    let cf = &pen.p1 / s.eta_f + &pen.p2 / s.lambda_f;
    lp += gauss_kernel(&s.f, &cf) - 0.5 * cf.determinant().ln();
    for i in 0..n {
        if i + 1 < n {
            lp += -0.5 * (2.0 * std::f64::consts::PI * s.sigma_z0_sq).ln() - 0.5 * s.z0[i].powi(2) / s.sigma_z0_sq;
        }
        lp += -0.5 * (2.0 * std::f64::consts::PI * s.sigma_z1_sq).ln() - 0.5 * (s.z1[i] - 1.0).powi(2) / s.sigma_z1_sq;
        let kw = &pen.sigma_base / c.gamma_w_for(i) + &pen.pw / c.lambda_w;
        lp += gauss_kernel(&s.w[i], &kw);
        let mut hv = vec![pts[0]];
        for k in 1..p {
            hv.push(hv[k - 1] + (pts[k] - pts[k - 1]) * s.w[i][k - 1].exp());
        }
        let row: Vec<f64> = data.row(i).iter().copied().collect();
        let r = DVector::from_fn(p, |j, _| lin(pts, &row, hv[j].min(pts[p - 1])) - s.z0[i] - s.z1[i] * s.f[j]);
        lp += gauss_kernel(&r, &(&pen.sigma / c.gamma_r));
    }
    let ig = |x: f64| -(h.a + 1.0) * x.ln() - h.b / x;
    let ga = |x: f64| (h.c - 1.0) * x.ln() - h.d * x;
    lp + ig(s.sigma_z0_sq) + ig(s.sigma_z1_sq) + ga(s.eta_f) + ga(s.lambda_f)
}

fn random_state(rng: &mut ChaCha8Rng, n: usize, p: usize, pts: &[f64]) -> LatentState {
    let mut normal = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
    let w = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..p - 1).map(|_| normal(0.4)).collect();
            let span: f64 = (1..p).map(|k| (pts[k] - pts[k - 1]) * raw[k - 1].exp()).sum();
            let c = (span / (pts[p - 1] - pts[0])).ln();
            DVector::from_iterator(p - 1, raw.iter().map(|v| v - c))
        })
        .collect();
    let mut z0 = DVector::from_fn(n, |_, _| normal(0.5));
    z0[n - 1] = -z0.rows(0, n - 1).sum();
    LatentState {
        w,
        z0,
        z1: DVector::from_fn(n, |_, _| 1.0 + normal(0.3)),
        f: DVector::from_fn(p, |_, _| normal(1.0)),
        sigma_z0_sq: 0.2 + normal(1.0).abs(),
        sigma_z1_sq: 0.2 + normal(1.0).abs(),
        eta_f: 0.1 + normal(2.0).abs(),
        lambda_f: 0.1 + normal(2.0).abs(),
        noisy: None,
    }
}

#[test]
fn log_joint_matches_a_covariance_form_oracle() {
    let (data, config, pen) = setup(9, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = random_state(&mut rng, 4, 9, pen.grid.points());
    let l0 = log_joint(&data, &base, &config, &pen).unwrap();
    let o0 = oracle_log_joint(&data, &base, &config, &pen);
    for _ in 0..20 {
        let s = random_state(&mut rng, 4, 9, pen.grid.points());
        let dl = log_joint(&data, &s, &config, &pen).unwrap() - l0;
        let doracle = oracle_log_joint(&data, &s, &config, &pen) - o0;
        assert!((dl - doracle).abs() < 1e-7 * (1.0 + doracle.abs()), "{dl} vs {doracle}");
    }
}

// ---- the closed-form updates maximize the ELBO over their block

fn fitted() -> (DMatrix<f64>, ModelConfig, PenaltySet, VBState) {
    let (data, config, pen) = setup(10, 5);
    let opts = AvbOptions {
        stop: StopRule {
            tol: 0.0,
            max_iters: 3,
        },
        ..Default::default()
    };
    let vb = avb_fit(&data, &config, &pen, &opts).unwrap();
    (data, config, pen, vb)
}

/// Central slope and curvature of the ELBO along `dir(state, t)`.
fn probe(
    state: &VBState,
    data: &DMatrix<f64>,
    config: &ModelConfig,
    pen: &PenaltySet,
    step: f64,
    dir: impl Fn(&mut VBState, f64),
) -> (f64, f64, f64) {
    let at = |t: f64| {
        let mut s = state.clone();
        dir(&mut s, t);
        elbo(&s, data, config, pen).unwrap()
    };
    let (lo, mid, hi) = (at(-step), at(0.0), at(step));
    ((hi - lo) / (2.0 * step), hi - mid, lo - mid)
}

fn assert_maximal(name: &str, (slope, up, down): (f64, f64, f64), scale: f64) {
    assert!(slope.abs() < 1e-5 * scale, "{name}: slope {slope}");
    assert!(up <= 1e-9 * scale && down <= 1e-9 * scale, "{name}: moves gain {up}, {down}");
}

#[test]
fn conjugate_updates_are_block_maximizers() {
    let (data, config, pen, mut vb) = fitted();
    let xh = registered_curves(&data_rows(&data), &vb.w_hat, pen.grid.points());
    let a = registration_precision(&config, &pen, None).unwrap();
    let scale = 1.0 + elbo(&vb, &data, &config, &pen).unwrap().abs();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = pen.p();
    let n = data.nrows();

    update_q_f(&mut vb, &xh, &a, &pen).unwrap();
    for _ in 0..3 {
        let v = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        // a direction on the scale of Σ_f itself, so higher-order log-det terms stay small
        let lv = vb.sigma_f.clone().cholesky().unwrap().l() * &v / v.norm();
        let vv = &lv * lv.transpose();
        assert_maximal("mu_f", probe(&vb, &data, &config, &pen, 1e-3, |s, t| s.mu_f += &v * t), scale);
        assert_maximal("sigma_f", probe(&vb, &data, &config, &pen, 1e-3, |s, t| s.sigma_f += &vv * t), scale);
    }

    // coordinate-wise shifts settle after repeated passes
    for _ in 0..500 {
        update_q_z0(&mut vb, &xh, &a);
    }
    for k in 0..n - 1 {
        assert_maximal("mu_z0", probe(&vb, &data, &config, &pen, 1e-3, |s, t| s.mu_z0[k] += t), scale);
        assert_maximal("var_z0", probe(&vb, &data, &config, &pen, 1e-5, |s, t| s.var_z0[k] *= 1.0 + 10.0 * t), scale);
    }

    update_q_z1(&mut vb, &xh, &a);
    for k in 0..n {
        assert_maximal("mu_z1", probe(&vb, &data, &config, &pen, 1e-3, |s, t| s.mu_z1[k] += t), scale);
        assert_maximal("var_z1", probe(&vb, &data, &config, &pen, 1e-5, |s, t| s.var_z1[k] *= 1.0 + 10.0 * t), scale);
    }

    update_q_eta_f(&mut vb, &config, &pen);
    update_q_lambda_f(&mut vb, &config, &pen);
    update_q_sigma_z0(&mut vb, &config);
    update_q_sigma_z1(&mut vb, &config);
    let shape_rate: [(&str, fn(&mut VBState, f64)); 8] = [
        ("c_eta", |s, t| s.c_eta *= 1.0 + t),
        ("d_eta", |s, t| s.d_eta *= 1.0 + t),
        ("c_lambda", |s, t| s.c_lambda *= 1.0 + t),
        ("d_lambda", |s, t| s.d_lambda *= 1.0 + t),
        ("a_z0", |s, t| s.a_z0 *= 1.0 + t),
        ("b_z0", |s, t| s.b_z0 *= 1.0 + t),
        ("a_z1", |s, t| s.a_z1 *= 1.0 + t),
        ("b_z1", |s, t| s.b_z1 *= 1.0 + t),
    ];
    for (name, dir) in shape_rate {
        assert_maximal(name, probe(&vb, &data, &config, &pen, 1e-4, dir), scale);
    }
}

// ---- Metropolis ratio for a base function

/// Log norm of the endpoint-constraint gradient; the density of the projected
/// proposal on the constraint surface carries its reciprocal.
fn constraint_norm(w: &DVector<f64>, pts: &[f64]) -> f64 {
    0.5 * (1..pts.len())
        .map(|k| ((pts[k] - pts[k - 1]) * w[k - 1].exp()).powi(2))
        .sum::<f64>()
        .ln()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mh_ratio_is_the_joint_difference_plus_the_surface_term(seed in 0u64..10_000, curve in 0usize..4) {
        let (data, config, pen) = setup(9, 4);
        let sampler = Sampler::new(&data, &config, &pen).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let current = random_state(&mut rng, 4, 9, pen.grid.points());
        let other = random_state(&mut rng, 4, 9, pen.grid.points());
        let proposal = other.w[curve].clone();
        let mut moved = current.clone();
        moved.w[curve] = proposal.clone();
        let pts = pen.grid.points();
        let expected = log_joint(&data, &moved, &config, &pen).unwrap() - log_joint(&data, &current, &config, &pen).unwrap()
            + constraint_norm(&proposal, pts) - constraint_norm(&current.w[curve], pts);
        let got = sampler.mh_log_ratio(&current, curve, &proposal);
        prop_assert!((got - expected).abs() < 1e-8 * (1.0 + expected.abs()), "{} vs {}", got, expected);
        // reversing the move negates the ratio
        let back = sampler.mh_log_ratio(&moved, curve, &current.w[curve]);
        prop_assert!((got + back).abs() < 1e-8 * (1.0 + got.abs()));
    }
}

#[test]
fn chain_start_copies_the_variational_means() {
    let (data, config, _pen, vb) = fitted();
    let l = latent_from_vb(&vb, &data, &config);
    assert_eq!(l.f, vb.mu_f);
    assert!(l.z0.sum().abs() < 1e-12);
    assert_eq!(l.eta_f, vb.c_eta / vb.d_eta);
    assert_eq!(l.sigma_z1_sq, vb.b_z1 / vb.a_z1);
}
