//! Subcommand implementations. Each writes its CSV outputs and a
//! `summary.json` into the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use gpreg::avb::{avb_fit, registered_from_state, VBState};
use gpreg::mcmc::{credible_band, run_chain, Block};
use gpreg::metrics::{mean_warp_correction, sls};
use gpreg::model::{registered_curves, ModelConfig};
use gpreg::prediction::{bootstrap_bands, fit_empirical_laws, predict_complete, Band, PartialObservation, Ridge};
use gpreg::simulate::{simulate_dataset, SimKind, SimOptions};
use gpreg::smoothing::{avb_fit_noisy, presmooth};
use gpreg::warping::warp_values;
use gpreg::{build_penalty_set, PenaltySet, TimeGrid};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{load_curves, write_columns, write_curves, write_table, Curves};

/// Normal quantile for a central interval of the given level.
fn normal_quantile(level: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(0.5 + 0.5 * level)
}

pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn new(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn summary(&self, command: &str, config: &RunConfig, started: Instant, mut body: Value) -> CliResult<()> {
        let obj = body.as_object_mut().expect("summary body is an object");
        obj.insert("command".into(), json!(command));
        obj.insert("seed".into(), json!(config.seed));
        obj.insert("config".into(), serde_json::to_value(config).expect("config serializes"));
        obj.entry("timings").or_insert_with(|| json!({})).as_object_mut().expect("timings object").insert(
            "total_seconds".into(),
            json!(started.elapsed().as_secs_f64()),
        );
        let path = self.path("summary.json");
        let text = serde_json::to_string_pretty(&body).expect("summary serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}

fn rows(m: &[DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(m.len(), m[0].len(), |i, j| m[i][j])
}

fn warps_of(w: &[DVector<f64>], grid: &TimeGrid) -> DMatrix<f64> {
    let hs: Vec<DVector<f64>> = w
        .iter()
        .map(|wi| {
            let mut h = warp_values(wi.as_slice(), grid.points());
            let n = h.len();
            h[n - 1] = grid.last();
            DVector::from_vec(h)
        })
        .collect();
    rows(&hs)
}

fn penalties_for(curves: &Curves, config: &RunConfig) -> CliResult<PenaltySet> {
    Ok(build_penalty_set(&curves.grid, config.order_w()?)?)
}

/// Registered curves, warps, bases, target with its q-band, and shift/scale estimates.
fn write_registration(
    out: &Output,
    vb: &VBState,
    registered: &DMatrix<f64>,
    grid: &TimeGrid,
    level: f64,
) -> CliResult<()> {
    write_curves(&out.path("registered.csv"), grid.points(), registered)?;
    write_curves(&out.path("warps.csv"), grid.points(), &warps_of(&vb.w_hat, grid))?;
    write_curves(&out.path("bases.csv"), grid.base_points(), &rows(&vb.w_hat))?;
    let z = normal_quantile(level);
    let est: Vec<f64> = vb.mu_f.iter().copied().collect();
    let sd: Vec<f64> = (0..est.len()).map(|j| vb.sigma_f[(j, j)].sqrt()).collect();
    let lo: Vec<f64> = est.iter().zip(&sd).map(|(m, s)| m - z * s).collect();
    let hi: Vec<f64> = est.iter().zip(&sd).map(|(m, s)| m + z * s).collect();
    write_columns(
        &out.path("target.csv"),
        &[("time", grid.points()), ("estimate", &est), ("lower", &lo), ("upper", &hi)],
    )?;
    let n = vb.n_curves();
    let idx: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    let z0: Vec<f64> = vb.z0_full().iter().copied().collect();
    let z1: Vec<f64> = vb.mu_z1.iter().copied().collect();
    write_columns(&out.path("params.csv"), &[("curve", &idx), ("z0", &z0), ("z1", &z1)])
}

fn vb_summary(vb: &VBState) -> Value {
    let mut status = serde_json::Map::new();
    for s in &vb.base_status {
        let key = serde_json::to_value(s).expect("status serializes");
        let key = key.as_str().unwrap_or("unknown").to_string();
        let e = status.entry(key).or_insert(json!(0));
        *e = json!(e.as_u64().unwrap_or(0) + 1);
    }
    json!({
        "iterations": vb.iterations,
        "stop_reason": vb.stop_reason,
        "elbo_trace": vb.elbo_trace,
        "elbo_monotone": vb.elbo_monotone(),
        "base_step_status": status,
    })
}

fn sls_pair(original: &DMatrix<f64>, registered: &DMatrix<f64>, grid: &TimeGrid) -> CliResult<Value> {
    let before = sls(original, original, grid)?;
    let after = sls(original, registered, grid)?;
    Ok(json!({ "before": before, "after": after }))
}

pub fn register(input: &Path, out: &Output, config: &RunConfig) -> CliResult<()> {
    let started = Instant::now();
    let curves = load_curves(input)?;
    let pen = penalties_for(&curves, config)?;
    let model = config.model_config(false);
    let t = Instant::now();
    let vb = avb_fit(&curves.values, &model, &pen, &config.avb_options())?;
    let fit_seconds = t.elapsed().as_secs_f64();
    let registered = rows(&registered_from_state(&vb, &curves.values, &pen));
    write_registration(out, &vb, &registered, &curves.grid, config.mcmc.level)?;
    let body = json!({
        "input": input.display().to_string(),
        "n_curves": curves.values.nrows(),
        "n_points": curves.grid.len(),
        "sls": sls_pair(&curves.values, &registered, &curves.grid)?,
        "avb": vb_summary(&vb),
        "timings": { "avb_seconds": fit_seconds },
    });
    out.summary("register", config, started, body)
}

pub fn smooth_register(input: &Path, out: &Output, config: &RunConfig, presmooth_only: bool) -> CliResult<()> {
    let started = Instant::now();
    let curves = load_curves(input)?;
    let pen = penalties_for(&curves, config)?;
    let model = config.model_config(true);
    let opts = config.noisy_options();
    let t = Instant::now();
    let (smoothed, vb, sigma_y_sq, warnings) = if presmooth_only {
        // smooth with identity warps, then register the smooth curves as if noiseless
        let (smoothed, smooth_state) = presmooth(&curves.values, &model, &pen, &opts)?;
        let s2 = smooth_state.noisy.as_ref().map(|q| q.mean_sigma_y_sq());
        let noiseless = ModelConfig {
            noisy: false,
            ..model.clone()
        };
        let vb = avb_fit(&smoothed, &noiseless, &pen, &opts.avb)?;
        (smoothed, vb, s2, Vec::new())
    } else {
        let fit = avb_fit_noisy(&curves.values, &model, &pen, &opts)?;
        let q = fit.state.noisy.as_ref().expect("noisy fit keeps q(X)");
        let smoothed = rows(&q.mu_x);
        let s2 = Some(q.mean_sigma_y_sq());
        (smoothed, fit.state, s2, fit.warnings)
    };
    let fit_seconds = t.elapsed().as_secs_f64();
    let smoothed_rows: Vec<DVector<f64>> = (0..smoothed.nrows()).map(|i| smoothed.row(i).transpose()).collect();
    let registered = rows(&registered_curves(&smoothed_rows, &vb.w_hat, curves.grid.points()));
    write_registration(out, &vb, &registered, &curves.grid, config.mcmc.level)?;
    write_curves(&out.path("smoothed.csv"), curves.grid.points(), &smoothed)?;
    let body = json!({
        "input": input.display().to_string(),
        "pipeline": if presmooth_only { "presmooth-then-register" } else { "joint" },
        "n_curves": curves.values.nrows(),
        "n_points": curves.grid.len(),
        "sigma_y_sq": sigma_y_sq,
        "sls": sls_pair(&smoothed, &registered, &curves.grid)?,
        "avb": vb_summary(&vb),
        "warnings": warnings,
        "timings": { "fit_seconds": fit_seconds },
    });
    out.summary("smooth-register", config, started, body)
}

pub fn mcmc(input: &Path, out: &Output, config: &RunConfig, noisy: bool) -> CliResult<()> {
    let started = Instant::now();
    let curves = load_curves(input)?;
    let pen = penalties_for(&curves, config)?;
    let model = config.model_config(noisy);
    let t = Instant::now();
    let vb = if noisy {
        avb_fit_noisy(&curves.values, &model, &pen, &config.noisy_options())?.state
    } else {
        avb_fit(&curves.values, &model, &pen, &config.avb_options())?
    };
    let init_seconds = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let chain = run_chain(&curves.values, &model, &pen, &config.chain_options(), Some(&vb))?;
    let chain_seconds = t.elapsed().as_secs_f64();
    for block in Block::ORDER {
        let (header, table) = chain.block_table(block);
        if header.len() > 1 {
            write_table(&out.path(&format!("draws_{}.csv", block.name())), &header, &table)?;
        }
    }
    let grid = &curves.grid;
    let mean_reg = rows(&chain.mean_registered(&curves.values, &pen));
    write_curves(&out.path("registered.csv"), grid.points(), &mean_reg)?;
    let targets = chain.target_samples();
    let (lo, hi) = credible_band(&targets, config.mcmc.level)?;
    let mean = targets.iter().fold(DVector::zeros(grid.len()), |acc, f| acc + f) / targets.len() as f64;
    write_columns(
        &out.path("target.csv"),
        &[
            ("time", grid.points()),
            ("estimate", mean.as_slice()),
            ("lower", lo.as_slice()),
            ("upper", hi.as_slice()),
        ],
    )?;
    let scalar = |pick: fn(&gpreg::model::LatentState) -> f64| chain.scalar_mean(pick);
    let mut means = json!({
        "sigma_z0_sq": scalar(|d| d.sigma_z0_sq),
        "sigma_z1_sq": scalar(|d| d.sigma_z1_sq),
        "eta_f": scalar(|d| d.eta_f),
        "lambda_f": scalar(|d| d.lambda_f),
    });
    if noisy {
        let m = means.as_object_mut().expect("object");
        m.insert("sigma_y_sq".into(), json!(scalar(|d| d.noisy.as_ref().map_or(f64::NAN, |n| n.sigma_y_sq))));
        m.insert("eta_x".into(), json!(scalar(|d| d.noisy.as_ref().map_or(f64::NAN, |n| n.eta_x))));
        m.insert("lambda_x".into(), json!(scalar(|d| d.noisy.as_ref().map_or(f64::NAN, |n| n.lambda_x))));
    }
    let body = json!({
        "input": input.display().to_string(),
        "noisy": noisy,
        "draws": chain.draws.len(),
        "acceptance_rates": chain.acceptance,
        "step_sizes": chain.step_sizes,
        "posterior_means": means,
        "sls": sls_pair(&curves.values, &mean_reg, grid)?,
        "init": vb_summary(&vb),
        "timings": { "init_seconds": init_seconds, "chain_seconds": chain_seconds },
    });
    out.summary("mcmc", config, started, body)
}

fn band_columns(path: &Path, times: &[f64], est: &DVector<f64>, band: Option<&Band>) -> CliResult<()> {
    match band {
        Some(b) => write_columns(
            path,
            &[
                ("time", times),
                ("estimate", est.as_slice()),
                ("lower", b.lower.as_slice()),
                ("upper", b.upper.as_slice()),
            ],
        ),
        None => write_columns(path, &[("time", times), ("estimate", est.as_slice())]),
    }
}

pub fn predict(input: &Path, partial_path: &Path, out: &Output, config: &RunConfig) -> CliResult<()> {
    let started = Instant::now();
    let curves = load_curves(input)?;
    let grid = &curves.grid;
    let partial_file = load_curves(partial_path)?;
    let r = partial_file.grid.len();
    let p = grid.len();
    if r >= p {
        return Err(CliError::Usage(format!(
            "partial curve has {r} observed times but the grid has {p}; need r < p"
        )));
    }
    if partial_file.values.nrows() != 1 {
        return Err(CliError::Data(format!(
            "{}: expected exactly one partial curve, found {}",
            partial_path.display(),
            partial_file.values.nrows()
        )));
    }
    let span = grid.last() - grid.first();
    for (k, (a, b)) in partial_file.grid.points().iter().zip(grid.points()).enumerate() {
        if (a - b).abs() > 1e-9 * span {
            return Err(CliError::Data(format!(
                "partial curve time {a} at column {} does not match grid time {b}",
                k + 1
            )));
        }
    }
    let partial = PartialObservation::new(partial_file.values.row(0).iter().copied().collect(), grid)?;
    let pen = penalties_for(&curves, config)?;
    let model = config.model_config(false);
    let t = Instant::now();
    let vb = avb_fit(&curves.values, &model, &pen, &config.avb_options())?;
    let fit_seconds = t.elapsed().as_secs_f64();
    let reg_est = rows(&registered_from_state(&vb, &curves.values, &pen));
    let base_est = rows(&vb.w_hat);
    let law = fit_empirical_laws(&reg_est, &base_est, Ridge::Relative(config.predict.ridge))?;
    let t_r = grid.points()[r - 1];
    let window: Vec<f64> = if config.predict.window.is_empty() {
        let half = config.predict.window_half_width;
        let step = config.predict.window_step;
        let k = (2.0 * half / step).round() as usize;
        (0..=k)
            .map(|j| t_r - half + j as f64 * step)
            .filter(|&t| t > grid.first() && t < grid.last())
            .collect()
    } else {
        config.predict.window.clone()
    };
    let popts = config.partial_options();
    let t = Instant::now();
    let (pred, sel) = predict_complete(&partial, &law, &window, &model, &pen, &popts)?;
    let predict_seconds = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let bands = if config.predict.bootstrap_m > 0 {
        Some(bootstrap_bands(
            &partial,
            &reg_est,
            &base_est,
            pred.t_f,
            &model,
            &pen,
            &popts,
            &config.bootstrap_options(),
        )?)
    } else {
        None
    };
    let bootstrap_seconds = t.elapsed().as_secs_f64();
    let pts = grid.points();
    band_columns(&out.path("registered.csv"), pts, &pred.registered_full, bands.as_ref().map(|b| &b.registered))?;
    band_columns(&out.path("warp.csv"), pts, &pred.warp_full, bands.as_ref().map(|b| &b.warp))?;
    band_columns(
        &out.path("unregistered.csv"),
        pts,
        &pred.unregistered_full,
        bands.as_ref().map(|b| &b.unregistered),
    )?;
    band_columns(&out.path("base.csv"), grid.base_points(), &pred.base_full, None)?;
    let cand_t: Vec<f64> = sel.candidates.iter().map(|c| c.0).collect();
    let cand_d: Vec<f64> = sel.candidates.iter().map(|c| c.1).collect();
    write_columns(&out.path("selection.csv"), &[("t_f", &cand_t), ("distance", &cand_d)])?;
    let body = json!({
        "input": input.display().to_string(),
        "partial": partial_path.display().to_string(),
        "observed_points": r,
        "t_r": t_r,
        "t_f": pred.t_f,
        "distance": sel.distance,
        "partial_z0": sel.registration.z0,
        "partial_z1": sel.registration.z1,
        "bootstrap": bands.as_ref().map(|b| json!({ "m": b.m, "s": b.s, "failed": b.failed })),
        "avb": vb_summary(&vb),
        "timings": {
            "avb_seconds": fit_seconds,
            "predict_seconds": predict_seconds,
            "bootstrap_seconds": bootstrap_seconds,
        },
    });
    out.summary("predict", config, started, body)
}

fn same_grid(a: &Curves, b: &Curves, what: &str) -> CliResult<()> {
    if a.grid != b.grid || a.values.shape() != b.values.shape() {
        return Err(CliError::Data(format!(
            "{what}: files disagree on the grid or number of curves ({}×{} vs {}×{})",
            a.values.nrows(),
            a.values.ncols(),
            b.values.nrows(),
            b.values.ncols()
        )));
    }
    Ok(())
}

pub fn sls_cmd(original: &Path, registered: &Path, out: &Output, config: &RunConfig) -> CliResult<()> {
    let started = Instant::now();
    let a = load_curves(original)?;
    let b = load_curves(registered)?;
    same_grid(&a, &b, "sls")?;
    let report = sls(&a.values, &b.values, &a.grid)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    let body = json!({
        "original": original.display().to_string(),
        "registered": registered.display().to_string(),
        "sls": report,
    });
    out.summary("sls", config, started, body)
}

pub fn correct_time(warps: &Path, registered: &Path, out: &Output, config: &RunConfig) -> CliResult<()> {
    let started = Instant::now();
    let w = load_curves(warps)?;
    let x = load_curves(registered)?;
    same_grid(&w, &x, "correct-time")?;
    let res = mean_warp_correction(&w.values, &x.values, &w.grid)?;
    let pts = w.grid.points();
    write_curves(&out.path("corrected_registered.csv"), pts, &res.registered)?;
    write_curves(&out.path("corrected_warps.csv"), pts, &res.warps)?;
    write_columns(
        &out.path("corrected_times.csv"),
        &[("time", pts), ("corrected_time", &res.corrected_times)],
    )?;
    let mean = res.warps.row_mean();
    let dev = mean.iter().zip(pts).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let body = json!({
        "warps": warps.display().to_string(),
        "registered": registered.display().to_string(),
        "max_mean_warp_deviation": dev,
    });
    out.summary("correct-time", config, started, body)
}

pub struct SimulateArgs {
    pub kind: SimKind,
    pub n_curves: usize,
    pub points: usize,
    pub lo: f64,
    pub hi: f64,
    pub noise_sd: f64,
}

pub fn simulate(args: &SimulateArgs, out: &Output, config: &RunConfig) -> CliResult<()> {
    let started = Instant::now();
    if args.n_curves < 2 {
        return Err(CliError::Usage(format!("need at least 2 curves, got {}", args.n_curves)));
    }
    if !(args.noise_sd >= 0.0 && args.noise_sd.is_finite()) {
        return Err(CliError::Usage(format!("noise sd must be ≥ 0, got {}", args.noise_sd)));
    }
    let grid = TimeGrid::uniform(args.lo, args.hi, args.points)?;
    let opts = SimOptions::new(args.kind, args.n_curves, args.noise_sd, config.seed);
    let sim = simulate_dataset(&grid, &opts)?;
    let pts = grid.points();
    write_curves(&out.path("curves.csv"), pts, &sim.curves)?;
    write_curves(&out.path("noiseless.csv"), pts, &sim.noiseless)?;
    write_curves(&out.path("warps.csv"), pts, &sim.warps)?;
    write_curves(&out.path("bases.csv"), grid.base_points(), &sim.bases)?;
    write_columns(&out.path("template.csv"), &[("time", pts), ("value", sim.template.as_slice())])?;
    let idx: Vec<f64> = (1..=args.n_curves).map(|i| i as f64).collect();
    write_columns(
        &out.path("params.csv"),
        &[("curve", &idx), ("z0", sim.z0.as_slice()), ("z1", sim.z1.as_slice())],
    )?;
    let body = json!({ "simulation": opts, "grid": { "lo": args.lo, "hi": args.hi, "points": args.points } });
    out.summary("simulate", config, started, body)
}
