use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gpreg::model::GammaW;
use gpreg::simulate::SimKind;
use gpreg_cli::commands::{self, Output, SimulateArgs};
use gpreg_cli::config::RunConfig;
use gpreg_cli::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "gpreg", version, about = "Bayesian registration of functional data")]
struct Cli {
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, global = true, default_value = "gpreg-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    gamma_r: Option<f64>,
    /// Global warping penalty; per-curve values go in the config file.
    #[arg(long, global = true)]
    gamma_w: Option<f64>,
    #[arg(long, global = true)]
    lambda_w: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register noiseless curves with the variational fit.
    Register { input: PathBuf },
    /// Smooth and register noisy curves.
    SmoothRegister {
        input: PathBuf,
        /// Smooth with identity warps first, then register the smoothed curves.
        #[arg(long)]
        presmooth_only: bool,
    },
    /// Run the Metropolis-within-Gibbs sampler from a variational start.
    Mcmc {
        input: PathBuf,
        /// Use the noisy-observation model.
        #[arg(long)]
        noisy: bool,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        thin: Option<usize>,
    },
    /// Complete a partially observed curve from a training sample.
    Predict {
        input: PathBuf,
        /// One-row curve file whose header is a prefix of the training grid.
        #[arg(long)]
        partial: PathBuf,
        /// Bootstrap outer resamples (0 skips the bands).
        #[arg(long)]
        bootstrap_m: Option<usize>,
        #[arg(long)]
        bootstrap_s: Option<usize>,
    },
    /// Alignment score of registered curves against the originals.
    Sls { original: PathBuf, registered: PathBuf },
    /// Relabel registered time so the mean warp is the identity.
    CorrectTime { warps: PathBuf, registered: PathBuf },
    /// Write a synthetic data set with its ground truth.
    Simulate {
        #[arg(long, default_value = "gauss3mix")]
        kind: SimKind,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, default_value_t = 0.0)]
        lo: f64,
        #[arg(long, default_value_t = 1.0)]
        hi: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_sd: f64,
    },
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(t) = cli.threads {
        c.threads = Some(t);
    }
    if let Some(v) = cli.gamma_r {
        c.model.gamma_r = v;
    }
    if let Some(v) = cli.gamma_w {
        c.model.gamma_w = GammaW::Global(v);
    }
    if let Some(v) = cli.lambda_w {
        c.model.lambda_w = v;
    }
    match &cli.command {
        Command::Mcmc {
            iters, burn_in, thin, ..
        } => {
            c.mcmc.iters = iters.unwrap_or(c.mcmc.iters);
            c.mcmc.burn_in = burn_in.unwrap_or(c.mcmc.burn_in);
            c.mcmc.thin = thin.unwrap_or(c.mcmc.thin);
        }
        Command::Predict {
            bootstrap_m,
            bootstrap_s,
            ..
        } => {
            c.predict.bootstrap_m = bootstrap_m.unwrap_or(c.predict.bootstrap_m);
            c.predict.bootstrap_s = bootstrap_s.unwrap_or(c.predict.bootstrap_s);
        }
        _ => {}
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> CliResult<()> {
    let config = resolve(&cli)?;
    if let Some(n) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let out = Output::new(&cli.out)?;
    match &cli.command {
        Command::Register { input } => commands::register(input, &out, &config),
        Command::SmoothRegister { input, presmooth_only } => {
            commands::smooth_register(input, &out, &config, *presmooth_only)
        }
        Command::Mcmc { input, noisy, .. } => commands::mcmc(input, &out, &config, *noisy),
        Command::Predict { input, partial, .. } => commands::predict(input, partial, &out, &config),
        Command::Sls { original, registered } => commands::sls_cmd(original, registered, &out, &config),
        Command::CorrectTime { warps, registered } => commands::correct_time(warps, registered, &out, &config),
        Command::Simulate {
            kind,
            n,
            points,
            lo,
            hi,
            noise_sd,
        } => {
            let args = SimulateArgs {
                kind: *kind,
                n_curves: *n,
                points: *points,
                lo: *lo,
                hi: *hi,
                noise_sd: *noise_sd,
            };
            commands::simulate(&args, &out, &config)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
