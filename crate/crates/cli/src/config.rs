//! Run configuration read from a TOML file. Every section and key is
//! optional; unknown keys are rejected. Command-line flags override the file.

use std::path::Path;

use gpreg::avb::{AvbOptions, OptimizerOptions, PenaltyPhase, StopRule};
use gpreg::mcmc::{ChainOptions, XConditional};
use gpreg::model::{GammaW, Hyperparams, ModelConfig};
use gpreg::prediction::{BootstrapOptions, PartialOptions, Ridge};
use gpreg::smoothing::NoisyOptions;
use gpreg::DerivativeOrder;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; unset means all available cores.
    pub threads: Option<usize>,
    pub model: ModelSection,
    pub avb: AvbSection,
    pub noisy: NoisySection,
    pub mcmc: McmcSection,
    pub predict: PredictSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: None,
            model: ModelSection::default(),
            avb: AvbSection::default(),
            noisy: NoisySection::default(),
            mcmc: McmcSection::default(),
            predict: PredictSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub gamma_r: f64,
    /// A number, or one value per curve.
    pub gamma_w: GammaW,
    pub lambda_w: f64,
    /// Derivative order of the warping roughness penalty (1 or 2).
    pub order_w: u8,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            gamma_r: m.gamma_r,
            gamma_w: m.gamma_w,
            lambda_w: m.lambda_w,
            order_w: 2,
            a: m.hyper.a,
            b: m.hyper.b,
            c: m.hyper.c,
            d: m.hyper.d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvbSection {
    pub tol: f64,
    pub max_iters: usize,
    pub optimizer_iters: usize,
    pub identity_restart: bool,
    /// Optional penalty stages run in order before convergence.
    pub schedule: Vec<PenaltyPhase>,
}

impl Default for AvbSection {
    fn default() -> Self {
        let s = StopRule::default();
        let o = OptimizerOptions::default();
        Self {
            tol: s.tol,
            max_iters: s.max_iters,
            optimizer_iters: o.max_iters,
            identity_restart: o.identity_restart,
            schedule: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoisySection {
    pub freeze_x_after: usize,
    pub known_noise_var: Option<f64>,
}

impl Default for NoisySection {
    fn default() -> Self {
        let n = NoisyOptions::default();
        Self {
            freeze_x_after: n.freeze_x_after,
            known_noise_var: n.known_noise_var,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSection {
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub init_step: f64,
    pub adapt: bool,
    pub w_steps: usize,
    pub x_conditional: XConditional,
    /// Level of the reported credible bands.
    pub level: f64,
}

impl Default for McmcSection {
    fn default() -> Self {
        let c = ChainOptions::default();
        Self {
            iters: c.iters,
            burn_in: c.burn_in,
            thin: c.thin,
            init_step: c.init_step,
            adapt: c.adapt,
            w_steps: c.w_steps,
            x_conditional: c.x_conditional,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    /// Explicit candidate final registration times; empty means a regular
    /// window around the last observed time.
    pub window: Vec<f64>,
    pub window_half_width: f64,
    pub window_step: f64,
    /// Ridge on the sample covariances, relative to their mean diagonal.
    pub ridge: f64,
    pub sigma_z0_sq: f64,
    pub sigma_z1_sq: f64,
    /// Bootstrap outer and inner sample counts; `bootstrap_m = 0` skips the bands.
    pub bootstrap_m: usize,
    pub bootstrap_s: usize,
    pub level: f64,
}

impl Default for PredictSection {
    fn default() -> Self {
        let p = PartialOptions::default();
        let b = BootstrapOptions::default();
        let ridge = match Ridge::default() {
            Ridge::Relative(k) => k,
            Ridge::Absolute(v) => v,
        };
        Self {
            window: Vec::new(),
            window_half_width: 0.2,
            window_step: 0.01,
            ridge,
            sigma_z0_sq: p.sigma_z0_sq,
            sigma_z1_sq: p.sigma_z1_sq,
            bootstrap_m: b.m,
            bootstrap_s: b.s,
            level: b.level,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn model_config(&self, noisy: bool) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            gamma_r: m.gamma_r,
            gamma_w: m.gamma_w.clone(),
            lambda_w: m.lambda_w,
            hyper: Hyperparams {
                a: m.a,
                b: m.b,
                c: m.c,
                d: m.d,
            },
            noisy,
        }
    }

    pub fn order_w(&self) -> CliResult<DerivativeOrder> {
        DerivativeOrder::from_order(self.model.order_w).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn avb_options(&self) -> AvbOptions {
        AvbOptions {
            stop: StopRule {
                tol: self.avb.tol,
                max_iters: self.avb.max_iters,
            },
            optimizer: OptimizerOptions {
                max_iters: self.avb.optimizer_iters,
                identity_restart: self.avb.identity_restart,
                ..OptimizerOptions::default()
            },
            schedule: self.avb.schedule.clone(),
        }
    }

    pub fn noisy_options(&self) -> NoisyOptions {
        NoisyOptions {
            avb: self.avb_options(),
            freeze_x_after: self.noisy.freeze_x_after,
            known_noise_var: self.noisy.known_noise_var,
        }
    }

    pub fn chain_options(&self) -> ChainOptions {
        let m = &self.mcmc;
        ChainOptions {
            iters: m.iters,
            burn_in: m.burn_in,
            thin: m.thin,
            seed: self.seed,
            init_step: m.init_step,
            adapt: m.adapt,
            w_steps: m.w_steps,
            fixed: Vec::new(),
            x_conditional: m.x_conditional,
        }
    }

    pub fn partial_options(&self) -> PartialOptions {
        PartialOptions {
            sigma_z0_sq: self.predict.sigma_z0_sq,
            sigma_z1_sq: self.predict.sigma_z1_sq,
            optimizer: self.avb_options().optimizer,
            ..PartialOptions::default()
        }
    }

    pub fn bootstrap_options(&self) -> BootstrapOptions {
        BootstrapOptions {
            m: self.predict.bootstrap_m,
            s: self.predict.bootstrap_s,
            level: self.predict.level,
            ridge: Ridge::Relative(self.predict.ridge),
            seed: self.seed,
        }
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.order_w()?;
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if self.mcmc.thin == 0 {
            return bad("mcmc.thin must be at least 1".into());
        }
        if self.mcmc.iters <= self.mcmc.burn_in {
            return bad(format!(
                "mcmc.iters ({}) must exceed mcmc.burn_in ({})",
                self.mcmc.iters, self.mcmc.burn_in
            ));
        }
        for (name, v) in [("mcmc.level", self.mcmc.level), ("predict.level", self.predict.level)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("predict.window_half_width", self.predict.window_half_width),
            ("predict.window_step", self.predict.window_step),
            ("predict.sigma_z0_sq", self.predict.sigma_z0_sq),
            ("predict.sigma_z1_sq", self.predict.sigma_z1_sq),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.predict.ridge >= 0.0 && self.predict.ridge.is_finite()) {
            return bad(format!("predict.ridge must be ≥ 0, got {}", self.predict.ridge));
        }
        if self.predict.bootstrap_m > 0 && self.predict.bootstrap_s == 0 {
            return bad("predict.bootstrap_s must be at least 1".into());
        }
        Ok(())
    }
}
