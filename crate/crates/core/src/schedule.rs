//! Cosine variance schedule and the closed-form forward process on node features.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_K: f64 = 0.01;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;
pub const MIN_BETA: f64 = 1e-8;

/// Noise coefficient used by the closed-form forward process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffusionMode {
    /// `n_t = sqrt(ᾱ_t) x0 + (1 - ᾱ_t) ε`
    #[default]
    Paper,
    /// `n_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε`
    Standard,
}

impl fmt::Display for DiffusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiffusionMode::Paper => "paper",
            DiffusionMode::Standard => "standard",
        })
    }
}

impl FromStr for DiffusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "paper" | "paper-literal" => Ok(DiffusionMode::Paper),
            "standard" => Ok(DiffusionMode::Standard),
            other => Err(Error::InvalidArgument(format!(
                "mode must be `paper` or `standard`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Horizon `T`.
    pub steps: usize,
    /// Standard deviation of every Gaussian draw.
    pub k: f64,
    pub mode: DiffusionMode,
    /// Cosine offset `s`.
    pub offset: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: DEFAULT_STEPS,
            k: DEFAULT_K,
            mode: DiffusionMode::Paper,
            offset: DEFAULT_COSINE_OFFSET,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// Indexed by `t` in `0..=T`, with `ᾱ_0 = 1`.
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Noisy target nodes together with the exact draw that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyNodes {
    pub values: Vec<f64>,
    pub t: usize,
    pub noise: Vec<f64>,
}

pub fn cosine_schedule(config: ScheduleConfig) -> Result<NoiseSchedule> {
    if config.steps < 1 {
        return Err(Error::InvalidArgument("T must be at least 1".into()));
    }
    if !config.k.is_finite() || config.k <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "k must be positive, got {}",
            config.k
        )));
    }
    if config.offset.is_nan() || config.offset < 0.0 {
        return Err(Error::InvalidArgument("cosine offset must be >= 0".into()));
    }
    let steps = config.steps;
    let s = config.offset;
    let f = |t: usize| {
        let x = ((t as f64 / steps as f64) + s) / (1.0 + s) * FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let target_bar = |t: usize| f(t) / f0;

    let mut betas = Vec::with_capacity(steps);
    for t in 1..=steps {
        let b = 1.0 - target_bar(t) / target_bar(t - 1);
        betas.push(b.clamp(MIN_BETA, MAX_BETA));
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps + 1);
    alpha_bars.push(1.0);
    for a in &alphas {
        let prev = *alpha_bars.last().expect("nonempty");
        alpha_bars.push(prev * a);
    }
    let sigmas = (1..=steps)
        .map(|t| (betas[t - 1] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t])).sqrt())
        .collect();
    Ok(NoiseSchedule {
        config,
        betas,
        alphas,
        alpha_bars,
        sigmas,
    })
}

/// I.i.d. `N(0, k²)` entries.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, k: f64) -> Vec<f64> {
    (0..n)
        .map(|_| k * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

impl NoiseSchedule {
    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn k(&self) -> f64 {
        self.config.k
    }

    pub fn mode(&self) -> DiffusionMode {
        self.config.mode
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Coefficient multiplying `ε` in the closed-form forward process.
    pub fn noise_coefficient(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        match self.mode() {
            DiffusionMode::Paper => 1.0 - ab,
            DiffusionMode::Standard => (1.0 - ab).sqrt(),
        }
    }

    pub fn forward_diffuse(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<NoisyNodes> {
        self.check_t(t)?;
        if x0.len() != noise.len() {
            return Err(Error::ShapeMismatch {
                op: "forward_diffuse",
                lhs: vec![x0.len()],
                rhs: vec![noise.len()],
            });
        }
        let signal = self.alpha_bar(t).sqrt();
        let c = self.noise_coefficient(t);
        Ok(NoisyNodes {
            values: x0
                .iter()
                .zip(noise)
                .map(|(x, e)| signal * x + c * e)
                .collect(),
            t,
            noise: noise.to_vec(),
        })
    }

    /// Writes `t,beta,alpha,alpha_bar,sigma` for `t = 1..=T`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["t", "beta", "alpha", "alpha_bar", "sigma"])?;
        for t in 1..=self.steps() {
            w.write_record([
                t.to_string(),
                self.beta(t).to_string(),
                self.alpha(t).to_string(),
                self.alpha_bar(t).to_string(),
                self.sigma(t).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
