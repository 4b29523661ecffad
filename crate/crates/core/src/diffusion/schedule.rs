use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BetaSpec {
    Linear { start: f64, end: f64 },
}

impl Default for BetaSpec {
    fn default() -> Self {
        BetaSpec::Linear {
            start: 1e-4,
            end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// sigma = 0
    #[default]
    Ddim,
    Ddpm,
}

/// Denominator of the denoised estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    /// `sqrt(alpha_bar_t)`, the exact inverse of the forward process.
    #[default]
    Standard,
    /// `sqrt(alpha_t)` with the per-step alpha of the respaced chain.
    Eq3Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta: BetaSpec,
    #[serde(rename = "T_prime")]
    pub respaced: usize,
    pub t0: usize,
    pub sigma: SigmaMode,
    pub denominator: Denominator,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta: BetaSpec::default(),
            respaced: 50,
            t0: 25,
            sigma: SigmaMode::Ddim,
            denominator: Denominator::Standard,
        }
    }
}

/// A point on the respaced chain: base timestep and its cumulative alpha.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timestep {
    pub t: usize,
    pub alpha_bar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `alpha_bars[t - 1]` is the cumulative product up to base step `t`.
    pub alpha_bars: Vec<f64>,
    /// Base timesteps of the respaced chain, strictly increasing, ending at T.
    pub respaced: Vec<usize>,
    pub t0: usize,
    pub sigma_mode: SigmaMode,
    pub denominator: Denominator,
}

pub fn build_schedule(cfg: &ScheduleConfig) -> Result<Schedule> {
    let big_t = cfg.steps;
    if cfg.respaced == 0 || cfg.respaced > big_t {
        return Err(Error::Config(format!(
            "need 1 <= T' <= T, got T = {big_t}, T' = {}",
            cfg.respaced
        )));
    }
    if cfg.t0 > cfg.respaced {
        return Err(Error::Config(format!("t0 = {} exceeds T' = {}", cfg.t0, cfg.respaced)));
    }
    let betas: Vec<f64> = match cfg.beta {
        BetaSpec::Linear { start, end } => {
            if !(start > 0.0 && end < 1.0 && start <= end) {
                return Err(Error::Config(format!(
                    "linear betas need 0 < start <= end < 1, got {start}..{end}"
                )));
            }
            if big_t == 1 {
                vec![start]
            } else {
                (0..big_t)
                    .map(|i| start + (end - start) * i as f64 / (big_t - 1) as f64)
                    .collect()
            }
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(big_t);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    let respaced: Vec<usize> = (1..=cfg.respaced)
        .map(|k| ((k * big_t) as f64 / cfg.respaced as f64).round() as usize)
        .collect();
    Ok(Schedule {
        betas,
        alphas,
        alpha_bars,
        respaced,
        t0: cfg.t0,
        sigma_mode: cfg.sigma,
        denominator: cfg.denominator,
    })
}

impl Schedule {
    pub fn base_steps(&self) -> usize {
        self.betas.len()
    }

    /// Number of respaced steps T'.
    pub fn len(&self) -> usize {
        self.respaced.len()
    }

    pub fn is_empty(&self) -> bool {
        self.respaced.is_empty()
    }

    /// Cumulative alpha at base timestep `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.base_steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::Index(format!(
                "timestep {t} outside 0..={}",
                self.base_steps()
            ))),
        }
    }

    /// Respaced index `k` in `0..=T'`; `k = 0` is the clean image.
    pub fn timestep(&self, k: usize) -> Result<Timestep> {
        let t = match k {
            0 => 0,
            k if k <= self.len() => self.respaced[k - 1],
            k => {
                return Err(Error::Index(format!(
                    "respaced index {k} outside 0..={}",
                    self.len()
                )))
            }
        };
        Ok(Timestep {
            t,
            alpha_bar: self.alpha_bar(t)?,
        })
    }

    /// Effective per-step alpha of the respaced chain at `k >= 1`.
    pub fn step_alpha(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::Index("step alpha needs k >= 1".into()));
        }
        Ok(self.timestep(k)?.alpha_bar / self.timestep(k - 1)?.alpha_bar)
    }

    /// Noise scale for the step `k -> k - 1`.
    pub fn sigma(&self, k: usize) -> Result<f64> {
        match self.sigma_mode {
            SigmaMode::Ddim => {
                self.timestep(k)?;
                Ok(0.0)
            }
            SigmaMode::Ddpm => {
                let cur = self.timestep(k)?.alpha_bar;
                let prev = self.timestep(k.checked_sub(1).ok_or_else(|| {
                    Error::Index("sigma needs k >= 1".into())
                })?)?
                .alpha_bar;
                Ok(((1.0 - prev) / (1.0 - cur)).sqrt() * (1.0 - cur / prev).sqrt())
            }
        }
    }

    /// Denominator of the denoised estimate at `k`.
    pub fn denominator(&self, k: usize) -> Result<f64> {
        let d = match self.denominator {
            Denominator::Standard => self.timestep(k)?.alpha_bar.sqrt(),
            Denominator::Eq3Literal if k == 0 => 1.0,
            Denominator::Eq3Literal => self.step_alpha(k)?.sqrt(),
        };
        if !(d > 0.0) {
            return Err(Error::Config(format!("non-positive denominator at step {k}")));
        }
        Ok(d)
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps` at base timestep `t`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &Schedule) -> Result<Tensor> {
    x0.same_shape(eps)?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(Tensor::from_parts(x0.shape().to_vec(), data))
}
