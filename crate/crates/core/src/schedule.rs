//! Discrete noise schedule and the closed-form forward process.
//!
//! Timesteps run `1..=T`; `t = T` is (almost) pure noise and `t = 0` is data.
//! `alpha_bar(0)` is defined as 1 so that the reverse update can land on data.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Serializable schedule parameters as they appear in a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Linear,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => {
                NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
            }
            ScheduleKind::Cosine => NoiseSchedule::cosine(self.timesteps),
        }
    }
}

/// The beta / alpha / alpha-bar ladder. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end`, endpoints inclusive.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Config(format!(
                "schedule needs at least 2 timesteps, got {timesteps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let span = (timesteps - 1) as f64;
        let betas = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect();
        Self::from_betas(betas)
    }

    /// Cosine alpha-bar schedule with offset 0.008 and betas clipped at 0.999.
    pub fn cosine(timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::Config(format!(
                "schedule needs at least 2 timesteps, got {timesteps}"
            )));
        }
        let offset = 0.008;
        let f = |t: f64| {
            let u = (t / timesteps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
            u.cos().powi(2)
        };
        let betas = (1..=timesteps)
            .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999))
            .collect();
        Self::from_betas(betas)
    }

    /// Builds the ladder from explicit betas (index 0 holds beta_1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("empty beta ladder".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            Err(Error::Usage(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps()
            )))
        } else {
            Ok(())
        }
    }

    /// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        check_dim(x0.len(), eps.len())?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// Descending strided ladder `T, T - stride, ..., stride` for `n_steps` inference steps.
    pub fn strided_timesteps(&self, n_steps: usize) -> Result<Vec<usize>> {
        let total = self.timesteps();
        if n_steps == 0 || n_steps > total || total % n_steps != 0 {
            return Err(Error::Config(format!(
                "{n_steps} inference steps do not evenly divide {total} timesteps"
            )));
        }
        let stride = total / n_steps;
        Ok((1..=n_steps).rev().map(|i| i * stride).collect())
    }
}

/// A point `(x, t)` of the reverse process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatePoint {
    pub x: Vec<f64>,
    pub t: usize,
}
