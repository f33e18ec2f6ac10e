//! Guided noise estimates and transition-point detection.
//!
//! `eps_hat = eps(x, null) + s * (eps(x, e_p) - eps(x, null))`: `s > 0` is
//! classifier-free guidance, `s = 0` zero guidance and `s < 0` opposite
//! guidance. The disagreement `d_t = |eps(x, e_p) - eps(x, null)|^2` falls
//! out of the same two evaluations.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{Condition, DenoiserParams};

/// Anything that predicts noise for a batch of points sharing `(t, cond)`.
pub trait NoisePredictor: Sync {
    fn data_dim(&self) -> usize;
    fn predict_batch(&self, x: ArrayView2<f64>, t: usize, cond: Condition) -> Result<Array2<f64>>;

    fn predict(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        check_dim(self.data_dim(), x.len())?;
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.predict_batch(view, t, cond)?.into_raw_vec_and_offset().0)
    }
}

impl NoisePredictor for DenoiserParams {
    fn data_dim(&self) -> usize {
        self.arch().data_dim
    }

    fn predict_batch(&self, x: ArrayView2<f64>, t: usize, cond: Condition) -> Result<Array2<f64>> {
        DenoiserParams::predict_batch(self, x, t, cond)
    }
}

/// Guided estimate and disagreement for one point.
pub fn guided_epsilon<P: NoisePredictor + ?Sized>(
    model: &P,
    x: &[f64],
    t: usize,
    e_p: Condition,
    e_null: Condition,
    s: f64,
) -> Result<(Vec<f64>, f64)> {
    let cond = model.predict(x, t, e_p)?;
    let uncond = model.predict(x, t, e_null)?;
    let mut d = 0.0;
    let eps_hat = cond
        .iter()
        .zip(&uncond)
        .map(|(c, u)| {
            let g = c - u;
            d += g * g;
            u + s * g
        })
        .collect();
    Ok((eps_hat, d))
}

/// Row-wise guided estimates and disagreements for a batch sharing `(t, e_p)`.
pub fn guided_epsilon_batch<P: NoisePredictor + ?Sized>(
    model: &P,
    x: ArrayView2<f64>,
    t: usize,
    e_p: Condition,
    weights: &[f64],
) -> Result<(Array2<f64>, Vec<f64>)> {
    check_dim(x.nrows(), weights.len())?;
    let cond = model.predict_batch(x, t, e_p)?;
    let mut eps_hat = model.predict_batch(x, t, Condition::Null)?;
    let mut d = vec![0.0; x.nrows()];
    for (i, mut row) in eps_hat.rows_mut().into_iter().enumerate() {
        for (k, u) in row.iter_mut().enumerate() {
            let g = cond[[i, k]] - *u;
            d[i] += g * g;
            *u += weights[i] * g;
        }
    }
    Ok((eps_hat, d))
}

/// Guidance applied before the transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrePhase {
    Zero,
    Cfg,
    Opposite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule", content = "tau")]
pub enum SwitchRule {
    /// Switch once `t <= tau`.
    Static(usize),
    /// Switch after the first strict local minimum of `d_t`.
    Dynamic,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidancePolicy {
    pub pre: PrePhase,
    /// Guidance weight after the transition (and during a CFG pre-phase).
    pub lambda: f64,
    /// Magnitude of opposite guidance; `lambda` when absent.
    pub opposite_lambda: Option<f64>,
    pub switch: SwitchRule,
    /// Noise-robust dynamic rule: accept a minimum only if it is below
    /// `rho * max(d seen so far)`. Off (`None`) reproduces the plain rule.
    pub robust_rho: Option<f64>,
}

impl GuidancePolicy {
    pub fn plain_cfg(lambda: f64) -> Self {
        GuidancePolicy {
            pre: PrePhase::Cfg,
            lambda,
            opposite_lambda: None,
            switch: SwitchRule::None,
            robust_rho: None,
        }
    }

    pub fn zero_throughout(lambda: f64) -> Self {
        GuidancePolicy {
            pre: PrePhase::Zero,
            ..Self::plain_cfg(lambda)
        }
    }

    pub fn dynamic(pre: PrePhase, lambda: f64) -> Self {
        GuidancePolicy {
            pre,
            switch: SwitchRule::Dynamic,
            ..Self::plain_cfg(lambda)
        }
    }

    pub fn static_at(pre: PrePhase, lambda: f64, tau: usize) -> Self {
        GuidancePolicy {
            pre,
            switch: SwitchRule::Static(tau),
            ..Self::plain_cfg(lambda)
        }
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if let Some(l) = self.opposite_lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config("opposite_lambda must be > 0".into()));
            }
        }
        if let SwitchRule::Static(tau) = self.switch {
            if tau == 0 || tau > timesteps {
                return Err(Error::Config(format!("static tau {tau} outside [1, {timesteps}]")));
            }
        }
        if let Some(rho) = self.robust_rho {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Config("robust_rho must be in (0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Weight used while the pre-phase is active.
    pub fn pre_weight(&self) -> f64 {
        match self.pre {
            PrePhase::Zero => 0.0,
            PrePhase::Cfg => self.lambda,
            PrePhase::Opposite => -self.opposite_lambda.unwrap_or(self.lambda),
        }
    }

    pub fn describe(&self) -> String {
        let pre = match self.pre {
            PrePhase::Zero => "zero",
            PrePhase::Cfg => "cfg",
            PrePhase::Opposite => "opposite",
        };
        let rule = match self.switch {
            SwitchRule::Static(t) => format!("static@{t}"),
            SwitchRule::Dynamic => "dynamic".to_string(),
            SwitchRule::None => "none".to_string(),
        };
        format!("{pre}+{rule} lambda={}", self.lambda)
    }
}

/// Guidance weight at step `t`.
pub fn guidance_weight_at(policy: &GuidancePolicy, t: usize, transition_found: bool) -> f64 {
    let switched = match policy.switch {
        SwitchRule::None => false,
        SwitchRule::Static(tau) => t <= tau || transition_found,
        SwitchRule::Dynamic => transition_found,
    };
    if switched {
        policy.lambda
    } else {
        policy.pre_weight()
    }
}

/// `(t, d_t)` pairs in strictly decreasing `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DisagreementSeries(pub Vec<(usize, f64)>);

impl DisagreementSeries {
    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(|(_, d)| *d).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.0.windows(2) {
            if w[1].0 >= w[0].0 {
                return Err(Error::Usage("disagreement series must have decreasing t".into()));
            }
        }
        if self.0.iter().any(|(_, d)| !(*d >= 0.0)) {
            return Err(Error::Usage("disagreement values must be >= 0".into()));
        }
        Ok(())
    }
}

/// Timestep at which guidance switches on: the entry right after the first
/// strict local minimum `d[i-2] > d[i-1] < d[i]`, scanning from `t = T` down.
pub fn detect_local_min(series: &DisagreementSeries) -> Result<Option<usize>> {
    if series.0.len() < 3 {
        return Err(Error::Usage(format!(
            "local-minimum detection needs at least 3 entries, got {}",
            series.0.len()
        )));
    }
    let mut latch = TransitionLatch::new(None);
    Ok(series.0.iter().find_map(|&(t, d)| latch.observe(d).then_some(t)))
}

/// Per-trajectory state of the dynamic rule.
#[derive(Clone, Debug)]
pub struct TransitionLatch {
    prev2: f64,
    prev1: f64,
    running_max: f64,
    rho: Option<f64>,
    fired: bool,
}

impl TransitionLatch {
    pub fn new(rho: Option<f64>) -> Self {
        TransitionLatch {
            prev2: f64::NEG_INFINITY,
            prev1: f64::NEG_INFINITY,
            running_max: f64::NEG_INFINITY,
            rho,
            fired: false,
        }
    }

    /// Feeds the next `d_t`; returns true on the step where the rule first fires.
    pub fn observe(&mut self, d: f64) -> bool {
        let fires = !self.fired
            && self.prev2 > self.prev1
            && self.prev1 < d
            && self.rho.map_or(true, |rho| self.prev1 < rho * self.running_max);
        self.running_max = self.running_max.max(d);
        self.prev2 = self.prev1;
        self.prev1 = d;
        self.fired |= fires;
        fires
    }

    pub fn fired(&self) -> bool {
        self.fired
    }
}
