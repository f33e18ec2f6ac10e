//! Deterministic reverse process driven by a guidance policy.
//!
//! Each step reconstructs `x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`
//! and re-noises it to `t - stride` with the same `eps_hat`. With stride 1 and
//! the true noise this inverts the forward process exactly.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::guide::{
    guidance_weight_at, guided_epsilon_batch, GuidancePolicy, NoisePredictor, SwitchRule,
    TransitionLatch, DisagreementSeries,
};
use crate::model::Condition;
use crate::par;
use crate::rng::{label, StreamKey};
use crate::schedule::{NoiseSchedule, StatePoint};

/// One deterministic update from `state.t` to `state.t - stride`.
pub fn reverse_step(
    schedule: &NoiseSchedule,
    state: &StatePoint,
    eps_hat: &[f64],
    stride: usize,
) -> Result<StatePoint> {
    check_dim(state.x.len(), eps_hat.len())?;
    if stride == 0 || stride > state.t {
        return Err(Error::Usage(format!(
            "cannot step {stride} back from t = {}",
            state.t
        )));
    }
    schedule.check_t(state.t)?;
    let next = state.t - stride;
    let (c0, c1, c2) = step_coefficients(schedule, state.t, next);
    let x = state
        .x
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| c0 * x + c1 * e + c2 * e)
        .collect();
    Ok(StatePoint { x, t: next })
}

/// `x_next = c0 x + c1 e + c2 e` (kept as separate terms so that `t_next = 0`
/// reduces to the x0 reconstruction).
fn step_coefficients(schedule: &NoiseSchedule, t: usize, next: usize) -> (f64, f64, f64) {
    let ab = schedule.alpha_bar(t);
    let ab_next = schedule.alpha_bar(next);
    let inv = 1.0 / ab.sqrt();
    // x0_hat = inv * x - inv * sqrt(1-ab) * e
    let c0 = ab_next.sqrt() * inv;
    let c1 = -ab_next.sqrt() * inv * (1.0 - ab).sqrt();
    let c2 = (1.0 - ab_next).sqrt();
    (c0, c1, c2)
}

fn reverse_rows(schedule: &NoiseSchedule, x: &mut Array2<f64>, eps_hat: &Array2<f64>, t: usize, next: usize) {
    let (c0, c1, c2) = step_coefficients(schedule, t, next);
    x.zip_mut_with(eps_hat, |xv, &e| *xv = c0 * *xv + c1 * e + c2 * e);
}

/// Initial noise `x_T` for a seed.
pub fn initial_noise(seed: u64, dim: usize) -> Vec<f64> {
    StreamKey::root(seed).split(label::NOISE).normals(dim)
}

/// A single reverse-process run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// From `t = T` down to `t = 0`.
    pub states: Vec<StatePoint>,
    pub disagreement: DisagreementSeries,
    pub weights: Vec<(usize, f64)>,
    /// Step at which guidance switched to `lambda` by the dynamic or static rule.
    pub transition: Option<usize>,
    /// Dynamic rule never fired; `lambda` was applied at the final step only.
    pub no_transition: bool,
    pub seed: Option<u64>,
    pub condition: Condition,
    pub policy: String,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        &self.states.last().expect("nonempty").x
    }

    pub fn state_at(&self, t: usize) -> Option<&StatePoint> {
        self.states.iter().find(|s| s.t == t)
    }
}

/// Runs the guided reverse process from `x_t` over the strided ladder.
pub fn sample_trajectory<P: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    model: &P,
    policy: &GuidancePolicy,
    e_p: Condition,
    x_t: &[f64],
    n_steps: usize,
) -> Result<Trajectory> {
    policy.validate(schedule.timesteps())?;
    check_dim(model.data_dim(), x_t.len())?;
    let ladder = schedule.strided_timesteps(n_steps)?;
    let stride = schedule.timesteps() / n_steps;
    let mut latch = TransitionLatch::new(policy.robust_rho);
    let mut x = Array2::from_shape_vec((1, x_t.len()), x_t.to_vec()).expect("row vector");
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut series = Vec::with_capacity(n_steps);
    let mut weights = Vec::with_capacity(n_steps);
    let mut transition = None;
    let mut no_transition = false;
    states.push(StatePoint {
        x: x_t.to_vec(),
        t: ladder[0],
    });
    for (step, &t) in ladder.iter().enumerate() {
        let cond = model
            .predict_batch(x.view(), t, e_p)
            .map_err(|e| abort(step, e))?;
        let uncond = model
            .predict_batch(x.view(), t, Condition::Null)
            .map_err(|e| abort(step, e))?;
        let diff = &cond - &uncond;
        let d = diff.iter().map(|g| g * g).sum::<f64>();
        series.push((t, d));
        let fired = latch.observe(d);
        let mut s = match policy.switch {
            SwitchRule::Dynamic => guidance_weight_at(policy, t, latch.fired()),
            _ => guidance_weight_at(policy, t, false),
        };
        if transition.is_none() {
            match policy.switch {
                SwitchRule::Dynamic if fired => transition = Some(t),
                SwitchRule::Static(tau) if t <= tau => transition = Some(t),
                _ => {}
            }
        }
        if policy.switch == SwitchRule::Dynamic && !latch.fired() && step + 1 == ladder.len() {
            s = policy.lambda;
            no_transition = true;
        }
        weights.push((t, s));
        let eps_hat = &uncond + &(s * &diff);
        reverse_rows(schedule, &mut x, &eps_hat, t, t - stride);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericAbort {
                step,
                reason: "state became non-finite".into(),
            });
        }
        states.push(StatePoint {
            x: x.row(0).to_vec(),
            t: t - stride,
        });
    }
    Ok(Trajectory {
        states,
        disagreement: DisagreementSeries(series),
        weights,
        transition,
        no_transition,
        seed: None,
        condition: e_p,
        policy: policy.describe(),
    })
}

fn abort(step: usize, e: Error) -> Error {
    match e {
        Error::NumericOverflow { layer } => Error::NumericAbort {
            step,
            reason: format!("non-finite activation in layer {layer}"),
        },
        other => other,
    }
}

/// One trajectory per seed, started from [`initial_noise`]. Output order follows `seeds`.
pub fn sample_batch<P: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    model: &P,
    policy: &GuidancePolicy,
    e_p: Condition,
    seeds: &[u64],
    n_steps: usize,
) -> Result<Vec<Trajectory>> {
    par::map_indexed(seeds.len(), |i| {
        let x_t = initial_noise(seeds[i], model.data_dim());
        sample_trajectory(schedule, model, policy, e_p, &x_t, n_steps).map(|mut tr| {
            tr.seed = Some(seeds[i]);
            tr
        })
    })
    .into_iter()
    .collect()
}

/// Constant-weight completion of many states, each starting at its own
/// ladder timestep (`t = 0` rows are returned unchanged). Rows sharing a
/// timestep are advanced together as one batch.
pub fn complete_states<P: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    model: &P,
    e_p: Condition,
    weight: f64,
    starts: &[StatePoint],
    n_steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let ladder = schedule.strided_timesteps(n_steps)?;
    let stride = schedule.timesteps() / n_steps;
    let d = model.data_dim();
    for s in starts {
        check_dim(d, s.x.len())?;
        if s.t != 0 && !ladder.contains(&s.t) {
            return Err(Error::Usage(format!("start t = {} is not on the inference ladder", s.t)));
        }
    }
    let mut out: Vec<Vec<f64>> = starts.iter().map(|s| s.x.clone()).collect();
    for &t in &ladder {
        let active: Vec<usize> = (0..starts.len()).filter(|&i| starts[i].t >= t).collect();
        if active.is_empty() {
            continue;
        }
        let mut x = Array2::zeros((active.len(), d));
        for (r, &i) in active.iter().enumerate() {
            x.row_mut(r).assign(&ArrayView2::from_shape((1, d), &out[i]).unwrap().row(0));
        }
        let (eps_hat, _) = guided_epsilon_batch(model, x.view(), t, e_p, &vec![weight; active.len()])?;
        reverse_rows(schedule, &mut x, &eps_hat, t, t - stride);
        for (r, &i) in active.iter().enumerate() {
            out[i] = x.row(r).to_vec();
        }
    }
    Ok(out)
}
