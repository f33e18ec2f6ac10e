//! Attractors, attraction basins and transition points as measurable predicates.
//!
//! `phi(x, t, e)` is the plain-CFG completion of state `(x, t)`; `phi(x, 0, e) = x`.
//! A state is inside the basin of an attractor when its completion lands within
//! `eps_basin` of it. Probability statements are over initial noise only, since
//! the sampler is deterministic.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::guide::{guided_epsilon, GuidancePolicy, NoisePredictor, PrePhase, SwitchRule};
use crate::model::Condition;
use crate::sample::{complete_states, initial_noise, sample_batch, sample_trajectory, Trajectory};
use crate::scenario::{euclidean, Dataset};
use crate::schedule::{NoiseSchedule, StatePoint};
use crate::guide::detect_local_min;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Euclidean,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => euclidean(a, b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasinProbeConfig {
    pub eps_basin: f64,
    pub delta: f64,
    pub n_probe_seeds: usize,
    #[serde(default)]
    pub distance: Distance,
}

impl BasinProbeConfig {
    /// `eps_basin` is half the smallest distance between condition modes.
    pub fn for_mode_distance(min_mode_distance: f64) -> Self {
        BasinProbeConfig {
            eps_basin: 0.5 * min_mode_distance,
            delta: 0.1,
            n_probe_seeds: 32,
            distance: Distance::Euclidean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_basin > 0.0 && self.eps_basin.is_finite()) {
            return Err(Error::Config("eps_basin must be > 0".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config("delta must be in (0, 1)".into()));
        }
        if self.n_probe_seeds < 2 {
            return Err(Error::Config("n_probe_seeds must be >= 2".into()));
        }
        Ok(())
    }

    pub fn within(&self, a: &[f64], b: &[f64]) -> bool {
        self.distance.eval(a, b) <= self.eps_basin
    }
}

/// Training record closest to a point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestRecord {
    pub index: usize,
    pub distance: f64,
    pub duplicated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub x: f64,
    pub y: f64,
    pub t: usize,
    pub in_basin: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinProbeResult {
    pub condition: Condition,
    pub attractor: Option<Vec<f64>>,
    pub confirmed: bool,
    pub seeds: Vec<u64>,
    /// Distance of each seed's plain-CFG output to the medoid.
    pub final_distances: Vec<f64>,
    pub nearest_record: Option<NearestRecord>,
    pub grid: Vec<GridCell>,
    /// Transition points per seed, filled by [`Prober::probe_transitions`].
    pub transitions: Vec<TransitionProbe>,
    /// Mean first-step disagreement over the probe seeds.
    pub d_first: f64,
}

/// Both estimates of one trajectory's transition point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionProbe {
    pub seed: Option<u64>,
    pub pre: PrePhase,
    /// Step after the first strict local minimum of the pre-phase `d_t`.
    pub dynamic: Option<usize>,
    /// First switch step whose CFG completion leaves the ball; `None` if none does.
    pub bisect: Option<usize>,
    /// Per ladder step `t`: does switching to CFG at `t` end inside the ball?
    pub inside: Vec<(usize, bool)>,
    /// Inside for every `t > bisect`, outside for every `t <= bisect`.
    pub sandwich: bool,
}

impl TransitionProbe {
    /// `|dynamic - bisect| <= steps * stride`; false when either is missing.
    pub fn agrees(&self, stride: usize, steps: usize) -> bool {
        match (self.dynamic, self.bisect) {
            (Some(a), Some(b)) => a.abs_diff(b) <= steps * stride,
            _ => false,
        }
    }
}

/// Runs basin probes for one trained model at a fixed guidance scale and step count.
pub struct Prober<'a, P: NoisePredictor + ?Sized> {
    pub schedule: &'a NoiseSchedule,
    pub model: &'a P,
    pub lambda: f64,
    pub n_steps: usize,
    pub probe: BasinProbeConfig,
}

impl<'a, P: NoisePredictor + ?Sized> Prober<'a, P> {
    pub fn new(
        schedule: &'a NoiseSchedule,
        model: &'a P,
        lambda: f64,
        n_steps: usize,
        probe: BasinProbeConfig,
    ) -> Result<Self> {
        probe.validate()?;
        GuidancePolicy::plain_cfg(lambda).validate(schedule.timesteps())?;
        schedule.strided_timesteps(n_steps)?;
        Ok(Prober {
            schedule,
            model,
            lambda,
            n_steps,
            probe,
        })
    }

    pub fn stride(&self) -> usize {
        self.schedule.timesteps() / self.n_steps
    }

    /// Plain-CFG completions of states on the inference ladder.
    pub fn complete(&self, e_p: Condition, starts: &[StatePoint]) -> Result<Vec<Vec<f64>>> {
        complete_states(self.schedule, self.model, e_p, self.lambda, starts, self.n_steps)
    }

    pub fn phi(&self, x: &[f64], t: usize, e_p: Condition) -> Result<Vec<f64>> {
        let start = StatePoint { x: x.to_vec(), t };
        Ok(self.complete(e_p, &[start])?.remove(0))
    }

    /// Runs plain CFG from each seed and tests whether the outputs cluster
    /// around their medoid. `dataset` enables the nearest-record cross-reference.
    pub fn find_attractor(
        &self,
        trained: bool,
        e_p: Condition,
        seeds: &[u64],
        dataset: Option<&Dataset>,
    ) -> Result<BasinProbeResult> {
        if !trained {
            return Err(Error::Usage("basin probes need trained parameters".into()));
        }
        if seeds.len() < 2 {
            return Err(Error::Usage("need at least two probe seeds".into()));
        }
        let mut sorted = seeds.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::Usage("probe seeds must be distinct".into()));
        }
        let policy = GuidancePolicy::plain_cfg(self.lambda);
        let trs = sample_batch(self.schedule, self.model, &policy, e_p, seeds, self.n_steps)?;
        let finals: Vec<&[f64]> = trs.iter().map(|t| t.final_state()).collect();
        let medoid = medoid(&finals, self.probe.distance);
        let center = finals[medoid].to_vec();
        let final_distances: Vec<f64> = finals
            .iter()
            .map(|f| self.probe.distance.eval(f, &center))
            .collect();
        let inside = final_distances
            .iter()
            .filter(|&&d| d <= self.probe.eps_basin)
            .count();
        let confirmed = inside as f64 >= (1.0 - self.probe.delta) * seeds.len() as f64;
        let nearest_record = match dataset {
            Some(ds) => nearest_record(ds, &center, self.probe.distance)?,
            None => None,
        };
        let d_first = trs
            .iter()
            .map(|t| t.disagreement.0[0].1)
            .sum::<f64>()
            / trs.len() as f64;
        Ok(BasinProbeResult {
            condition: e_p,
            attractor: confirmed.then_some(center),
            confirmed,
            seeds: seeds.to_vec(),
            final_distances,
            nearest_record,
            grid: Vec::new(),
            transitions: Vec::new(),
            d_first,
        })
    }

    pub fn basin_membership(
        &self,
        e_p: Condition,
        x: &[f64],
        t: usize,
        attractor: &[f64],
    ) -> Result<bool> {
        check_dim(attractor.len(), x.len())?;
        Ok(self.probe.within(&self.phi(x, t, e_p)?, attractor))
    }

    /// Runs the pre-phase alone from `x_t` and locates its transition both by
    /// the dynamic rule and by completing with CFG from every ladder state.
    pub fn locate_transition(
        &self,
        e_p: Condition,
        x_t: &[f64],
        pre: PrePhase,
        attractor: Option<&[f64]>,
    ) -> Result<(Trajectory, TransitionProbe)> {
        let attractor = attractor.ok_or_else(|| {
            Error::Usage("transition probes need a confirmed attractor".into())
        })?;
        check_dim(attractor.len(), x_t.len())?;
        if pre == PrePhase::Cfg {
            return Err(Error::Usage("the pre-phase must be zero or opposite guidance".into()));
        }
        let policy = GuidancePolicy {
            pre,
            switch: SwitchRule::None,
            ..GuidancePolicy::plain_cfg(self.lambda)
        };
        let traj = sample_trajectory(self.schedule, self.model, &policy, e_p, x_t, self.n_steps)?;
        let dynamic = detect_local_min(&traj.disagreement)?;
        // the last state is t = 0, where no switch is possible
        let starts = &traj.states[..traj.states.len() - 1];
        let finals = self.complete(e_p, starts)?;
        let inside: Vec<(usize, bool)> = starts
            .iter()
            .zip(&finals)
            .map(|(s, f)| (s.t, self.probe.within(f, attractor)))
            .collect();
        let bisect = inside.iter().find(|(_, ok)| !ok).map(|(t, _)| *t);
        let sandwich = match bisect {
            Some(b) => inside.iter().all(|&(t, ok)| ok == (t > b)),
            None => true,
        };
        let probe = TransitionProbe {
            seed: None,
            pre,
            dynamic,
            bisect,
            inside,
            sandwich,
        };
        Ok((traj, probe))
    }

    /// [`Self::locate_transition`] for every seed of `result`, stored in its `transitions`.
    pub fn probe_transitions(&self, result: &mut BasinProbeResult, pre: PrePhase) -> Result<()> {
        let attractor = result.attractor.clone();
        let dim = self.model.data_dim();
        let probes = crate::par::map_indexed(result.seeds.len(), |i| {
            let seed = result.seeds[i];
            self.locate_transition(result.condition, &initial_noise(seed, dim), pre, attractor.as_deref())
                .map(|(_, mut p)| {
                    p.seed = Some(seed);
                    p
                })
        });
        result.transitions = probes.into_iter().collect::<Result<_>>()?;
        Ok(())
    }

    /// Basin membership on an `n x n` grid over `[lo, hi]^2` at each `t` (2-D only).
    pub fn membership_grid(
        &self,
        e_p: Condition,
        attractor: &[f64],
        ts: &[usize],
        lo: f64,
        hi: f64,
        n: usize,
    ) -> Result<Vec<GridCell>> {
        if self.model.data_dim() != 2 {
            return Err(Error::Usage("basin grids need data_dim = 2".into()));
        }
        check_dim(2, attractor.len())?;
        if n < 2 || !(hi > lo) {
            return Err(Error::Usage("grid needs n >= 2 and hi > lo".into()));
        }
        let coord = |i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let mut starts = Vec::with_capacity(ts.len() * n * n);
        for &t in ts {
            for i in 0..n {
                for j in 0..n {
                    starts.push(StatePoint {
                        x: vec![coord(i), coord(j)],
                        t,
                    });
                }
            }
        }
        let finals = self.complete(e_p, &starts)?;
        Ok(starts
            .iter()
            .zip(&finals)
            .map(|(s, f)| GridCell {
                x: s.x[0],
                y: s.x[1],
                t: s.t,
                in_basin: self.probe.within(f, attractor),
            })
            .collect())
    }
}

/// First-step disagreement `d_T` and whether it exceeds `threshold`.
pub fn detect_memorization<P: NoisePredictor + ?Sized>(
    schedule: &NoiseSchedule,
    model: &P,
    e_p: Condition,
    x_t: &[f64],
    threshold: f64,
) -> Result<(bool, f64)> {
    let (_, d) = guided_epsilon(model, x_t, schedule.timesteps(), e_p, Condition::Null, 0.0)?;
    Ok((d > threshold, d))
}

/// Index of the point minimizing the summed distance to all others (lowest index on ties).
pub fn medoid(points: &[&[f64]], distance: Distance) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let total: f64 = points.iter().map(|q| distance.eval(p, q)).sum();
        if total < best.1 {
            best = (i, total);
        }
    }
    best.0
}

pub fn nearest_record(ds: &Dataset, x: &[f64], distance: Distance) -> Result<Option<NearestRecord>> {
    let mut best: Option<NearestRecord> = None;
    for (index, r) in ds.records.iter().enumerate() {
        check_dim(x.len(), r.x0.len())?;
        let d = distance.eval(x, &r.x0);
        if best.as_ref().map_or(true, |b| d < b.distance) {
            best = Some(NearestRecord {
                index,
                distance: d,
                duplicated: r.duplicated,
            });
        }
    }
    Ok(best)
}

/// Fraction of in-basin cells per grid timestep, in decreasing `t`.
pub fn basin_area(grid: &[GridCell]) -> Vec<(usize, f64)> {
    let mut ts: Vec<usize> = grid.iter().map(|c| c.t).collect();
    ts.sort_unstable_by(|a, b| b.cmp(a));
    ts.dedup();
    ts.into_iter()
        .map(|t| {
            let cells: Vec<&GridCell> = grid.iter().filter(|c| c.t == t).collect();
            let inside = cells.iter().filter(|c| c.in_basin).count();
            (t, inside as f64 / cells.len() as f64)
        })
        .collect()
}

pub fn write_grid_csv(grid: &[GridCell], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "x,y,t,in_basin")?;
    for c in grid {
        writeln!(w, "{},{},{},{}", c.x, c.y, c.t, c.in_basin as u8)?;
    }
    Ok(())
}
