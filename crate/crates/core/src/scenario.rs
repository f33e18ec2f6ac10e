//! Synthetic conditional datasets whose construction induces memorization.
//!
//! Every condition owns a Gaussian mixture. A duplicated pair replaces one of
//! its condition's base samples by a fixed target point repeated
//! `factor` times, so the record count is
//! `n_conditions * base + sum(factor - 1)`.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{label, StreamKey};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    /// Relative weight; a condition's weights need not sum to one.
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `data_dim x data_dim` covariance.
    pub covariance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mixture {
    pub components: Vec<Component>,
}

impl Mixture {
    pub fn gaussian(mean: Vec<f64>, covariance: Vec<f64>) -> Self {
        Mixture {
            components: vec![Component {
                weight: 1.0,
                mean,
                covariance,
            }],
        }
    }

    fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let total = self.total_weight();
        let d = self.components[0].mean.len();
        let mut m = vec![0.0; d];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight / total * b;
            }
        }
        m
    }

    /// Per-coordinate variance of the mixture.
    pub fn variances(&self) -> Vec<f64> {
        let total = self.total_weight();
        let mean = self.mean();
        let d = mean.len();
        (0..d)
            .map(|i| {
                self.components
                    .iter()
                    .map(|c| c.weight / total * (c.covariance[i * d + i] + c.mean[i] * c.mean[i]))
                    .sum::<f64>()
                    - mean[i] * mean[i]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DuplicatedPair {
    pub condition: usize,
    pub target: Vec<f64>,
    pub factor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub data_dim: usize,
    pub n_conditions: usize,
    pub base_samples_per_condition: usize,
    pub duplicated_pairs: Vec<DuplicatedPair>,
    /// One mixture per condition.
    pub mixtures: Vec<Mixture>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub x0: Vec<f64>,
    pub condition: usize,
    pub duplicated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub data_dim: usize,
    pub n_conditions: usize,
    pub records: Vec<Record>,
}

/// Lower Cholesky factor of a row-major SPD matrix, `None` if not positive-definite.
pub(crate) fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 1e-12) {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.data_dim == 0 || self.n_conditions == 0 || self.base_samples_per_condition == 0 {
            return cfg("data_dim, n_conditions and base_samples_per_condition must be positive".into());
        }
        if self.mixtures.len() != self.n_conditions {
            return cfg(format!(
                "{} mixtures given for {} conditions",
                self.mixtures.len(),
                self.n_conditions
            ));
        }
        for (c, mix) in self.mixtures.iter().enumerate() {
            if mix.components.is_empty() {
                return cfg(format!("condition {c} has an empty mixture"));
            }
            for m in &mix.components {
                if !(m.weight > 0.0 && m.weight.is_finite()) {
                    return cfg(format!("condition {c}: component weights must be > 0"));
                }
                if m.mean.len() != self.data_dim || m.covariance.len() != self.data_dim * self.data_dim {
                    return cfg(format!("condition {c}: component has wrong dimensions"));
                }
                let symmetric = (0..self.data_dim).all(|i| {
                    (0..self.data_dim)
                        .all(|j| m.covariance[i * self.data_dim + j] == m.covariance[j * self.data_dim + i])
                });
                if !symmetric || cholesky(&m.covariance, self.data_dim).is_none() {
                    return cfg(format!("condition {c}: covariance is not positive-definite"));
                }
            }
        }
        for p in &self.duplicated_pairs {
            if p.factor == 0 {
                return cfg("duplication factor must be >= 1".into());
            }
            if p.condition >= self.n_conditions {
                return cfg(format!("duplicated condition {} out of range", p.condition));
            }
            if p.target.len() != self.data_dim {
                return cfg("duplicated target has wrong dimension".into());
            }
        }
        let mut per_cond = vec![0usize; self.n_conditions];
        for p in &self.duplicated_pairs {
            per_cond[p.condition] += 1;
        }
        if per_cond.iter().any(|&k| k > self.base_samples_per_condition) {
            return cfg("more duplicated pairs than base samples for a condition".into());
        }
        Ok(())
    }

    pub fn expected_len(&self) -> usize {
        self.n_conditions * self.base_samples_per_condition
            + self.duplicated_pairs.iter().map(|p| p.factor - 1).sum::<usize>()
    }

    pub fn duplicated_conditions(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .duplicated_pairs
            .iter()
            .filter(|p| p.factor > 1)
            .map(|p| p.condition)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Smallest distance between distinct component means (shared components count once).
    pub fn min_mode_distance(&self) -> f64 {
        let means: Vec<&[f64]> = self
            .mixtures
            .iter()
            .flat_map(|m| m.components.iter().map(|c| c.mean.as_slice()))
            .collect();
        let mut best = f64::INFINITY;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d = euclidean(means[i], means[j]);
                if d > 0.0 {
                    best = best.min(d);
                }
            }
        }
        best
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Deterministic dataset for `spec`: base samples from each condition's
/// mixture, with each duplicated pair's target inserted `factor` times.
pub fn build_dataset(spec: &ScenarioSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.data_dim;
    let root = StreamKey::root(spec.seed).split(label::DATASET);
    let mut records = Vec::with_capacity(spec.expected_len());
    for (c, mix) in spec.mixtures.iter().enumerate() {
        let chols: Vec<Vec<f64>> = mix
            .components
            .iter()
            .map(|m| cholesky(&m.covariance, d).expect("validated"))
            .collect();
        let total = mix.total_weight();
        let pairs: Vec<&DuplicatedPair> =
            spec.duplicated_pairs.iter().filter(|p| p.condition == c).collect();
        let mut rng = root.split(c as u64).rng();
        for _ in 0..spec.base_samples_per_condition - pairs.len() {
            let k = if mix.components.len() == 1 {
                0
            } else {
                let mut u = rng.gen::<f64>() * total;
                let mut k = 0;
                while k + 1 < mix.components.len() && u >= mix.components[k].weight {
                    u -= mix.components[k].weight;
                    k += 1;
                }
                k
            };
            let (mode, chol) = (&mix.components[k], &chols[k]);
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x0 = (0..d)
                .map(|i| mode.mean[i] + (0..=i).map(|k| chol[i * d + k] * z[k]).sum::<f64>())
                .collect();
            records.push(Record {
                x0,
                condition: c,
                duplicated: false,
            });
        }
        for p in pairs {
            for _ in 0..p.factor {
                records.push(Record {
                    x0: p.target.clone(),
                    condition: c,
                    duplicated: p.factor > 1,
                });
            }
        }
    }
    debug_assert_eq!(records.len(), spec.expected_len());
    Ok(Dataset {
        data_dim: d,
        n_conditions: spec.n_conditions,
        records,
    })
}

/// Generator parameters for the standard ring-of-modes scenarios.
///
/// Ring components sit at radius `radius`, evenly spaced on a circle in 2-D and
/// on seeded random directions in higher dimensions. Condition `c` puts weight
/// `own_weight` on component `c` and spreads the rest evenly over the others,
/// so `own_weight = 1` gives disjoint conditions. Each duplicated condition's
/// target sits at `target_radius` along its mode's direction, rotated by
/// `target_angle` radians within the plane of the first two coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RingScenario {
    pub data_dim: usize,
    pub n_conditions: usize,
    pub base_samples_per_condition: usize,
    pub radius: f64,
    pub mode_std: f64,
    pub own_weight: f64,
    /// Shift of condition `c`'s copy of a shared component towards its own
    /// direction, so conditions still differ inside shared regions.
    pub shared_offset: f64,
    pub duplicated_conditions: Vec<usize>,
    pub duplication_factor: usize,
    pub target_radius: f64,
    pub target_angle: f64,
    pub seed: u64,
}

impl Default for RingScenario {
    fn default() -> Self {
        RingScenario::duplication()
    }
}

impl RingScenario {
    /// Eight conditions; conditions 0 and 3 each carry one point, 150 times,
    /// just outside the ring along their own direction.
    pub fn duplication() -> Self {
        RingScenario {
            data_dim: 2,
            n_conditions: 8,
            base_samples_per_condition: 100,
            radius: 4.0,
            mode_std: 0.4,
            own_weight: 0.8,
            shared_offset: 0.0,
            duplicated_conditions: vec![0, 3],
            duplication_factor: 150,
            target_radius: 7.0,
            target_angle: 0.0,
            seed: 17,
        }
    }

    /// Few samples per condition and no explicit duplication.
    pub fn overfit() -> Self {
        RingScenario {
            base_samples_per_condition: 1,
            duplicated_conditions: vec![],
            duplication_factor: 1,
            ..RingScenario::duplication()
        }
    }

    fn directions(&self) -> Vec<Vec<f64>> {
        let d = self.data_dim;
        if d == 2 {
            return (0..self.n_conditions)
                .map(|c| {
                    let a = std::f64::consts::TAU * c as f64 / self.n_conditions as f64;
                    vec![a.cos(), a.sin()]
                })
                .collect();
        }
        let key = StreamKey::root(self.seed).split(label::DATASET).split(u64::MAX);
        (0..self.n_conditions)
            .map(|c| {
                let v = key.split(c as u64).normals(d);
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect()
    }

    pub fn spec(&self) -> Result<ScenarioSpec> {
        let d = self.data_dim;
        if d < 2 {
            return Err(Error::Config("ring scenarios need data_dim >= 2".into()));
        }
        if !(self.radius > 0.0 && self.mode_std > 0.0) {
            return Err(Error::Config("radius and mode_std must be positive".into()));
        }
        if !(self.own_weight > 0.0 && self.own_weight <= 1.0) {
            return Err(Error::Config("own_weight must be in (0, 1]".into()));
        }
        let dirs = self.directions();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = self.mode_std * self.mode_std;
        }
        let k = self.n_conditions;
        let other = if k > 1 { (1.0 - self.own_weight) / (k - 1) as f64 } else { 0.0 };
        let mixtures = (0..k)
            .map(|c| Mixture {
                components: (0..k)
                    .map(|j| (j, if j == c { self.own_weight } else { other }))
                    .filter(|&(_, w)| w > 0.0)
                    .map(|(j, weight)| Component {
                        weight,
                        mean: dirs[j]
                            .iter()
                            .zip(&dirs[c])
                            .map(|(x, u)| self.radius * x + if j == c { 0.0 } else { self.shared_offset * u })
                            .collect(),
                        covariance: cov.clone(),
                    })
                    .collect(),
            })
            .collect();
        let mut duplicated_pairs = Vec::new();
        for &c in &self.duplicated_conditions {
            let u = dirs.get(c).ok_or_else(|| {
                Error::Config(format!("duplicated condition {c} out of range"))
            })?;
            let (ca, sa) = (self.target_angle.cos(), self.target_angle.sin());
            let mut target: Vec<f64> = u.iter().map(|x| self.target_radius * x).collect();
            let (x, y) = (target[0], target[1]);
            target[0] = ca * x - sa * y;
            target[1] = sa * x + ca * y;
            duplicated_pairs.push(DuplicatedPair {
                condition: c,
                target,
                factor: self.duplication_factor,
            });
        }
        let spec = ScenarioSpec {
            data_dim: d,
            n_conditions: self.n_conditions,
            base_samples_per_condition: self.base_samples_per_condition,
            duplicated_pairs,
            mixtures,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    x0: Vec<f64>,
    condition: usize,
    duplicated: bool,
}

impl Dataset {
    pub fn dump_ndjson(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            let line = RecordLine {
                x0: r.x0.clone(),
                condition: r.condition,
                duplicated: r.duplicated,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load_ndjson(r: impl BufRead, n_conditions: usize) -> Result<Self> {
        let mut records = Vec::new();
        let mut data_dim = None;
        for line in r.lines() {
            let line = line.map_err(|e| Error::Serde(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine =
                serde_json::from_str(&line).map_err(|e| Error::Serde(e.to_string()))?;
            let d = *data_dim.get_or_insert(rec.x0.len());
            check_dim(d, rec.x0.len())?;
            if rec.condition >= n_conditions {
                return Err(Error::Usage(format!("condition {} out of range", rec.condition)));
            }
            records.push(Record {
                x0: rec.x0,
                condition: rec.condition,
                duplicated: rec.duplicated,
            });
        }
        Ok(Dataset {
            data_dim: data_dim.unwrap_or(0),
            n_conditions,
            records,
        })
    }

    pub fn condition_records(&self, c: usize) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.condition == c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(factor: usize) -> ScenarioSpec {
        RingScenario {
            n_conditions: 4,
            base_samples_per_condition: 50,
            duplicated_conditions: vec![1],
            duplication_factor: factor,
            ..RingScenario::duplication()
        }
        .spec()
        .unwrap()
    }

    #[test]
    fn record_counting() {
        let ds = build_dataset(&small(100)).unwrap();
        assert_eq!(ds.records.len(), 4 * 50 + 99);
        assert_eq!(ds.records.iter().filter(|r| r.duplicated).count(), 100);
    }

    #[test]
    fn factor_one_flags_nothing() {
        let ds = build_dataset(&small(1)).unwrap();
        assert_eq!(ds.records.len(), 200);
        assert!(ds.records.iter().all(|r| !r.duplicated));
    }

    #[test]
    fn duplicates_are_exact_copies() {
        let spec = small(37);
        let ds = build_dataset(&spec).unwrap();
        let target = &spec.duplicated_pairs[0].target;
        let copies: Vec<&Record> = ds.records.iter().filter(|r| r.duplicated).collect();
        assert_eq!(copies.len(), 37);
        assert!(copies.iter().all(|r| &r.x0 == target && r.condition == 1));
        assert_eq!(ds.records.iter().filter(|r| &r.x0 == target).count(), 37);
    }

    #[test]
    fn deterministic_for_seed() {
        let spec = small(10);
        assert_eq!(build_dataset(&spec).unwrap(), build_dataset(&spec).unwrap());
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(build_dataset(&spec).unwrap(), build_dataset(&other).unwrap());
    }

    #[test]
    fn empirical_means_converge() {
        let mut spec = small(5);
        spec.base_samples_per_condition = 4000;
        let ds = build_dataset(&spec).unwrap();
        for (c, mix) in spec.mixtures.iter().enumerate() {
            let pts: Vec<&Record> = ds.condition_records(c).filter(|r| !r.duplicated).collect();
            let n = pts.len() as f64;
            let (mu, var) = (mix.mean(), mix.variances());
            for k in 0..2 {
                let mean = pts.iter().map(|r| r.x0[k]).sum::<f64>() / n;
                assert!((mean - mu[k]).abs() < 5.0 * var[k].sqrt() / n.sqrt());
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small(10);
        s.mixtures[2].components[0].covariance = vec![1.0, 1.0, 1.0, 1.0];
        assert!(matches!(build_dataset(&s), Err(Error::Config(_))));
        let mut s = small(10);
        s.duplicated_pairs[0].factor = 0;
        assert!(s.validate().is_err());
        let mut s = small(10);
        s.duplicated_pairs[0].condition = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn high_dim_ring() {
        let spec = RingScenario {
            data_dim: 16,
            ..RingScenario::duplication()
        }
        .spec()
        .unwrap();
        for comp in spec.mixtures.iter().flat_map(|m| &m.components) {
            let r = comp.mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r - 4.0).abs() < 1e-9);
        }
        assert!(spec.min_mode_distance() > 0.5);
    }

    #[test]
    fn ndjson_round_trip() {
        let ds = build_dataset(&small(3)).unwrap();
        let mut buf = Vec::new();
        ds.dump_ndjson(&mut buf).unwrap();
        let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap();
        assert!(first.starts_with("{\"x0\":["));
        let back = Dataset::load_ndjson(&buf[..], 4).unwrap();
        assert_eq!(back, ds);
    }
}
