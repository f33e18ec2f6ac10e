//! Memorization, alignment and diversity scores for generated samples.
//!
//! Similarity to the nearest training record is `exp(-d^2 / (2 sigma_ref^2))`,
//! where `sigma_ref` is the median per-coordinate spread of the conditions'
//! non-duplicated records; a similarity above 0.5 means
//! `d < sigma_ref * sqrt(2 ln 2)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::basin::{BasinProbeConfig, Distance};
use crate::error::{check_dim, Error, Result};
use crate::par;
use crate::scenario::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub condition: usize,
    pub nearest_record: usize,
    pub nearest_distance: f64,
    pub similarity: f64,
    /// Distance to the closest duplicated record, if the dataset has any.
    pub duplicate_distance: Option<f64>,
    /// Within `eps_basin` of a duplicated record; without duplicates, of a
    /// record of the sample's own condition.
    pub memorized: bool,
    /// Condition of the nearest class mean.
    pub assigned: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub samples: Vec<SampleScore>,
    pub sigma_ref: f64,
    pub memorization_fraction: f64,
    pub alignment: f64,
    /// Mean pairwise distance per condition; `None` with fewer than two samples.
    pub diversity: Vec<(usize, Option<f64>)>,
    pub similarity_p95: f64,
}

/// Means of the non-duplicated records per condition (all records when a
/// condition has only duplicated ones).
pub fn class_means(ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..ds.n_conditions)
        .map(|c| {
            let clean: Vec<&[f64]> = ds
                .condition_records(c)
                .filter(|r| !r.duplicated)
                .map(|r| r.x0.as_slice())
                .collect();
            let rows = if clean.is_empty() {
                ds.condition_records(c).map(|r| r.x0.as_slice()).collect()
            } else {
                clean
            };
            if rows.is_empty() {
                return Err(Error::Usage(format!("condition {c} has no records")));
            }
            let mut m = vec![0.0; ds.data_dim];
            for r in &rows {
                for (a, b) in m.iter_mut().zip(*r) {
                    *a += b;
                }
            }
            m.iter_mut().for_each(|a| *a /= rows.len() as f64);
            Ok(m)
        })
        .collect()
}

/// Median over conditions of the RMS per-coordinate deviation of
/// non-duplicated records from their class mean.
pub fn reference_spread(ds: &Dataset, means: &[Vec<f64>]) -> f64 {
    let mut spreads: Vec<f64> = (0..ds.n_conditions)
        .filter_map(|c| {
            let rows: Vec<&[f64]> = ds
                .condition_records(c)
                .filter(|r| !r.duplicated)
                .map(|r| r.x0.as_slice())
                .collect();
            if rows.len() < 2 {
                return None;
            }
            let ss: f64 = rows
                .iter()
                .map(|r| r.iter().zip(&means[c]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .sum();
            Some((ss / (rows.len() * ds.data_dim) as f64).sqrt())
        })
        .collect();
    if spreads.is_empty() {
        return 1.0;
    }
    spreads.sort_by(f64::total_cmp);
    let n = spreads.len();
    if n % 2 == 1 {
        spreads[n / 2]
    } else {
        0.5 * (spreads[n / 2 - 1] + spreads[n / 2])
    }
}

/// Brute-force nearest record: `(index, distance)`, lowest index on ties.
pub fn nearest(ds: &Dataset, x: &[f64], distance: Distance, only_duplicated: bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in ds.records.iter().enumerate() {
        if only_duplicated && !r.duplicated {
            continue;
        }
        let d = distance.eval(x, &r.x0);
        if best.map_or(true, |(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}

fn nearest_own(ds: &Dataset, x: &[f64], condition: usize, distance: Distance) -> f64 {
    ds.records
        .iter()
        .filter(|r| r.condition == condition)
        .map(|r| distance.eval(x, &r.x0))
        .fold(f64::INFINITY, f64::min)
}

fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn score_batch(
    generations: &[(Vec<f64>, usize)],
    ds: &Dataset,
    probe: &BasinProbeConfig,
) -> Result<GenerationReport> {
    if generations.is_empty() {
        return Err(Error::Usage("no generations to score".into()));
    }
    if ds.records.is_empty() {
        return Err(Error::Usage("empty dataset".into()));
    }
    for (x, c) in generations {
        check_dim(ds.data_dim, x.len())?;
        if *c >= ds.n_conditions {
            return Err(Error::Usage(format!("condition {c} out of range")));
        }
    }
    let has_duplicates = ds.records.iter().any(|r| r.duplicated);
    let means = class_means(ds)?;
    let sigma_ref = reference_spread(ds, &means);
    let dist = probe.distance;
    let samples: Vec<SampleScore> = par::map_indexed(generations.len(), |i| {
        let (x, c) = &generations[i];
        let (nearest_record, nearest_distance) = nearest(ds, x, dist, false).expect("nonempty");
        let duplicate_distance = nearest(ds, x, dist, true).map(|(_, d)| d);
        let assigned = (0..means.len())
            .map(|k| (k, dist.eval(x, &means[k])))
            .fold((0, f64::INFINITY), |b, (k, d)| if d < b.1 { (k, d) } else { b })
            .0;
        SampleScore {
            condition: *c,
            nearest_record,
            nearest_distance,
            similarity: (-nearest_distance * nearest_distance / (2.0 * sigma_ref * sigma_ref)).exp(),
            duplicate_distance,
            memorized: if has_duplicates {
                duplicate_distance.is_some_and(|d| d <= probe.eps_basin)
            } else {
                nearest_own(ds, x, *c, dist) <= probe.eps_basin
            },
            assigned,
        }
    });
    let n = samples.len() as f64;
    let memorization_fraction = samples.iter().filter(|s| s.memorized).count() as f64 / n;
    let alignment = samples.iter().filter(|s| s.assigned == s.condition).count() as f64 / n;
    let mut conds: Vec<usize> = generations.iter().map(|g| g.1).collect();
    conds.sort_unstable();
    conds.dedup();
    let diversity = conds
        .into_iter()
        .map(|c| {
            let xs: Vec<&[f64]> = generations
                .iter()
                .filter(|g| g.1 == c)
                .map(|g| g.0.as_slice())
                .collect();
            if xs.len() < 2 {
                return (c, None);
            }
            let mut total = 0.0;
            let mut pairs = 0usize;
            for i in 0..xs.len() {
                for j in i + 1..xs.len() {
                    total += dist.eval(xs[i], xs[j]);
                    pairs += 1;
                }
            }
            (c, Some(total / pairs as f64))
        })
        .collect();
    let sims: Vec<f64> = samples.iter().map(|s| s.similarity).collect();
    Ok(GenerationReport {
        similarity_p95: percentile(&sims, 0.95),
        samples,
        sigma_ref,
        memorization_fraction,
        alignment,
        diversity,
    })
}

impl GenerationReport {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "sample,condition,nearest_record,nearest_distance,similarity,duplicate_distance,memorized,assigned"
        )?;
        for (i, s) in self.samples.iter().enumerate() {
            let dup = s.duplicate_distance.map(|d| d.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{i},{},{},{},{},{dup},{},{}",
                s.condition, s.nearest_record, s.nearest_distance, s.similarity, s.memorized as u8, s.assigned
            )?;
        }
        Ok(())
    }

    /// Aggregate fields only, keyed by `run_id`.
    pub fn summary_json(&self, run_id: &str) -> serde_json::Value {
        serde_json::json!({
            "run_id": run_id,
            "n_samples": self.samples.len(),
            "sigma_ref": self.sigma_ref,
            "memorization_fraction": self.memorization_fraction,
            "alignment": self.alignment,
            "similarity_p95": self.similarity_p95,
            "diversity": self.diversity.iter().map(|(c, d)| serde_json::json!({"condition": c, "diversity": d})).collect::<Vec<_>>(),
        })
    }
}

/// Area under the ROC curve of `scores` for boolean `labels` (ties count one half).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_dim(scores.len(), labels.len())?;
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|p| *p.1).map(|p| *p.0).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|p| !*p.1).map(|p| *p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Usage("AUC needs both positive and negative labels".into()));
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Threshold maximizing Youden's J (TPR - FPR); candidates are midpoints
/// between consecutive distinct scores. Returns `(threshold, tpr, fpr)`.
pub fn roc_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64, f64)> {
    check_dim(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Usage("threshold calibration needs both labels".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut candidates = vec![sorted[0] - 1.0];
    candidates.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let mut best = (f64::INFINITY, 0.0, 0.0, f64::NEG_INFINITY);
    for th in candidates {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s > th).count();
        let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s > th).count();
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        if tpr - fpr > best.3 {
            best = (th, tpr, fpr, tpr - fpr);
        }
    }
    Ok((best.0, best.1, best.2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{build_dataset, RingScenario};

    fn data() -> (Dataset, BasinProbeConfig) {
        let spec = RingScenario {
            n_conditions: 4,
            base_samples_per_condition: 40,
            duplicated_conditions: vec![2],
            duplication_factor: 20,
            target_radius: 6.0,
            ..RingScenario::duplication()
        }
        .spec()
        .unwrap();
        (build_dataset(&spec).unwrap(), BasinProbeConfig::for_mode_distance(spec.min_mode_distance()))
    }

    #[test]
    fn copies_of_duplicate_are_memorized() {
        let (ds, probe) = data();
        let target = ds.records.iter().find(|r| r.duplicated).unwrap().x0.clone();
        let gens = vec![(target.clone(), 2); 5];
        let r = score_batch(&gens, &ds, &probe).unwrap();
        assert_eq!(r.memorization_fraction, 1.0);
        assert!(r.samples.iter().all(|s| s.similarity == 1.0 && s.nearest_distance == 0.0));
        assert_eq!(r.diversity, vec![(2, Some(0.0))]);
    }

    #[test]
    fn single_sample_has_no_diversity() {
        let (ds, probe) = data();
        let r = score_batch(&[(vec![3.0, 0.0], 0)], &ds, &probe).unwrap();
        assert_eq!(r.diversity, vec![(0, None)]);
        assert_eq!(r.alignment, 1.0);
    }

    #[test]
    fn errors() {
        let (ds, probe) = data();
        assert!(matches!(score_batch(&[], &ds, &probe), Err(Error::Usage(_))));
        assert!(matches!(score_batch(&[(vec![0.0; 3], 0)], &ds, &probe), Err(Error::Shape { .. })));
    }

    #[test]
    fn auc_values() {
        assert_eq!(roc_auc(&[3.0, 2.0, 1.0, 0.0], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.0, 1.0], &[true, false]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[1.0, 1.0], &[true, false]).unwrap(), 0.5);
        assert!(roc_auc(&[1.0], &[true]).is_err());
    }

    #[test]
    fn youden_threshold_separates() {
        let (th, tpr, fpr) = roc_threshold(&[5.0, 4.0, 1.0, 0.5], &[true, true, false, false]).unwrap();
        assert_eq!((th, tpr, fpr), (2.5, 1.0, 0.0));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 1.0], 0.95), 0.95);
        assert_eq!(percentile(&[2.0], 0.95), 2.0);
    }

    #[test]
    fn csv_layout() {
        let (ds, probe) = data();
        let r = score_batch(&[(vec![3.0, 0.0], 0), (vec![0.0, 3.0], 0)], &ds, &probe).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(r.summary_json("x")["n_samples"], 2);
    }
}
