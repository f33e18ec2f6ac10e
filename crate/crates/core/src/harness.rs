//! Subcommands behind the CLI: train, sample, probe, sweep, detect.
//!
//! Each command owns one output directory. It writes `manifest.json` (run id,
//! config hash, seed, crate version), the resolved `config.toml`, and its
//! products. Nothing depends on the clock, so rerunning a manifest's config
//! reproduces every file bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::basin::{basin_area, detect_memorization, write_grid_csv, BasinProbeResult, Prober};
use crate::checkpoint::{self, CheckpointHeader};
use crate::config::{RunConfig, SweepAxis, SwitchKind};
use crate::error::{Error, Result};
use crate::guide::{GuidancePolicy, PrePhase, SwitchRule};
use crate::metrics::{roc_auc, roc_threshold, score_batch, GenerationReport};
use crate::model::{Condition, DenoiserParams};
use crate::par;
use crate::rng::{label, StreamKey};
use crate::sample::{initial_noise, sample_batch, Trajectory};
use crate::scenario::{build_dataset, Dataset, ScenarioSpec};
use crate::schedule::NoiseSchedule;
use crate::train::{train, LossPoint};

pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Training-config hash stored in the checkpoint the run read, if any.
    pub checkpoint_hash: Option<String>,
}

/// `<command>-<first 12 hex digits of the config hash>`.
pub fn run_id(cfg: &RunConfig, command: &str) -> String {
    format!("{command}-{}", &cfg.hash()[..12])
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    write_with(path, |w| writeln!(w, "{text}"))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serde(format!("{other:?}")),
    }
}

fn write_ndjson<T: Serialize>(path: &Path, lines: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for line in lines {
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Creates `out` and writes the manifest and resolved config into it.
pub fn start_run(cfg: &RunConfig, command: &str, out: &Path, header: Option<&CheckpointHeader>) -> Result<Manifest> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = Manifest {
        command: command.to_string(),
        run_id: run_id(cfg, command),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint_hash: header.map(|h| h.config_hash.clone()),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let toml = cfg.to_toml();
    write_with(&out.join("config.toml"), |w| w.write_all(toml.as_bytes()))?;
    Ok(manifest)
}

/// Trained network, the data it saw, and its schedule.
pub struct Model {
    pub params: DenoiserParams,
    pub schedule: NoiseSchedule,
    pub spec: ScenarioSpec,
    pub dataset: Dataset,
    pub header: Option<CheckpointHeader>,
}

/// Builds the scenario and trains a fresh network as `cfg` describes.
pub fn train_model(cfg: &RunConfig, on_log: impl FnMut(&LossPoint)) -> Result<(Model, Vec<LossPoint>)> {
    cfg.validate()?;
    let spec = cfg.scenario_spec()?;
    let dataset = build_dataset(&spec)?;
    let schedule = cfg.schedule.build()?;
    let mut params = DenoiserParams::init(cfg.architecture(), StreamKey::root(cfg.seed).split(label::INIT))?;
    let curve = train(&mut params, &dataset, &schedule, &cfg.train, cfg.seed, on_log)?;
    Ok((
        Model {
            params,
            schedule,
            spec,
            dataset,
            header: None,
        },
        curve,
    ))
}

/// Loads a checkpoint and checks it against the architecture and schedule of `cfg`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    cfg.validate()?;
    let (header, params) = checkpoint::load(path)?;
    if header.arch != cfg.architecture() {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match the config ({:?})",
            header.arch,
            cfg.architecture()
        )));
    }
    if header.schedule != cfg.schedule {
        return Err(Error::Config("checkpoint was trained with a different noise schedule".into()));
    }
    if header.config_hash != cfg.training_hash() {
        warn!("checkpoint training hash differs from the config; scenario or training settings changed");
    }
    let spec = cfg.scenario_spec()?;
    Ok(Model {
        dataset: build_dataset(&spec)?,
        schedule: cfg.schedule.build()?,
        spec,
        params,
        header: Some(header),
    })
}

pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<LossPoint>,
    pub checkpoint: PathBuf,
    pub manifest: Manifest,
}

/// Trains, then writes `dataset.ndjson`, `loss.csv` and the checkpoint.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = start_run(cfg, "train", out, None)?;
    info!("training {} steps on {} conditions", cfg.train.steps, cfg.scenario.n_conditions);
    let (model, curve) = train_model(cfg, |p| info!("step {} loss {:.5} probe {:.5}", p.step, p.loss, p.probe_loss))?;
    let ds_path = out.join("dataset.ndjson");
    write_with(&ds_path, |w| model.dataset.dump_ndjson(w))?;
    write_csv(&out.join("loss.csv"), &curve)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    checkpoint::save(&checkpoint, &model.params, &cfg.schedule, &cfg.training_hash())?;
    info!("checkpoint written to {}", checkpoint.display());
    Ok(TrainOutcome {
        model,
        curve,
        checkpoint,
        manifest,
    })
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TrajectoryLine<'a> {
    Step {
        run_id: &'a str,
        seed: Option<u64>,
        condition: String,
        t: usize,
        s: f64,
        d_t: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        x_t: Option<&'a [f64]>,
    },
    Summary {
        run_id: &'a str,
        seed: Option<u64>,
        condition: String,
        policy: &'a str,
        final_x0: &'a [f64],
        tau: Option<usize>,
        no_transition: bool,
    },
}

fn trajectory_lines<'a>(run_id: &'a str, tr: &'a Trajectory, with_states: bool) -> Vec<TrajectoryLine<'a>> {
    let mut lines: Vec<TrajectoryLine> = tr
        .disagreement
        .0
        .iter()
        .zip(&tr.weights)
        .map(|(&(t, d), &(_, s))| TrajectoryLine::Step {
            run_id,
            seed: tr.seed,
            condition: tr.condition.to_string(),
            t,
            s,
            d_t: d,
            x_t: if with_states { tr.state_at(t).map(|p| p.x.as_slice()) } else { None },
        })
        .collect();
    lines.push(TrajectoryLine::Summary {
        run_id,
        seed: tr.seed,
        condition: tr.condition.to_string(),
        policy: &tr.policy,
        final_x0: tr.final_state(),
        tau: tr.transition,
        no_transition: tr.no_transition,
    });
    lines
}

/// Per-condition aggregate of a batch of trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: usize,
    pub duplicated: bool,
    pub n: usize,
    pub memorization_fraction: f64,
    pub alignment: f64,
    pub diversity: Option<f64>,
    /// Mean first-step disagreement `d_T`.
    pub mean_d_first: f64,
    /// Trajectories whose switch rule fired.
    pub transitions: usize,
    pub tau_median: Option<usize>,
}

/// Median of `v` (lower middle element for even lengths).
pub fn median_usize(v: &[usize]) -> Option<usize> {
    let mut s = v.to_vec();
    s.sort_unstable();
    (!s.is_empty()).then(|| s[(s.len() - 1) / 2])
}

/// Samples every condition in `conditions` under `policy` and scores the batch.
pub fn sample_conditions(
    cfg: &RunConfig,
    model: &Model,
    policy: &GuidancePolicy,
    conditions: &[usize],
) -> Result<(Vec<Trajectory>, Vec<ConditionSummary>)> {
    let probe = cfg.probe_config()?;
    let dups = model.spec.duplicated_conditions();
    let mut all = Vec::new();
    let mut summaries = Vec::new();
    for &c in conditions {
        let trs = sample_batch(&model.schedule, &model.params, policy, Condition::Class(c), &cfg.seeds, cfg.n_steps)?;
        let gens: Vec<(Vec<f64>, usize)> = trs.iter().map(|t| (t.final_state().to_vec(), c)).collect();
        let report = score_batch(&gens, &model.dataset, &probe)?;
        let taus: Vec<usize> = trs.iter().filter_map(|t| t.transition).collect();
        summaries.push(ConditionSummary {
            condition: c,
            duplicated: dups.contains(&c),
            n: trs.len(),
            memorization_fraction: report.memorization_fraction,
            alignment: report.alignment,
            diversity: report.diversity.iter().find(|d| d.0 == c).and_then(|d| d.1),
            mean_d_first: trs.iter().map(|t| t.disagreement.0[0].1).sum::<f64>() / trs.len() as f64,
            transitions: taus.len(),
            tau_median: median_usize(&taus),
        });
        all.extend(trs);
    }
    Ok((all, summaries))
}

pub struct SampleOutcome {
    pub trajectories: Vec<Trajectory>,
    pub report: GenerationReport,
    pub conditions: Vec<ConditionSummary>,
    pub manifest: Manifest,
}

#[derive(Serialize)]
struct GenerationRow {
    seed: Option<u64>,
    condition: usize,
    x0: String,
    tau: Option<usize>,
    no_transition: bool,
}

/// Samples under the configured policy. Writes `trajectories.ndjson`,
/// `generations.csv`, `metrics.csv` and `summary.json`.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<SampleOutcome> {
    let model = load_model(cfg, checkpoint)?;
    let manifest = start_run(cfg, "sample", out, model.header.as_ref())?;
    let policy = cfg.policy.build()?;
    info!("sampling {} seeds per condition under {}", cfg.seeds.len(), policy.describe());
    let (trajectories, conditions) = sample_conditions(cfg, &model, &policy, &cfg.selected_conditions())?;
    let gens: Vec<(Vec<f64>, usize)> = trajectories
        .iter()
        .map(|t| (t.final_state().to_vec(), t.condition.class_id().expect("class condition")))
        .collect();
    let report = score_batch(&gens, &model.dataset, &cfg.probe_config()?)?;

    let with_states = cfg.log_states;
    write_ndjson(
        &out.join("trajectories.ndjson"),
        trajectories.iter().flat_map(|t| trajectory_lines(&manifest.run_id, t, with_states)),
    )?;
    let rows: Vec<GenerationRow> = trajectories
        .iter()
        .map(|t| GenerationRow {
            seed: t.seed,
            condition: t.condition.class_id().expect("class condition"),
            x0: t.final_state().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
            tau: t.transition,
            no_transition: t.no_transition,
        })
        .collect();
    write_csv(&out.join("generations.csv"), &rows)?;
    write_with(&out.join("metrics.csv"), |w| report.write_csv(w))?;
    let mut summary = report.summary_json(&manifest.run_id);
    summary["policy"] = serde_json::json!(policy.describe());
    summary["conditions"] = serde_json::to_value(&conditions).map_err(|e| Error::Serde(e.to_string()))?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(SampleOutcome {
        trajectories,
        report,
        conditions,
        manifest,
    })
}

/// Pre-phase used for transition probes: the policy's own, or zero guidance for plain CFG.
pub fn probe_pre_phase(cfg: &RunConfig) -> PrePhase {
    match cfg.policy.pre {
        PrePhase::Cfg => PrePhase::Zero,
        p => p,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub condition: usize,
    pub duplicated: bool,
    pub confirmed: bool,
    pub d_first: f64,
    pub probes: usize,
    /// Share of probes whose dynamic and bisected transition points are within two ladder steps.
    pub agreement: f64,
    pub sandwich: f64,
    pub dynamic_median: Option<usize>,
    pub bisect_median: Option<usize>,
    /// Basin area fraction per grid timestep, for 2-D runs.
    pub basin_area: Vec<(usize, f64)>,
}

pub struct ProbeOutcome {
    pub results: Vec<BasinProbeResult>,
    pub summaries: Vec<ProbeSummary>,
    pub manifest: Manifest,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ProbeLine<'a> {
    Transition {
        run_id: &'a str,
        condition: usize,
        seed: Option<u64>,
        pre: PrePhase,
        dynamic: Option<usize>,
        bisect: Option<usize>,
        sandwich: bool,
        agrees: bool,
        inside: &'a [(usize, bool)],
    },
    Attractor {
        run_id: &'a str,
        #[serde(flatten)]
        summary: &'a ProbeSummary,
        attractor: Option<&'a [f64]>,
        nearest_record: Option<&'a crate::basin::NearestRecord>,
        final_distances: &'a [f64],
    },
}

/// Attractor search, transition probes and (2-D) membership grids for the
/// selected conditions. Writes `probe.ndjson`, `grid_c<k>.csv` and `summary.json`.
pub fn cmd_probe(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<ProbeOutcome> {
    let model = load_model(cfg, checkpoint)?;
    let manifest = start_run(cfg, "probe", out, model.header.as_ref())?;
    let (results, summaries) = probe_conditions(cfg, &model, &cfg.selected_conditions(), true)?;

    let stride = cfg.schedule.timesteps / cfg.n_steps;
    let mut lines = Vec::new();
    for (r, s) in results.iter().zip(&summaries) {
        for p in &r.transitions {
            lines.push(ProbeLine::Transition {
                run_id: &manifest.run_id,
                condition: s.condition,
                seed: p.seed,
                pre: p.pre,
                dynamic: p.dynamic,
                bisect: p.bisect,
                sandwich: p.sandwich,
                agrees: p.agrees(stride, 2),
                inside: &p.inside,
            });
        }
        lines.push(ProbeLine::Attractor {
            run_id: &manifest.run_id,
            summary: s,
            attractor: r.attractor.as_deref(),
            nearest_record: r.nearest_record.as_ref(),
            final_distances: &r.final_distances,
        });
        if !r.grid.is_empty() {
            write_with(&out.join(format!("grid_c{}.csv", s.condition)), |w| write_grid_csv(&r.grid, w))?;
        }
    }
    write_ndjson(&out.join("probe.ndjson"), lines)?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "run_id": manifest.run_id,
            "pre_phase": probe_pre_phase(cfg),
            "eps_basin": cfg.probe_config()?.eps_basin,
            "conditions": summaries,
        }),
    )?;
    Ok(ProbeOutcome {
        results,
        summaries,
        manifest,
    })
}

/// Runs the basin probes of [`cmd_probe`] without writing files.
pub fn probe_conditions(
    cfg: &RunConfig,
    model: &Model,
    conditions: &[usize],
    with_grid: bool,
) -> Result<(Vec<BasinProbeResult>, Vec<ProbeSummary>)> {
    let probe = cfg.probe_config()?;
    let prober = Prober::new(&model.schedule, &model.params, cfg.policy.lambda, cfg.n_steps, probe.clone())?;
    let seeds: Vec<u64> = cfg.seeds.iter().copied().take(probe.n_probe_seeds).collect();
    let pre = probe_pre_phase(cfg);
    let dups = model.spec.duplicated_conditions();
    let trained = model.params.steps_trained > 0;
    let mut results = Vec::new();
    let mut summaries = Vec::new();
    for &c in conditions {
        let e_p = Condition::Class(c);
        let mut r = prober.find_attractor(trained, e_p, &seeds, Some(&model.dataset))?;
        if let Some(a) = r.attractor.clone() {
            prober.probe_transitions(&mut r, pre)?;
            if with_grid && model.spec.data_dim == 2 && !cfg.probe.grid_timesteps.is_empty() {
                let e = cfg.probe.grid_extent;
                r.grid = prober.membership_grid(e_p, &a, &cfg.probe.grid_timesteps, -e, e, cfg.probe.grid_points)?;
            }
        }
        let n = r.transitions.len();
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let dynamic: Vec<usize> = r.transitions.iter().filter_map(|p| p.dynamic).collect();
        let bisect: Vec<usize> = r.transitions.iter().filter_map(|p| p.bisect).collect();
        let summary = ProbeSummary {
            condition: c,
            duplicated: dups.contains(&c),
            confirmed: r.confirmed,
            d_first: r.d_first,
            probes: n,
            agreement: frac(r.transitions.iter().filter(|p| p.agrees(prober.stride(), 2)).count()),
            sandwich: frac(r.transitions.iter().filter(|p| p.sandwich).count()),
            dynamic_median: median_usize(&dynamic),
            bisect_median: median_usize(&bisect),
            basin_area: basin_area(&r.grid),
        };
        info!(
            "condition {c}: attractor {} agreement {:.2} sandwich {:.2}",
            if r.confirmed { "confirmed" } else { "not found" },
            summary.agreement,
            summary.sandwich
        );
        results.push(r);
        summaries.push(summary);
    }
    Ok((results, summaries))
}

/// Mean first-step disagreement per condition over `seeds`.
pub fn first_step_scores(model: &Model, conditions: &[usize], seeds: &[u64]) -> Result<Vec<f64>> {
    let dim = model.spec.data_dim;
    conditions
        .iter()
        .map(|&c| {
            let ds: Vec<f64> = par::map_indexed(seeds.len(), |i| {
                detect_memorization(&model.schedule, &model.params, Condition::Class(c), &initial_noise(seeds[i], dim), 0.0)
                    .map(|r| r.1)
            })
            .into_iter()
            .collect::<Result<_>>()?;
            Ok(ds.iter().sum::<f64>() / ds.len() as f64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub auc: f64,
}

/// ROC calibration of a `d_T` threshold; `None` unless both labels occur.
pub fn calibrate(scores: &[f64], labels: &[bool]) -> Result<Option<Calibration>> {
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Ok(None);
    }
    let (threshold, tpr, fpr) = roc_threshold(scores, labels)?;
    Ok(Some(Calibration {
        threshold,
        tpr,
        fpr,
        auc: roc_auc(scores, labels)?,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectRow {
    pub condition: usize,
    pub duplicated: bool,
    pub mean_d_first: f64,
    pub flagged: bool,
}

pub struct DetectOutcome {
    pub rows: Vec<DetectRow>,
    pub threshold: f64,
    pub calibration: Option<Calibration>,
    pub manifest: Manifest,
}

/// Flags conditions whose mean `d_T` exceeds the threshold (from the config,
/// or calibrated on the scenario's labels). Writes `detect.csv` and `summary.json`.
pub fn cmd_detect(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<DetectOutcome> {
    let model = load_model(cfg, checkpoint)?;
    let manifest = start_run(cfg, "detect", out, model.header.as_ref())?;
    let conditions = cfg.selected_conditions();
    let scores = first_step_scores(&model, &conditions, &cfg.seeds)?;
    let dups = model.spec.duplicated_conditions();
    let labels: Vec<bool> = conditions.iter().map(|c| dups.contains(c)).collect();
    let calibration = calibrate(&scores, &labels)?;
    let threshold = match (cfg.threshold, calibration) {
        (Some(t), _) => t,
        (None, Some(c)) => c.threshold,
        (None, None) => {
            return Err(Error::Config(
                "no threshold configured and the scenario has no labels to calibrate one".into(),
            ))
        }
    };
    let rows: Vec<DetectRow> = conditions
        .iter()
        .zip(&scores)
        .zip(&labels)
        .map(|((&condition, &mean_d_first), &duplicated)| DetectRow {
            condition,
            duplicated,
            mean_d_first,
            flagged: mean_d_first > threshold,
        })
        .collect();
    write_csv(&out.join("detect.csv"), &rows)?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "run_id": manifest.run_id,
            "threshold": threshold,
            "calibration": calibration,
            "flagged": rows.iter().filter(|r| r.flagged).map(|r| r.condition).collect::<Vec<_>>(),
        }),
    )?;
    Ok(DetectOutcome {
        rows,
        threshold,
        calibration,
        manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub condition: usize,
    pub duplicated: bool,
    pub memorization_fraction: Option<f64>,
    pub alignment: Option<f64>,
    pub diversity: Option<f64>,
    pub mean_d_first: f64,
    pub flagged: bool,
    pub tau_median: Option<usize>,
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub calibration: Option<Calibration>,
    pub manifest: Manifest,
}

fn static_policy(cfg: &RunConfig, tau: usize) -> Result<GuidancePolicy> {
    let mut p = cfg.policy.clone();
    p.pre = probe_pre_phase(cfg);
    p.switch = SwitchKind::Static;
    p.tau_s = Some(tau);
    let policy = p.build()?;
    policy.validate(cfg.schedule.timesteps)?;
    Ok(policy)
}

fn sweep_value<T: TryFrom<u64>>(v: f64, what: &str) -> Result<T> {
    if v >= 0.0 && v.fract() == 0.0 {
        if let Ok(x) = T::try_from(v as u64) {
            return Ok(x);
        }
    }
    Err(Error::Config(format!("{what} must be a non-negative integer, got {v}")))
}

/// One metrics row per (grid value, condition). The threshold is calibrated
/// by ROC on the base model's labeled conditions (or taken from the config)
/// and applied to every grid point. The duplication-factor axis retrains a
/// network per value and ignores `checkpoint`.
pub fn cmd_sweep(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<SweepOutcome> {
    cfg.validate()?;
    let axis = cfg.sweep.axis;
    if cfg.sweep.values.is_empty() {
        return Err(Error::Usage("sweep grid is empty".into()));
    }
    if cfg.sweep.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("sweep values must be finite".into()));
    }
    let conditions = cfg.selected_conditions();
    let base = match (axis, checkpoint) {
        (SweepAxis::DuplicationFactor, _) => None,
        (_, Some(path)) => Some(load_model(cfg, path)?),
        (_, None) => return Err(Error::Usage(format!("the {axis:?} sweep needs --checkpoint"))),
    };
    let manifest = start_run(cfg, "sweep", out, base.as_ref().and_then(|m| m.header.as_ref()))?;

    let mut runs: Vec<(f64, Vec<ConditionSummary>, Vec<f64>, Vec<bool>)> = Vec::new();
    match axis {
        SweepAxis::DuplicationFactor => {
            for &v in &cfg.sweep.values {
                let mut c2 = cfg.clone();
                c2.scenario.duplication_factor = sweep_value(v, "duplication factor")?;
                info!("duplication factor {v}: training");
                let (model, _) = train_model(&c2, |_| {})?;
                let (_, sums) = sample_conditions(&c2, &model, &c2.policy.build()?, &conditions)?;
                let scores = first_step_scores(&model, &conditions, &c2.seeds)?;
                let labels = sums.iter().map(|s| s.duplicated).collect();
                runs.push((v, sums, scores, labels));
            }
        }
        SweepAxis::Lambda | SweepAxis::TauS | SweepAxis::Threshold => {
            let model = base.as_ref().expect("loaded above");
            let scores = first_step_scores(model, &conditions, &cfg.seeds)?;
            let dups = model.spec.duplicated_conditions();
            let labels: Vec<bool> = conditions.iter().map(|c| dups.contains(c)).collect();
            for &v in &cfg.sweep.values {
                let sums = match axis {
                    SweepAxis::Lambda => {
                        let mut p = cfg.policy.build()?;
                        p.lambda = v;
                        p.validate(cfg.schedule.timesteps)?;
                        sample_conditions(cfg, model, &p, &conditions)?.1
                    }
                    SweepAxis::TauS => {
                        let p = static_policy(cfg, sweep_value(v, "tau_s")?)?;
                        sample_conditions(cfg, model, &p, &conditions)?.1
                    }
                    _ => Vec::new(),
                };
                info!("{axis:?} = {v}: done");
                runs.push((v, sums, scores.clone(), labels.clone()));
            }
        }
    }

    // Calibrate on the first grid point whose labels contain both classes.
    let calibration = runs
        .iter()
        .find_map(|(_, _, scores, labels)| calibrate(scores, labels).transpose())
        .transpose()?;
    let fixed = cfg.threshold.or(calibration.map(|c| c.threshold));

    let mut rows = Vec::new();
    for (v, sums, scores, labels) in &runs {
        let threshold = if axis == SweepAxis::Threshold { Some(*v) } else { fixed };
        for (k, &c) in conditions.iter().enumerate() {
            let s = sums.get(k);
            rows.push(SweepRow {
                axis,
                value: *v,
                condition: c,
                duplicated: labels[k],
                memorization_fraction: s.map(|s| s.memorization_fraction),
                alignment: s.map(|s| s.alignment),
                diversity: s.and_then(|s| s.diversity),
                mean_d_first: scores[k],
                flagged: threshold.is_some_and(|t| scores[k] > t),
                tau_median: s.and_then(|s| s.tau_median),
            });
        }
    }
    write_csv(&out.join("sweep.csv"), &rows)?;
    write_json(
        &out.join("summary.json"),
        &serde_json::json!({
            "run_id": manifest.run_id,
            "axis": axis,
            "values": cfg.sweep.values,
            "calibration": calibration,
            "threshold": fixed,
        }),
    )?;
    Ok(SweepOutcome {
        rows,
        calibration,
        manifest,
    })
}

/// Whether `policy` uses the dynamic rule (its trajectories may carry a transition).
pub fn is_dynamic(policy: &GuidancePolicy) -> bool {
    policy.switch == SwitchRule::Dynamic
}
