//! Run configuration (TOML, unknown keys rejected) and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basin::{BasinProbeConfig, Distance};
use crate::error::{Error, Result};
use crate::guide::{GuidancePolicy, PrePhase, SwitchRule};
use crate::model::Architecture;
use crate::scenario::{RingScenario, ScenarioSpec};
use crate::schedule::ScheduleConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cond_dim: 16,
            time_dim: 32,
            hidden: vec![128, 128, 128],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchKind {
    None,
    Dynamic,
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub pre: PrePhase,
    pub switch: SwitchKind,
    pub lambda: f64,
    pub opposite_lambda: Option<f64>,
    /// Static transition point; required when `switch = "static"`.
    pub tau_s: Option<usize>,
    pub robust_rho: Option<f64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            pre: PrePhase::Cfg,
            switch: SwitchKind::None,
            lambda: 20.0,
            opposite_lambda: None,
            tau_s: None,
            robust_rho: None,
        }
    }
}

/// Named presets accepted by `--policy`.
pub const POLICY_NAMES: &[&str] = &["cfg", "zero", "dtp", "og", "static", "og-static"];

impl PolicyConfig {
    /// Replaces the pre-phase and switch rule by a named preset, keeping the weights.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let (pre, switch) = match name {
            "cfg" => (PrePhase::Cfg, SwitchKind::None),
            "zero" => (PrePhase::Zero, SwitchKind::None),
            "dtp" => (PrePhase::Zero, SwitchKind::Dynamic),
            "og" => (PrePhase::Opposite, SwitchKind::Dynamic),
            "static" => (PrePhase::Zero, SwitchKind::Static),
            "og-static" => (PrePhase::Opposite, SwitchKind::Static),
            other => {
                return Err(Error::Usage(format!(
                    "unknown policy {other:?}; expected one of {}",
                    POLICY_NAMES.join(", ")
                )))
            }
        };
        self.pre = pre;
        self.switch = switch;
        Ok(())
    }

    pub fn build(&self) -> Result<GuidancePolicy> {
        let switch = match (self.switch, self.tau_s) {
            (SwitchKind::None, _) => SwitchRule::None,
            (SwitchKind::Dynamic, _) => SwitchRule::Dynamic,
            (SwitchKind::Static, Some(tau)) => SwitchRule::Static(tau),
            (SwitchKind::Static, None) => {
                return Err(Error::Config("static switch needs tau_s".into()))
            }
        };
        Ok(GuidancePolicy {
            pre: self.pre,
            lambda: self.lambda,
            opposite_lambda: self.opposite_lambda,
            switch,
            robust_rho: self.robust_rho,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Defaults to half the smallest distance between condition modes.
    pub eps_basin: Option<f64>,
    pub delta: f64,
    pub n_probe_seeds: usize,
    pub distance: Distance,
    /// Timesteps of the 2-D membership grid (empty disables it).
    pub grid_timesteps: Vec<usize>,
    pub grid_extent: f64,
    pub grid_points: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            eps_basin: None,
            delta: 0.1,
            n_probe_seeds: 32,
            distance: Distance::Euclidean,
            grid_timesteps: vec![1000, 800, 600, 400, 200, 100],
            grid_extent: 8.0,
            grid_points: 41,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    DuplicationFactor,
    Lambda,
    TauS,
    Threshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: SweepAxis::TauS,
            values: (0..=50).map(|k| (20 * k) as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for dataset-independent draws (initialization, minibatches).
    pub seed: u64,
    pub scenario: RingScenario,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub probe: ProbeConfig,
    pub sweep: SweepConfig,
    /// Inference steps; must divide the schedule length.
    pub n_steps: usize,
    /// Initial-noise seeds for sampling and probes.
    pub seeds: Vec<u64>,
    /// Conditions to sample/probe; empty means all.
    pub conditions: Vec<usize>,
    /// Detection threshold on `d_T`; calibrated by `sweep` when absent.
    pub threshold: Option<f64>,
    pub out_dir: PathBuf,
    /// Include `x_t` in trajectory logs.
    pub log_states: bool,
    /// One of error, warn, info, debug.
    pub log_level: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            scenario: RingScenario::default(),
            schedule: ScheduleConfig {
                beta_start: 8.5e-4,
                beta_end: 0.012,
                ..ScheduleConfig::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            policy: PolicyConfig::default(),
            probe: ProbeConfig::default(),
            sweep: SweepConfig::default(),
            n_steps: 50,
            seeds: (0..32).collect(),
            conditions: Vec::new(),
            threshold: None,
            out_dir: PathBuf::from("runs"),
            log_states: false,
            log_level: "info".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario_spec()?;
        let schedule = self.schedule.build()?;
        self.architecture().validate()?;
        self.train.validate()?;
        self.policy.build()?.validate(schedule.timesteps())?;
        self.probe_config()?.validate()?;
        schedule.strided_timesteps(self.n_steps)?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let Some(&c) = self.conditions.iter().find(|&&c| c >= self.scenario.n_conditions) {
            return Err(Error::Config(format!("condition {c} out of range")));
        }
        if let Some(t) = self.probe.grid_timesteps.iter().find(|&&t| t > schedule.timesteps()) {
            return Err(Error::Config(format!("grid timestep {t} beyond the schedule")));
        }
        if !["error", "warn", "info", "debug"].contains(&self.log_level.as_str()) {
            return Err(Error::Config(format!("unknown log_level {:?}", self.log_level)));
        }
        Ok(())
    }

    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        self.scenario.spec()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            data_dim: self.scenario.data_dim,
            n_conditions: self.scenario.n_conditions,
            cond_dim: self.model.cond_dim,
            time_dim: self.model.time_dim,
            hidden: self.model.hidden.clone(),
            timesteps: self.schedule.timesteps,
        }
    }

    pub fn probe_config(&self) -> Result<BasinProbeConfig> {
        let eps_basin = match self.probe.eps_basin {
            Some(e) => e,
            None => BasinProbeConfig::for_mode_distance(self.scenario_spec()?.min_mode_distance()).eps_basin,
        };
        Ok(BasinProbeConfig {
            eps_basin,
            delta: self.probe.delta,
            n_probe_seeds: self.probe.n_probe_seeds,
            distance: self.probe.distance,
        })
    }

    pub fn selected_conditions(&self) -> Vec<usize> {
        if self.conditions.is_empty() {
            (0..self.scenario.n_conditions).collect()
        } else {
            self.conditions.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config is always serializable");
        hex::encode(Sha256::digest(json))
    }

    /// Hash of the parts that determine a trained network.
    pub fn training_hash(&self) -> String {
        let key = serde_json::json!({
            "seed": self.seed,
            "scenario": self.scenario,
            "schedule": self.schedule,
            "model": self.model,
            "train": self.train,
        });
        hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("serializable")))
    }
}

/// Parses `--seeds`: comma-separated seeds and inclusive ranges, e.g. `0-3,7`.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Usage(format!("invalid seed list {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                if b < a {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("[train]\nstepz = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.policy.apply_preset("og").unwrap();
        cfg.threshold = Some(0.25);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seeds = vec![1];
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.training_hash(), b.training_hash());
    }

    #[test]
    fn invalid_values() {
        assert!(RunConfig::from_toml("n_steps = 7").is_err());
        assert!(RunConfig::from_toml("[policy]\nswitch = \"static\"").is_err());
        assert!(RunConfig::from_toml("[policy]\nlambda = -1.0").is_err());
        assert!(RunConfig::from_toml("conditions = [99]").is_err());
        assert!(RunConfig::from_toml("log_level = \"loud\"").is_err());
    }

    #[test]
    fn presets() {
        let mut p = PolicyConfig::default();
        p.apply_preset("dtp").unwrap();
        assert_eq!(p.build().unwrap(), GuidancePolicy::dynamic(PrePhase::Zero, 20.0));
        p.tau_s = Some(500);
        p.apply_preset("static").unwrap();
        assert_eq!(p.build().unwrap(), GuidancePolicy::static_at(PrePhase::Zero, 20.0, 500));
        assert!(p.apply_preset("nope").is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("0-3,7").unwrap(), vec![0, 1, 2, 3, 7]);
        assert_eq!(parse_seed_list(" 5 ").unwrap(), vec![5]);
        assert!(parse_seed_list("3-1").is_err());
        assert!(parse_seed_list("x").is_err());
        assert!(parse_seed_list("").is_err());
    }
}
