//! Flat key=value experiment configuration and its content digest.

use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::controllers::SotlParams;
use crate::rl::{FeatureMode, TrainConfig};
use crate::simulator::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    FixedTime,
    Sotl,
    MaxPressure,
    Idqn,
    MalLight,
}

impl ControllerKind {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        Ok(match s {
            "fixedtime" => Self::FixedTime,
            "sotl" => Self::Sotl,
            "maxpressure" => Self::MaxPressure,
            "idqn" => Self::Idqn,
            "mallight" => Self::MalLight,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown controller `{other}` (expected fixedtime|sotl|maxpressure|idqn|mallight)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FixedTime => "fixedtime",
            Self::Sotl => "sotl",
            Self::MaxPressure => "maxpressure",
            Self::Idqn => "idqn",
            Self::MalLight => "mallight",
        }
    }

    pub fn is_learning(self) -> bool {
        matches!(self, Self::Idqn | Self::MalLight)
    }
}

/// Aggregation-pipeline ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Fixed (unit) filters instead of trainable ones.
    FixedStateWeights,
    /// No reward aggregation.
    NoRewardAggregation,
    /// All-ones malfunction mask.
    NoMask,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Option<Self>, HarnessError> {
        Ok(match s {
            "" | "none" => None,
            "S" => Some(Self::FixedStateWeights),
            "R" => Some(Self::NoRewardAggregation),
            "M" => Some(Self::NoMask),
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown ablation `{other}` (expected S|R|M)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FixedStateWeights => "S",
            Self::NoRewardAggregation => "R",
            Self::NoMask => "M",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub net_path: PathBuf,
    pub flow_path: PathBuf,
    pub out_dir: PathBuf,
    pub controller: ControllerKind,
    pub malfunction: Vec<usize>,
    pub seeds: Vec<u64>,
    pub ablation: Option<Ablation>,
    pub features: FeatureMode,
    /// Train/test split point inside the flow file, seconds.
    pub split_s: u32,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub diffusion_k: usize,
    pub alpha: f64,
    /// Kernel width; `None` derives it from the road distances.
    pub sigma: Option<f64>,
    pub sotl: SotlParams,
    pub fixed_split_s: u32,
    pub idqn_shared: bool,
    /// Continue training from checkpoints in the output directory.
    pub resume: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            net_path: PathBuf::new(),
            flow_path: PathBuf::new(),
            out_dir: PathBuf::from("out"),
            controller: ControllerKind::FixedTime,
            malfunction: Vec::new(),
            seeds: vec![1],
            ablation: None,
            features: FeatureMode::Full,
            split_s: 3600,
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            diffusion_k: 10,
            alpha: 0.15,
            sigma: None,
            sotl: SotlParams::default(),
            fixed_split_s: 20,
            idqn_shared: true,
            resume: false,
        }
    }
}

fn parse_list<T: std::str::FromStr>(value: &str, what: &str) -> Result<Vec<T>, HarnessError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| HarnessError::Config(format!("bad {what} entry `{part}`")))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(&path)?;
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(HarnessError::ConfigLine {
                    line,
                    msg: format!("expected key=value, got `{body}`"),
                });
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| HarnessError::ConfigLine {
                    line,
                    msg: e.to_string(),
                })?;
        }
        Ok(cfg)
    }

    /// Applies one key=value setting; the CLI reuses this for overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let bad_num = || HarnessError::Config(format!("bad numeric value `{value}` for `{key}`"));
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad_num());
        match key {
            "net" => self.net_path = PathBuf::from(value),
            "flow" => self.flow_path = PathBuf::from(value),
            "out" => self.out_dir = PathBuf::from(value),
            "controller" => self.controller = ControllerKind::parse(value)?,
            "malfunction" => self.malfunction = parse_list(value, "malfunction id")?,
            "seeds" => self.seeds = parse_list(value, "seed")?,
            "seed" => self.seeds = vec![value.parse().map_err(|_| bad_num())?],
            "ablation" => self.ablation = Ablation::parse(value)?,
            "features" => {
                self.features = match value {
                    "full" => FeatureMode::Full,
                    "lanes-only" => FeatureMode::LanesOnly,
                    other => {
                        return Err(HarnessError::Config(format!(
                            "unknown feature mode `{other}` (expected full|lanes-only)"
                        )))
                    }
                }
            }
            "split_s" => self.split_s = value.parse().map_err(|_| bad_num())?,
            "diffusion.k" => self.diffusion_k = value.parse().map_err(|_| bad_num())?,
            "diffusion.alpha" => self.alpha = parse_f64(value)?,
            "sigma" => {
                self.sigma = if value == "auto" {
                    None
                } else {
                    Some(parse_f64(value)?)
                }
            }
            "sotl.theta" => self.sotl.theta = value.parse().map_err(|_| bad_num())?,
            "sotl.min_green_s" => self.sotl.min_green_s = value.parse().map_err(|_| bad_num())?,
            "fixed.split_s" => self.fixed_split_s = value.parse().map_err(|_| bad_num())?,
            "idqn.shared" => {
                self.idqn_shared = value
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("bad bool `{value}`")))?
            }
            "resume" => {
                self.resume = value
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("bad bool `{value}`")))?
            }
            "sim.tick_s" => self.sim.tick_s = value.parse().map_err(|_| bad_num())?,
            "sim.decision_interval_s" => {
                self.sim.decision_interval_s = value.parse().map_err(|_| bad_num())?
            }
            "sim.max_speed_kmh" => self.sim.max_speed_kmh = parse_f64(value)?,
            "sim.vehicle_length_m" => self.sim.vehicle_length_m = parse_f64(value)?,
            "sim.min_gap_m" => self.sim.min_gap_m = parse_f64(value)?,
            "sim.accel_mps2" => self.sim.accel_mps2 = parse_f64(value)?,
            "sim.decel_mps2" => self.sim.decel_mps2 = parse_f64(value)?,
            "sim.discharge_rate" => self.sim.discharge_rate = parse_f64(value)?,
            "sim.foe_ignore_prob" => self.sim.foe_ignore_prob = parse_f64(value)?,
            "sim.collision_block_s" => {
                self.sim.collision_block_s = value.parse().map_err(|_| bad_num())?
            }
            "sim.malfunction_capacity_factor" => {
                self.sim.malfunction_capacity_factor = parse_f64(value)?
            }
            "train.episodes" => self.train.episodes = value.parse().map_err(|_| bad_num())?,
            "train.updates_per_episode" => {
                self.train.updates_per_episode = value.parse().map_err(|_| bad_num())?
            }
            "train.gamma" => self.train.gamma = parse_f64(value)?,
            "train.eps_start" => self.train.eps_start = parse_f64(value)?,
            "train.eps_end" => self.train.eps_end = parse_f64(value)?,
            "train.eps_decay_episodes" => {
                self.train.eps_decay_episodes = value.parse().map_err(|_| bad_num())?
            }
            "train.learning_rate" => self.train.learning_rate = parse_f64(value)?,
            "train.buffer_capacity" => {
                self.train.buffer_capacity = value.parse().map_err(|_| bad_num())?
            }
            "train.episode_seconds" => {
                self.train.episode_seconds = value.parse().map_err(|_| bad_num())?
            }
            other => {
                return Err(HarnessError::Config(format!("unknown config key `{other}`")))
            }
        }
        Ok(())
    }

    /// Canonical listing of every semantic field; the digest input.
    /// Output paths are excluded, seeds included.
    pub fn canonical_string(&self) -> String {
        let sim = &self.sim;
        let tr = &self.train;
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let mal: Vec<String> = self.malfunction.iter().map(|s| s.to_string()).collect();
        format!(
            "controller={};malfunction={};seeds={};ablation={};features={};split_s={};\
             k={};alpha={};sigma={};sotl={},{};fixed_split={};idqn_shared={};\
             sim={},{},{},{},{},{},{},{},{},{},{};\
             train={},{},{},{},{},{},{},{},{}",
            self.controller.name(),
            mal.join(","),
            seeds.join(","),
            self.ablation.map(|a| a.name()).unwrap_or("none"),
            match self.features {
                FeatureMode::Full => "full",
                FeatureMode::LanesOnly => "lanes-only",
            },
            self.split_s,
            self.diffusion_k,
            self.alpha,
            self.sigma.map(|s| s.to_string()).unwrap_or_else(|| "auto".into()),
            self.sotl.theta,
            self.sotl.min_green_s,
            self.fixed_split_s,
            self.idqn_shared,
            sim.tick_s,
            sim.decision_interval_s,
            sim.max_speed_kmh,
            sim.vehicle_length_m,
            sim.min_gap_m,
            sim.accel_mps2,
            sim.decel_mps2,
            sim.discharge_rate,
            sim.foe_ignore_prob,
            sim.collision_block_s,
            sim.malfunction_capacity_factor,
            tr.episodes,
            tr.updates_per_episode,
            tr.gamma,
            tr.eps_start,
            tr.eps_end,
            tr.eps_decay_episodes,
            tr.learning_rate,
            tr.buffer_capacity,
            tr.episode_seconds,
        )
    }

    /// Config fingerprint covering the semantic fields plus the network
    /// and flow file contents.
    pub fn digest(&self) -> Result<String, HarnessError> {
        let mut material = self.canonical_string();
        material.push('\n');
        material.push_str(&std::fs::read_to_string(&self.net_path)?);
        material.push('\n');
        material.push_str(&std::fs::read_to_string(&self.flow_path)?);
        Ok(format!("{:016x}", fnv1a64(material.as_bytes())))
    }
}

/// 64-bit FNV-1a; a stable fingerprint, not a cryptographic hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
