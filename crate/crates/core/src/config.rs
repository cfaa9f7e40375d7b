//! Experiment configuration, loaded from TOML with every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bnn::PbpConfig;
use crate::error::{Error, Result};
use crate::gp::GpTrainOptions;
use crate::mpc::MpcConfig;
use crate::plant::{DisturbanceModel, PlantParams};
use crate::smpc::SmpcConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub episodes: usize,
    /// Episode `i` uses seed `first_seed + i`.
    pub first_seed: u64,
    pub t_sim: f64,
    /// Start-up transient dropped from every episode (d).
    pub trim: f64,
    pub target: usize,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub sparsify_threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 6,
            first_seed: 100,
            t_sim: 70.0,
            trim: 5.0,
            target: 2800,
            split_ratio: 0.8,
            split_seed: 1,
            sparsify_threshold: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    /// Fixed noise variance per output channel, standardized units.
    pub noise_variance: [f64; 2],
    pub training: GpTrainOptions,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            noise_variance: [0.1, 0.01],
            training: GpTrainOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenLoopConfig {
    pub x0: [f64; 2],
    pub s_f: f64,
    /// Piecewise-constant flow: `(start time, flow)` pairs, sorted by time.
    pub flow_steps: Vec<(f64, f64)>,
    pub t_sim: f64,
}

impl Default for OpenLoopConfig {
    fn default() -> Self {
        Self {
            x0: [1046.28, 101.615],
            s_f: 5500.0,
            flow_steps: vec![(0.0, 0.714286), (10.0, 0.65)],
            t_sim: 60.0,
        }
    }
}

impl OpenLoopConfig {
    pub fn flow(&self, t: f64) -> f64 {
        self.flow_steps
            .iter()
            .take_while(|(t0, _)| *t0 <= t + 1e-9)
            .last()
            .map_or(0.0, |s| s.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub seeds: Vec<u64>,
    pub t_sim: f64,
    pub x0: [f64; 2],
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            t_sim: 70.0,
            x0: [1046.28, 101.615],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub sizes: Vec<usize>,
    /// Episode length of each timed run (d).
    pub t_sim: f64,
    /// Start time of the timed runs, so the band is active (d).
    pub t_start: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            sizes: vec![25, 50, 100, 200, 400],
            t_sim: 5.0,
            t_start: 30.0,
            repeats: 3,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantParams,
    pub disturbance: DisturbanceModel,
    /// Nominal MPC used to generate the data.
    pub mpc: MpcConfig,
    /// Controllers of the closed-loop study and the benchmark.
    pub smpc: SmpcConfig,
    pub data: DataConfig,
    pub gp: GpConfig,
    pub bnn: PbpConfig,
    pub open_loop: OpenLoopConfig,
    pub closed_loop: ClosedLoopConfig,
    pub benchmark: BenchmarkConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            plant: PlantParams::default(),
            disturbance: DisturbanceModel::default(),
            mpc: MpcConfig::default(),
            smpc: SmpcConfig::default(),
            data: DataConfig::default(),
            gp: GpConfig::default(),
            bnn: PbpConfig::default(),
            open_loop: OpenLoopConfig::default(),
            closed_loop: ClosedLoopConfig::default(),
            benchmark: BenchmarkConfig::default(),
            out_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.mpc.validate()?;
        self.smpc.validate()?;
        let d = &self.data;
        if d.episodes == 0 || d.target == 0 {
            return Err(Error::Config(
                "data.episodes and data.target must be positive".into(),
            ));
        }
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "data.split_ratio must lie in (0, 1), got {}",
                d.split_ratio
            )));
        }
        if !(d.trim >= 0.0 && d.trim < d.t_sim) {
            return Err(Error::Config("data.trim must lie in [0, t_sim)".into()));
        }
        if !(d.sparsify_threshold > 0.0) {
            return Err(Error::Config(
                "data.sparsify_threshold must be positive".into(),
            ));
        }
        if self.gp.noise_variance.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config(
                "gp.noise_variance entries must be positive".into(),
            ));
        }
        if self.bnn.epochs == 0 {
            return Err(Error::Config("bnn.epochs must be positive".into()));
        }
        let ol = &self.open_loop;
        if ol.flow_steps.is_empty() || ol.flow_steps.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(Error::Config(
                "open_loop.flow_steps must be non-empty and sorted by time".into(),
            ));
        }
        if self.closed_loop.seeds.is_empty() || !(self.closed_loop.t_sim > 0.0) {
            return Err(Error::Config(
                "closed_loop needs seeds and a positive t_sim".into(),
            ));
        }
        let b = &self.benchmark;
        if b.sizes.is_empty() || b.repeats == 0 || !(b.t_sim > 0.0) {
            return Err(Error::Config(
                "benchmark needs sizes, repeats >= 1 and a positive t_sim".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the serialized configuration.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
