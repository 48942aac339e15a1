use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qbayes::autodiff::LrSchedule;
use qbayes::simulators::{BrockHommesConfig, BrockHommesSimulator, GaussianConjugateConfig, GaussianSimulator};
use qbayes::training::TrainConfig;
use qbayes::{FeatureConfig, ModelConfig, Simulator};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub simulator: SimulatorBlock,
    pub network: NetworkBlock,
    pub training: TrainingBlock,
    #[serde(default)]
    pub evaluation: EvaluationBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimulatorBlock {
    Gaussian(GaussianConjugateConfig),
    BrockHommes(BrockHommesConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkBlock {
    /// Checked against the simulator when given.
    pub d: Option<usize>,
    pub icnn_width: usize,
    pub icnn_layers: usize,
    pub q1: usize,
    pub q2: usize,
    pub deepset_width: usize,
    pub deepset_latent: usize,
}

impl Default for NetworkBlock {
    fn default() -> Self {
        Self {
            d: None,
            icnn_width: 64,
            icnn_layers: 3,
            q1: 2,
            q2: 0,
            deepset_width: 64,
            deepset_latent: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingBlock {
    pub epochs: u32,
    pub iters_per_epoch: usize,
    pub batch: usize,
    pub restarts: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub heldout_factor: usize,
    /// Write a model checkpoint every this many epochs.
    pub checkpoint_every: Option<u32>,
}

impl Default for TrainingBlock {
    fn default() -> Self {
        Self {
            epochs: 30,
            iters_per_epoch: 100,
            batch: 128,
            restarts: 3,
            lr: 0.01,
            lr_decay: 0.99,
            heldout_factor: 10,
            checkpoint_every: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mmd,
    Dtm,
    Coverage,
    W2,
    HullArea,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationBlock {
    pub metrics: Vec<Metric>,
    pub tau: Vec<f64>,
    /// Observed data: every observation equal to this value.
    pub x: Option<f64>,
    /// Observed data: CSV with one observation per row.
    pub x_file: Option<PathBuf>,
    /// Observed data: one simulation at this parameter.
    pub theta_star: Option<Vec<f64>>,
    pub samples: usize,
    pub permutations: usize,
    pub dtm_j: usize,
    pub dtm_i: usize,
    pub coverage_set: usize,
    pub coverage_test: usize,
}

impl Default for EvaluationBlock {
    fn default() -> Self {
        Self {
            metrics: Vec::new(),
            tau: vec![0.5, 0.8, 0.9],
            x: None,
            x_file: None,
            theta_star: None,
            samples: 2000,
            permutations: 200,
            dtm_j: 100,
            dtm_i: 300,
            coverage_set: 1000,
            coverage_test: 2000,
        }
    }
}

/// A parsed config together with its source text.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub text: String,
    pub path: PathBuf,
}

impl LoadedConfig {
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }
}

pub fn load(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let config = parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
    Ok(LoadedConfig {
        config,
        text,
        path: path.to_path_buf(),
    })
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text)?;
    config.validate()?;
    Ok(config)
}

/// Either simulator, behind one interface.
pub enum AnySimulator {
    Gaussian(GaussianSimulator),
    BrockHommes(BrockHommesSimulator),
}

impl AnySimulator {
    pub fn as_dyn(&self) -> &dyn Simulator {
        match self {
            AnySimulator::Gaussian(s) => s,
            AnySimulator::BrockHommes(s) => s,
        }
    }
}

impl SimulatorBlock {
    pub fn build(&self) -> Result<AnySimulator> {
        Ok(match self {
            SimulatorBlock::Gaussian(c) => AnySimulator::Gaussian(GaussianSimulator::new(c.clone())?),
            SimulatorBlock::BrockHommes(c) => AnySimulator::BrockHommes(BrockHommesSimulator::new(c.clone())?),
        })
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("version: unsupported config version {} (expected {CONFIG_VERSION})", self.version);
        }
        if self.name.trim().is_empty() {
            bail!("name: must not be empty");
        }
        let sim = self.simulator.build().context("simulator")?;
        let d = sim.as_dyn().theta_dim();
        if let Some(nd) = self.network.d {
            if nd != d {
                bail!("network.d: {nd} does not match the simulator's parameter dimension {d}");
            }
        }
        let n = &self.network;
        if n.icnn_width == 0 || n.icnn_layers == 0 {
            bail!("network: icnn_width and icnn_layers must be >= 1");
        }
        if n.q1 > 0 && (n.deepset_width == 0 || n.deepset_latent == 0) {
            bail!("network: deepset_width and deepset_latent must be >= 1");
        }
        self.train_config().validate().context("training")?;
        let e = &self.evaluation;
        for (k, &t) in e.tau.iter().enumerate() {
            if !(t > 0.0 && t < 1.0) {
                bail!("evaluation.tau[{k}]: {t} is outside (0, 1)");
            }
            if k > 0 && t <= e.tau[k - 1] {
                bail!("evaluation.tau[{k}]: levels must be strictly increasing");
            }
        }
        let sources = [e.x.is_some(), e.x_file.is_some(), e.theta_star.is_some()];
        if sources.iter().filter(|s| **s).count() > 1 {
            bail!("evaluation: give at most one of x, x_file, theta_star");
        }
        if let Some(t) = &e.theta_star {
            if t.len() != d {
                bail!("evaluation.theta_star: {} values, the simulator has {d} parameters", t.len());
            }
        }
        if e.samples < 2 || e.dtm_j == 0 || e.dtm_i == 0 || e.coverage_test == 0 || e.permutations == 0 {
            bail!("evaluation: samples >= 2 and dtm_j, dtm_i, coverage_test, permutations >= 1 required");
        }
        if e.coverage_set < d + 1 {
            bail!("evaluation.coverage_set: need at least {} directions", d + 1);
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let sim = self.simulator.build()?;
        let n = &self.network;
        Ok(ModelConfig {
            d: sim.as_dyn().theta_dim(),
            icnn_width: n.icnn_width,
            icnn_layers: n.icnn_layers,
            features: FeatureConfig {
                d_x: sim.as_dyn().d_x(),
                q1: n.q1,
                q2: n.q2,
                deepset_width: n.deepset_width,
                deepset_latent: n.deepset_latent,
            },
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            iters_per_epoch: t.iters_per_epoch,
            batch: t.batch,
            restarts: t.restarts,
            seed: self.seed,
            schedule: LrSchedule {
                base: t.lr,
                decay: t.lr_decay,
            },
            heldout_factor: t.heldout_factor,
        }
    }

    /// Network width 512, 150 epochs and 10 restarts.
    pub fn apply_paper_scale(&mut self) {
        self.network.icnn_width = 512;
        self.training.epochs = 150;
        self.training.restarts = 10;
    }
}
