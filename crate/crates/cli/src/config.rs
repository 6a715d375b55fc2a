use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use malliavin_score::eval::{gmm8_prior, DatasetKind, MetricConfig};
use malliavin_score::kernel::ConditionalEstimator;
use malliavin_score::mlp::{LrSchedule, TrainConfig};
use malliavin_score::verify::VerifyConfig;
use malliavin_score::{GaussianMixturePrior, InitialLaw, Schedule, SdeSpec, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub sde: SdeConfig,
    pub grid: GridConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeConfig {
    pub schedule: Schedule,
    /// Used by the isotropic schedules only.
    #[serde(default = "one")]
    pub dim: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    pub n_steps: usize,
    /// Nodes `0..n_steps` with unit spacing; `t0`/`t_end` are then ignored.
    #[serde(default)]
    pub integer_steps: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Dataset { dataset: DatasetKind, n_points: usize },
    Mixture { prior: GaussianMixturePrior },
    Point { x: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n_paths: usize,
    /// Trajectories written to `paths.csv`.
    pub dump_paths: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { n_paths: 8000, dump_paths: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum FieldKind {
    Oracle,
    Mlp,
    NonlinearMc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub field: FieldKind,
    pub steps: usize,
    pub n_samples: usize,
    pub t_floor: f64,
    pub block: usize,
    pub keep_trajectories: bool,
    pub nonlinear: NonlinearFieldConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            field: FieldKind::Mlp,
            steps: 500,
            n_samples: 4000,
            t_floor: malliavin_score::linear_score::DEFAULT_T_FLOOR,
            block: malliavin_score::sampler::DEFAULT_BLOCK,
            keep_trajectories: false,
            nonlinear: NonlinearFieldConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearFieldConfig {
    /// Number of evenly spaced horizons in `(0, T]`.
    pub horizons: usize,
    pub paths: usize,
    pub dt: f64,
    pub estimator: ConditionalEstimator,
}

impl Default for NonlinearFieldConfig {
    fn default() -> Self {
        NonlinearFieldConfig { horizons: 10, paths: 20_000, dt: 1e-3, estimator: ConditionalEstimator::default() }
    }
}

impl Default for ExperimentConfig {
    /// VP (β from 0.1 to 20) on `[0, 1]` with 500 steps, Gmm8 data.
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: None,
            sde: SdeConfig { schedule: Schedule::Vp { beta_min: 0.1, beta_max: 20.0, horizon: 1.0 }, dim: 2 },
            grid: GridConfig { t0: 0.0, t_end: 1.0, n_steps: 500, integer_steps: false },
            data: DataConfig::Dataset { dataset: DatasetKind::gmm8(), n_points: 8000 },
            simulate: SimulateConfig::default(),
            training: TrainConfig {
                epochs: 300,
                hidden_width: 128,
                hidden_layers: 4,
                batch_size: 256,
                examples_per_epoch: Some(40_000),
                lr_schedule: LrSchedule::Cosine,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
            metrics: MetricConfig { gmm8_std: Some(0.1), ..MetricConfig::default() },
            verify: VerifyConfig::default(),
        }
    }
}

/// Stream labels for seeds derived from the experiment seed.
pub mod seeds {
    pub const SIMULATE: &str = "simulate";
    pub const DATASET: &str = "dataset";
    pub const TRUTH: &str = "truth";
    pub const TRAIN: &str = "train";
    pub const SAMPLE: &str = "sample";
    pub const METRICS: &str = "metrics";
    pub const NONLINEAR: &str = "nonlinear";
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version);
        }
        self.spec()?;
        self.grid()?;
        self.training.validate()?;
        if self.sampler.steps == 0 || self.sampler.n_samples == 0 {
            bail!("sampler steps and n_samples must be positive");
        }
        if self.simulate.n_paths == 0 {
            bail!("simulate.n_paths must be positive");
        }
        if let DataConfig::Dataset { n_points: 0, .. } = self.data {
            bail!("dataset needs at least one point");
        }
        if self.initial_dim()? != self.spec()?.dim() {
            bail!("data dimension differs from the SDE dimension");
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<SdeSpec> {
        Ok(SdeSpec::new(self.sde.schedule.clone(), self.sde.dim)?)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        Ok(if self.grid.integer_steps {
            TimeGrid::integer(self.grid.n_steps)?
        } else {
            TimeGrid::new(self.grid.t0, self.grid.t_end, self.grid.n_steps)?
        })
    }

    fn initial_dim(&self) -> Result<usize> {
        Ok(match &self.data {
            DataConfig::Dataset { .. } => 2,
            DataConfig::Mixture { prior } => prior.dim(),
            DataConfig::Point { x } => x.len(),
        })
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    /// Initial law of the forward process (the training data).
    pub fn initial_law(&self) -> Result<InitialLaw> {
        Ok(match &self.data {
            DataConfig::Dataset { dataset, n_points } => InitialLaw::Points {
                dim: 2,
                data: malliavin_score::eval::generate_dataset(dataset, *n_points, self.seed_for(seeds::DATASET))?,
            },
            DataConfig::Mixture { prior } => InitialLaw::Mixture { prior: prior.clone().validated()? },
            DataConfig::Point { x } => InitialLaw::point(x.clone()),
        })
    }

    /// The data law as a Gaussian mixture, when it is one.
    pub fn data_prior(&self) -> Result<Option<GaussianMixturePrior>> {
        Ok(match &self.data {
            DataConfig::Dataset { dataset: DatasetKind::Gmm8 { std }, .. } => Some(gmm8_prior(*std)?),
            DataConfig::Mixture { prior } => Some(prior.clone().validated()?),
            DataConfig::Point { x } => Some(GaussianMixturePrior::gaussian(x.clone(), vec![0.0; x.len() * x.len()])?),
            DataConfig::Dataset { .. } => None,
        })
    }

    /// Held-out draws from the data law, independent of the training set.
    pub fn truth(&self, n: usize) -> Result<Vec<f64>> {
        let seed = self.seed_for(seeds::TRUTH);
        Ok(match &self.data {
            DataConfig::Dataset { dataset, .. } => malliavin_score::eval::generate_dataset(dataset, n, seed)?,
            _ => {
                let law = InitialLaw::Mixture { prior: self.data_prior()?.expect("mixture") };
                let m = self.initial_dim()?;
                let mut out = vec![0.0; n * m];
                for (i, p) in out.chunks_mut(m).enumerate() {
                    law.sample(seed, i as u64, p);
                }
                out
            }
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact serialization.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest length"))
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub package_version: &'static str,
    pub schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub created_unix: u64,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Manifest {
            command: command.to_string(),
            package_version: env!("CARGO_PKG_VERSION"),
            schema_version: cfg.schema_version,
            config_sha256: cfg.hash()?,
            seed: cfg.seed,
            threads: rayon::current_num_threads(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outputs: Vec::new(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("manifest_{}.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default().to_json().unwrap()).unwrap();
        v["grid"]["n_step"] = 3.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default().to_json().unwrap()).unwrap();
        v["trainig"] = serde_json::json!({});
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn schema_version_is_checked() {
        let mut c = ExperimentConfig::default();
        c.schema_version = 2;
        assert!(ExperimentConfig::from_json(&c.to_json().unwrap()).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        assert_ne!(derive_seed(0, seeds::DATASET), derive_seed(0, seeds::TRUTH));
        assert_eq!(derive_seed(5, seeds::TRAIN), derive_seed(5, seeds::TRAIN));
    }
}
