//! JSON run configuration.
//!
//! ```json
//! {
//!   "data": { "kind": "gmm", "k": 4, "dim": 10, "n_per_cluster": 500,
//!             "separation": 6.0, "cluster_std": 1.0, "seed": 0 },
//!   "priors": { "k": 4, "d_h": 2, "d_z": 2 },
//!   "architecture": { "encoder": [64, 64], "decoder": [64, 64], "critic": [32] },
//!   "training": { "lr_enc_dec": 0.001, "lr_critic": 0.0005, "batch_size": 100,
//!                 "epochs": 30, "seed": 1 },
//!   "weights": { "lambda1": 0.1, "lambda2": 0.5 },
//!   "output": { "dir": "runs/gmm" }
//! }
//! ```
//!
//! Relative paths are resolved against the directory holding the config
//! file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data_io::{load_features_csv, load_idx_limit, synth_gmm, Dataset, GmmSpec};
use crate::distributions::PriorSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{DataMode, HiddenLayout};
use crate::trainer::{TrainConfig, TrainingParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_labels: bool,
        #[serde(default)]
        mode: Option<DataMode>,
    },
    Gmm {
        k: usize,
        dim: usize,
        n_per_cluster: usize,
        separation: f64,
        cluster_std: f64,
        seed: u64,
        #[serde(default)]
        mode: Option<DataMode>,
    },
}

impl DataSource {
    pub fn data_mode(&self) -> DataMode {
        match self {
            DataSource::Idx { .. } => DataMode::Pixel,
            DataSource::Csv { mode, .. } | DataSource::Gmm { mode, .. } => mode.unwrap_or(DataMode::Feature),
        }
    }

    /// Loads or generates the dataset, resolving relative paths against
    /// `base`.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        match self {
            DataSource::Idx { images, labels, limit } => {
                let labels = labels.as_deref().map(resolve);
                load_idx_limit(&resolve(images), labels.as_deref(), *limit)
            }
            DataSource::Csv { path, has_labels, mode } => {
                let mut ds = load_features_csv(&resolve(path), *has_labels)?;
                if *mode == Some(DataMode::Pixel) {
                    ds = Dataset::new(ds.name.clone(), ds.features().clone(), ds.labels().map(<[usize]>::to_vec), DataMode::Pixel)?;
                }
                Ok(ds)
            }
            DataSource::Gmm { k, dim, n_per_cluster, separation, cluster_std, seed, .. } => {
                let spec = GmmSpec {
                    k: *k,
                    dim: *dim,
                    n_per_cluster: *n_per_cluster,
                    separation: *separation,
                    cluster_std: *cluster_std,
                    seed: *seed,
                };
                synth_gmm(&spec, self.data_mode())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorsSection {
    pub k: usize,
    /// Category prior; uniform when omitted.
    #[serde(default)]
    pub pi: Option<Vec<f64>>,
    pub d_h: usize,
    pub d_z: usize,
}

impl PriorsSection {
    pub fn to_spec(&self) -> Result<PriorSpec> {
        let spec = match &self.pi {
            Some(pi) => PriorSpec { k: self.k, pi: pi.clone(), d_h: self.d_h, d_z: self.d_z },
            None => PriorSpec::uniform(self.k, self.d_h, self.d_z).map_err(|e| Error::config(format!("priors: {e}")))?,
        };
        spec.validate().map_err(|e| Error::config(format!("priors: {e}")))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Receives checkpoints and the metrics log.
    pub dir: PathBuf,
    #[serde(default = "default_metrics_log")]
    pub metrics_log: String,
}

fn default_metrics_log() -> String {
    "metrics.log".to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub priors: PriorsSection,
    #[serde(default)]
    pub architecture: HiddenLayout,
    pub training: TrainingParams,
    #[serde(default)]
    pub weights: LossWeights,
    pub output: OutputSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// Parses and validates a config document. Errors name the offending
    /// field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path.is_empty() || path == "." {
                Error::config(e.inner().to_string())
            } else {
                Error::config(format!("{path}: {}", e.inner()))
            }
        })?;
        cfg.train_config()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            priors: self.priors.to_spec()?,
            data_mode: self.data.data_mode(),
            architecture: self.architecture.clone(),
            training: self.training.clone(),
            weights: self.weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        self.data.load(&self.base_dir)
    }

    pub fn output_dir(&self) -> PathBuf {
        if self.output.dir.is_absolute() {
            self.output.dir.clone()
        } else {
            self.base_dir.join(&self.output.dir)
        }
    }
}
