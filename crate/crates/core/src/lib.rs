//! Dual adversarial auto-encoder for unsupervised clustering.
//!
//! An encoder maps each sample to a cluster posterior `q(y|x)`, a style
//! code `h` and a residual code `z`. A decoder reconstructs the sample, a
//! second pass decodes prior draws and re-encodes them to recover `(y, h)`,
//! and a Wasserstein critic pulls the aggregated posterior of `(h, z)`
//! towards the prior. An entropy term keeps assignments confident and
//! balanced across clusters.
//!
//! ```no_run
//! use dual_aae::{data_io, networks::DataMode, trainer, PriorSpec, TrainConfig};
//!
//! let data = data_io::synth_gmm(
//!     &data_io::GmmSpec { k: 4, dim: 10, n_per_cluster: 500, separation: 6.0, cluster_std: 1.0, seed: 0 },
//!     DataMode::Feature,
//! )?;
//! let cfg = TrainConfig::new(PriorSpec::uniform(4, 2, 2)?, DataMode::Feature);
//! let (model, history) = trainer::train(&data, &cfg)?;
//! println!("{}", history.last().unwrap());
//! # Ok::<(), dual_aae::Error>(())
//! ```

pub mod autodiff;
pub mod config;
pub mod data_io;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod persistence;
pub mod tensor;
pub mod trainer;

pub use config::RunConfig;
pub use data_io::Dataset;
pub use distributions::PriorSpec;
pub use error::{Error, Result};
pub use evaluation::ClusterReport;
pub use losses::{LossBreakdown, LossWeights};
pub use networks::{DataMode, ModelSpec, ModelState};
pub use persistence::Checkpoint;
pub use tensor::Tensor;
pub use trainer::{EpochMetrics, TrainConfig, Trainer};
