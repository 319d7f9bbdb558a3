//! The alternating optimisation loop.
//!
//! Each step runs `n_critic` critic updates (followed by weight clipping)
//! and then one encoder/decoder update on the full objective. A single
//! seeded ChaCha stream drives initialisation, shuffling, prior sampling
//! and dropout, so a run is a pure function of its config and data.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::distributions::{PriorBatch, PriorSpec};
use crate::error::{Error, Result};
use crate::evaluation::{dataset_accuracy, mode_coverage};
use crate::losses::{clip_weights, record_critic_objective, record_objective, LossBreakdown, LossWeights};
use crate::networks::{
    build_model, encode_all, hard_assignments, DataMode, Group, HiddenLayout, Mode, ModelSpec, ModelState,
    Session, Trainable, DEFAULT_INIT_STD,
};
use crate::optim::AdamState;
use crate::persistence::{self, Checkpoint};
use crate::tensor::Tensor;

/// Optimisation hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingParams {
    pub lr_enc_dec: f64,
    pub lr_critic: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_n_critic")]
    pub n_critic: usize,
    #[serde(default = "default_clip_c")]
    pub clip_c: f64,
    pub seed: u64,
    #[serde(default)]
    pub ablation_no_cr: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_n_critic() -> usize {
    1
}

fn default_clip_c() -> f64 {
    0.01
}

fn default_init_std() -> f64 {
    DEFAULT_INIT_STD
}

impl Default for TrainingParams {
    fn default() -> Self {
        TrainingParams {
            lr_enc_dec: 2e-4,
            lr_critic: 2e-4,
            batch_size: 100,
            epochs: 30,
            n_critic: default_n_critic(),
            clip_c: default_clip_c(),
            seed: 0,
            ablation_no_cr: false,
            init_std: DEFAULT_INIT_STD,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub priors: PriorSpec,
    pub data_mode: DataMode,
    pub architecture: HiddenLayout,
    pub training: TrainingParams,
    pub weights: LossWeights,
}

impl TrainConfig {
    pub fn new(priors: PriorSpec, data_mode: DataMode) -> Self {
        TrainConfig {
            priors,
            data_mode,
            architecture: HiddenLayout::default(),
            training: TrainingParams::default(),
            weights: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        self.weights.validate()?;
        let t = &self.training;
        if t.batch_size < 2 {
            return Err(Error::config(format!("training.batch_size = {} but batch norm needs at least 2", t.batch_size)));
        }
        if t.epochs == 0 {
            return Err(Error::config("training.epochs must be at least 1"));
        }
        for (name, v) in [("lr_enc_dec", t.lr_enc_dec), ("lr_critic", t.lr_critic), ("clip_c", t.clip_c), ("init_std", t.init_std)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("training.{name} = {v} must be positive")));
            }
        }
        if t.n_critic == 0 {
            return Err(Error::config("training.n_critic must be at least 1"));
        }
        let a = &self.architecture;
        if !(0.0..1.0).contains(&a.critic_dropout) {
            return Err(Error::config(format!("architecture.critic_dropout = {} outside [0, 1)", a.critic_dropout)));
        }
        if a.encoder.contains(&0) || a.decoder.contains(&0) || a.critic.contains(&0) {
            return Err(Error::config("architecture: hidden widths must be positive"));
        }
        Ok(())
    }

    /// The network layout this config implies for `input_dim`-wide data.
    pub fn model_spec(&self, input_dim: usize) -> Result<ModelSpec> {
        let spec = ModelSpec::from_layout(
            self.priors.clone(),
            self.data_mode,
            input_dim,
            &self.architecture,
            self.training.ablation_no_cr,
        );
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean over the epoch's minibatches.
    pub losses: LossBreakdown,
    pub acc: Option<f64>,
    pub modes_covered: usize,
    pub kl_marginal: f64,
    pub seconds: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let acc = self.acc.map_or_else(|| "na".to_string(), |a| format!("{a:.6}"));
        write!(
            f,
            "epoch={} recon_x={:.6} recon_c={:.6} adv={:.6} cr={:.6} acc={} modes={} kl={:.6}",
            self.epoch,
            self.losses.recon_x,
            self.losses.recon_c,
            self.losses.adv_enc,
            self.losses.cr,
            acc,
            self.modes_covered,
            self.kl_marginal
        )
    }
}

fn check_finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("{what} loss is {v}")))
    }
}

/// Model, optimiser and RNG state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub state: ModelState,
    pub opt_enc_dec: AdamState,
    pub opt_critic: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    /// Validates `config` and initialises a fresh model.
    pub fn new(config: TrainConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let spec = config.model_spec(input_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
        let state = build_model(&spec, config.training.init_std, &mut rng)?;
        Ok(Trainer {
            opt_enc_dec: AdamState::new(config.training.lr_enc_dec),
            opt_critic: AdamState::new(config.training.lr_critic),
            config,
            state,
            rng,
            epoch: 0,
        })
    }

    /// Restores a run from a checkpoint. The checkpoint's arrays must match
    /// the model `config` describes, name for name and shape for shape.
    pub fn from_checkpoint(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        let input_dim = ckpt.meta.input_dim;
        let mut trainer = Trainer::new(config, input_dim)?;
        let restored = ckpt.restore(&trainer.state)?;
        trainer.state = restored.state;
        trainer.opt_enc_dec.t = restored.enc_dec_t;
        trainer.opt_enc_dec.m = restored.enc_dec_m;
        trainer.opt_enc_dec.v = restored.enc_dec_v;
        trainer.opt_critic.t = restored.critic_t;
        trainer.opt_critic.m = restored.critic_m;
        trainer.opt_critic.v = restored.critic_v;
        trainer.rng = restored.rng;
        trainer.epoch = ckpt.meta.epoch;
        Ok(trainer)
    }

    pub fn input_dim(&self) -> usize {
        self.state.spec.input_dim
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persistence::save_checkpoint(path, &self.checkpoint())
    }

    fn include_cr(&self) -> bool {
        !self.config.training.ablation_no_cr
    }

    /// One alternation on a single minibatch.
    pub fn train_step(&mut self, batch: &Tensor) -> Result<LossBreakdown> {
        let (n, d) = batch.dims2()?;
        if d != self.input_dim() {
            return Err(Error::shape(format!("batch has {d} features, model expects {}", self.input_dim())));
        }
        if n < 2 {
            return Err(Error::shape("a training batch needs at least 2 rows"));
        }
        let prior = self.config.priors.clone();
        let weights = self.config.weights;
        let include_cr = self.include_cr();

        let mut adv_critic = 0.0;
        for _ in 0..self.config.training.n_critic {
            let prior_batch = PriorBatch::sample(&prior, n, &mut self.rng)?;
            let grads = {
                let mut s = Session::new(&self.state, Trainable::Critic);
                let x = s.graph.constant(batch.clone());
                let loss = record_critic_objective(&mut s, x, &prior_batch, Mode::Train, &mut self.rng)?;
                adv_critic = s.graph.value(loss).item();
                check_finite("critic", adv_critic)?;
                let g = s.graph.backward(loss)?;
                s.param_grads(&g, &[Group::Critic])
            };
            self.opt_critic.step(&mut self.state.params, &grads)?;
            clip_weights(&mut self.state, self.config.training.clip_c)?;
        }

        let prior_batch = PriorBatch::sample(&prior, n, &mut self.rng)?;
        let (mut breakdown, grads, stats) = {
            let mut s = Session::new(&self.state, Trainable::EncoderDecoder);
            let x = s.graph.constant(batch.clone());
            let obj = record_objective(&mut s, x, &prior_batch, &weights, include_cr, Mode::Train, &mut self.rng)?;
            let breakdown = obj.breakdown(&s.graph);
            check_finite("encoder/decoder", breakdown.total)?;
            let g = s.graph.backward(obj.total)?;
            let grads = s.param_grads(&g, &[Group::Encoder, Group::Decoder]);
            (breakdown, grads, s.take_batch_stats())
        };
        self.opt_enc_dec.step(&mut self.state.params, &grads)?;
        self.state.apply_batch_stats(&stats);
        breakdown.adv_critic = adv_critic;
        Ok(breakdown)
    }

    /// One pass over `dataset` in a freshly shuffled order, dropping the
    /// final partial batch.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochMetrics> {
        let start = Instant::now();
        let bs = self.config.training.batch_size;
        let n = dataset.len();
        if dataset.dim() != self.input_dim() {
            return Err(Error::shape(format!(
                "dataset has {} features, model expects {}",
                dataset.dim(),
                self.input_dim()
            )));
        }
        if n < bs {
            return Err(Error::config(format!("dataset has {n} rows, fewer than batch_size = {bs}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let epoch = self.epoch + 1;

        let mut sum = LossBreakdown::default();
        let batches = n / bs;
        for (b, idx) in order.chunks_exact(bs).enumerate() {
            let batch = dataset.features().select_rows(idx)?;
            let l = self.train_step(&batch).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {}: {msg}", b + 1)),
                other => other,
            })?;
            sum.recon_x += l.recon_x;
            sum.recon_c += l.recon_c;
            sum.adv_enc += l.adv_enc;
            sum.adv_critic += l.adv_critic;
            sum.cr += l.cr;
            sum.total += l.total;
        }
        let k = batches as f64;
        let losses = LossBreakdown {
            recon_x: sum.recon_x / k,
            recon_c: sum.recon_c / k,
            adv_enc: sum.adv_enc / k,
            adv_critic: sum.adv_critic / k,
            cr: sum.cr / k,
            total: sum.total / k,
        };
        self.epoch = epoch;

        let (acc, modes_covered, kl_marginal) = self.score(dataset)?;
        Ok(EpochMetrics { epoch, losses, acc, modes_covered, kl_marginal, seconds: start.elapsed().as_secs_f64() })
    }

    /// Accuracy (if labelled), modes covered and marginal KL of the hard
    /// assignments on `dataset`.
    pub fn score(&self, dataset: &Dataset) -> Result<(Option<f64>, usize, f64)> {
        let enc = encode_all(&self.state, dataset.features())?;
        let clusters = hard_assignments(&enc.y_probs);
        let acc = dataset_accuracy(dataset, &clusters)?.map(|a| a.acc);
        let (modes, kl) = mode_coverage(&clusters, self.config.priors.k)?;
        Ok((acc, modes, kl))
    }

    /// Trains until `config.training.epochs` epochs are complete, calling
    /// `on_epoch` after each one and checkpointing into `checkpoint_dir`.
    pub fn fit(
        &mut self,
        dataset: &Dataset,
        checkpoint_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        if dataset.is_empty() {
            return Err(Error::config("empty dataset"));
        }
        let every = self.config.training.checkpoint_every;
        let mut history = Vec::new();
        while self.epoch < self.config.training.epochs {
            let m = self.run_epoch(dataset)?;
            on_epoch(&m)?;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.epoch % every == 0 {
                    self.save(&checkpoint_path(dir, self.epoch))?;
                }
            }
            history.push(m);
        }
        if let Some(dir) = checkpoint_dir {
            self.save(&final_checkpoint_path(dir))?;
        }
        Ok(history)
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}.daae"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.daae")
}

/// Trains a fresh model on `dataset`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelState, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(config.clone(), dataset.dim())?;
    let history = trainer.fit(dataset, None, |_| Ok(()))?;
    Ok((trainer.state, history))
}

/// Continues the run saved at `checkpoint` up to `config.training.epochs`.
pub fn resume(checkpoint: &Path, dataset: &Dataset, config: &TrainConfig) -> Result<(Trainer, Vec<EpochMetrics>)> {
    let ckpt = persistence::load_checkpoint(checkpoint)?;
    if ckpt.meta.input_dim != dataset.dim() {
        return Err(Error::Load(format!(
            "checkpoint expects {} features, dataset has {}",
            ckpt.meta.input_dim,
            dataset.dim()
        )));
    }
    let mut trainer = Trainer::from_checkpoint(ckpt, config.clone())?;
    let history = trainer.fit(dataset, None, |_| Ok(()))?;
    Ok((trainer, history))
}
