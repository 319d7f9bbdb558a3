#![allow(dead_code)]

use dual_aae::data_io::{synth_gmm, GmmSpec};
use dual_aae::networks::{DataMode, HiddenLayout};
use dual_aae::trainer::TrainingParams;
use dual_aae::{Dataset, PriorSpec, TrainConfig};

pub fn gmm(k: usize, dim: usize, n_per_cluster: usize, seed: u64, mode: DataMode) -> Dataset {
    let spec = GmmSpec { k, dim, n_per_cluster, separation: 6.0, cluster_std: 1.0, seed };
    synth_gmm(&spec, mode).unwrap()
}

/// A small, fast model for behavioural tests.
pub fn tiny_config(k: usize, seed: u64, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(PriorSpec::uniform(k, 2, 1).unwrap(), DataMode::Pixel);
    cfg.architecture = HiddenLayout {
        encoder: vec![16],
        decoder: vec![16],
        critic: vec![8],
        ..HiddenLayout::default()
    };
    cfg.training = TrainingParams {
        lr_enc_dec: 1e-3,
        lr_critic: 1e-3,
        batch_size: 20,
        epochs,
        seed,
        ..TrainingParams::default()
    };
    cfg
}

/// The configuration the four-cluster mixture criteria are measured with.
pub fn gmm_config(seed: u64, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(PriorSpec::uniform(4, 2, 2).unwrap(), DataMode::Pixel);
    cfg.architecture = HiddenLayout {
        encoder: vec![64, 64],
        decoder: vec![64, 64],
        critic: vec![32, 32],
        ..HiddenLayout::default()
    };
    cfg.training = TrainingParams {
        lr_enc_dec: 5e-4,
        lr_critic: 1e-3,
        batch_size: 100,
        epochs,
        seed,
        ..TrainingParams::default()
    };
    cfg
}
