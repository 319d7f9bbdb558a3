mod common;

use common::{gmm, tiny_config};
use dual_aae::networks::{DataMode, Group};
use dual_aae::persistence::{load_checkpoint, Checkpoint};
use dual_aae::trainer::{resume, train, Trainer};
use dual_aae::{Error, PriorSpec};

fn fit(trainer: &mut Trainer, ds: &dual_aae::Dataset) -> Vec<dual_aae::EpochMetrics> {
    trainer.fit(ds, None, |_| Ok(())).unwrap()
}

fn strip_seconds(mut h: Vec<dual_aae::EpochMetrics>) -> Vec<dual_aae::EpochMetrics> {
    h.iter_mut().for_each(|m| m.seconds = 0.0);
    h
}

#[test]
fn same_seed_same_run() {
    let ds = gmm(3, 6, 40, 1, DataMode::Pixel);
    let cfg = tiny_config(3, 9, 3);
    let (a, ha) = train(&ds, &cfg).unwrap();
    let (b, hb) = train(&ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(strip_seconds(ha), strip_seconds(hb));

    let mut other = cfg.clone();
    other.training.seed = 10;
    let (c, _) = train(&ds, &other).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn same_seed_byte_identical_checkpoints() {
    let ds = gmm(3, 6, 40, 2, DataMode::Pixel);
    let cfg = tiny_config(3, 4, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let sub = dir.path().join(format!("run{run}"));
        std::fs::create_dir_all(&sub).unwrap();
        let mut t = Trainer::new(cfg.clone(), ds.dim()).unwrap();
        t.fit(&ds, Some(&sub), |_| Ok(())).unwrap();
        bytes.push(std::fs::read(sub.join("final.daae")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let ds = gmm(3, 6, 40, 3, DataMode::Pixel);
    let mut t = Trainer::new(tiny_config(3, 1, 1), ds.dim()).unwrap();
    t.opt_enc_dec.lr = 0.0;
    t.opt_critic.lr = 0.0;
    let c = t.config.training.clip_c;
    for p in t.state.critic_params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = v.clamp(-c, c));
    }
    let before = t.state.params.clone();
    fit(&mut t, &ds);
    assert_eq!(t.state.params, before);
}

#[test]
fn critic_weights_stay_clipped() {
    let ds = gmm(3, 6, 40, 4, DataMode::Pixel);
    let mut cfg = tiny_config(3, 2, 1);
    cfg.training.lr_critic = 0.05;
    cfg.training.n_critic = 3;
    let c = cfg.training.clip_c;
    let mut t = Trainer::new(cfg, ds.dim()).unwrap();
    for step in 0..30 {
        let idx: Vec<usize> = (0..20).map(|i| (i * 7 + step) % ds.len()).collect();
        let batch = ds.features().select_rows(&idx).unwrap();
        t.train_step(&batch).unwrap();
        for p in t.state.critic_params_mut() {
            assert!(p.max_abs() <= c, "step {step}: {}", p.max_abs());
        }
    }
}

#[test]
fn one_epoch_one_record() {
    let ds = gmm(3, 6, 40, 5, DataMode::Pixel);
    let (_, history) = train(&ds, &tiny_config(3, 0, 1)).unwrap();
    assert_eq!(history.len(), 1);
    assert_eq!(history[0].epoch, 1);
    let line = history[0].to_string();
    assert!(line.starts_with("epoch=1 recon_x="), "{line}");
    assert!(line.contains(" acc=") && line.contains(" modes=") && line.contains(" kl="));
}

#[test]
fn unlabelled_metrics_say_na() {
    let ds = gmm(3, 6, 40, 5, DataMode::Pixel).without_labels();
    let (_, history) = train(&ds, &tiny_config(3, 0, 1)).unwrap();
    assert!(history[0].acc.is_none());
    assert!(history[0].to_string().contains("acc=na"));
}

#[test]
fn ablation_drops_cr_from_total() {
    let ds = gmm(3, 6, 40, 6, DataMode::Pixel);
    let batch = ds.features().select_rows(&(0..20).collect::<Vec<_>>()).unwrap();
    for ablate in [false, true] {
        let mut cfg = tiny_config(3, 3, 1);
        cfg.training.ablation_no_cr = ablate;
        let weights = cfg.weights;
        let mut t = Trainer::new(cfg, ds.dim()).unwrap();
        let l = t.train_step(&batch).unwrap();
        let expected = l.recon_x + weights.lambda1 * l.recon_c + l.adv_enc + if ablate { 0.0 } else { l.cr };
        assert!((l.total - expected).abs() < 1e-12, "ablate={ablate}: {l:?}");
        assert!(l.cr.is_finite());
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = gmm(3, 6, 40, 7, DataMode::Pixel);
    let full_cfg = tiny_config(3, 5, 10);
    let mut full = Trainer::new(full_cfg.clone(), ds.dim()).unwrap();
    let full_history = strip_seconds(fit(&mut full, &ds));

    let dir = tempfile::tempdir().unwrap();
    let mut half_cfg = full_cfg.clone();
    half_cfg.training.epochs = 5;
    let mut half = Trainer::new(half_cfg, ds.dim()).unwrap();
    half.fit(&ds, Some(dir.path()), |_| Ok(())).unwrap();

    let (resumed, tail) = resume(&dir.path().join("final.daae"), &ds, &full_cfg).unwrap();
    assert_eq!(resumed.epoch, 10);
    assert_eq!(resumed.state, full.state);
    assert_eq!(resumed.opt_enc_dec, full.opt_enc_dec);
    assert_eq!(resumed.opt_critic, full.opt_critic);
    assert_eq!(strip_seconds(tail), full_history[5..].to_vec());
}

#[test]
fn resume_then_save_is_byte_identical() {
    let ds = gmm(3, 6, 40, 8, DataMode::Pixel);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(3, 6, 2);
    let mut t = Trainer::new(cfg.clone(), ds.dim()).unwrap();
    t.fit(&ds, Some(dir.path()), |_| Ok(())).unwrap();
    let path = dir.path().join("final.daae");
    let original = std::fs::read(&path).unwrap();

    let restored = Trainer::from_checkpoint(load_checkpoint(&path).unwrap(), cfg).unwrap();
    let again = dir.path().join("again.daae");
    restored.save(&again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), original);
    assert_eq!(Checkpoint::from_bytes(&original).unwrap().to_bytes().unwrap(), original);
}

#[test]
fn resume_with_other_cluster_count_is_a_load_error() {
    let ds = gmm(3, 6, 40, 9, DataMode::Pixel);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny_config(3, 0, 1), ds.dim()).unwrap();
    t.fit(&ds, Some(dir.path()), |_| Ok(())).unwrap();

    let mut wrong = tiny_config(3, 0, 2);
    wrong.priors = PriorSpec::uniform(4, 2, 1).unwrap();
    match resume(&dir.path().join("final.daae"), &ds, &wrong) {
        Err(Error::Load(msg)) => assert!(!msg.is_empty()),
        other => panic!("expected a load error, got {:?}", other.map(|(t, _)| t.epoch)),
    }

    let narrow = gmm(3, 5, 40, 9, DataMode::Pixel);
    assert!(matches!(resume(&dir.path().join("final.daae"), &narrow, &tiny_config(3, 0, 2)), Err(Error::Load(_))));
}

#[test]
fn reconstruction_improves() {
    let ds = gmm(3, 8, 60, 10, DataMode::Pixel);
    let (_, h) = train(&ds, &tiny_config(3, 11, 15)).unwrap();
    let first: f64 = h[..5].iter().map(|m| m.losses.recon_x).sum::<f64>() / 5.0;
    let last: f64 = h[h.len() - 5..].iter().map(|m| m.losses.recon_x).sum::<f64>() / 5.0;
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn labels_never_reach_training() {
    let ds = gmm(3, 6, 40, 12, DataMode::Pixel);
    let cfg = tiny_config(3, 13, 2);
    let (with, _) = train(&ds, &cfg).unwrap();
    let (without, _) = train(&ds.without_labels(), &cfg).unwrap();
    assert_eq!(with, without);
}

#[test]
fn checkpoint_cadence() {
    let ds = gmm(3, 6, 40, 14, DataMode::Pixel);
    let mut cfg = tiny_config(3, 0, 4);
    cfg.training.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg, ds.dim()).unwrap();
    t.fit(&ds, Some(dir.path()), |_| Ok(())).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["epoch-0002.daae", "epoch-0004.daae", "final.daae"]);
}

#[test]
fn too_small_dataset_is_rejected() {
    let ds = gmm(3, 6, 5, 15, DataMode::Pixel);
    let mut t = Trainer::new(tiny_config(3, 0, 1), ds.dim()).unwrap();
    assert!(matches!(t.run_epoch(&ds), Err(Error::Config(_))));
}

#[test]
fn only_critic_and_networks_are_grouped() {
    let t = Trainer::new(tiny_config(3, 0, 1), 6).unwrap();
    let all = t.state.param_names(&[Group::Encoder, Group::Decoder, Group::Critic]);
    assert_eq!(all.len(), t.state.params.len());
}
