use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dual_aae::data_io::{self, Dataset, GmmSpec};
use dual_aae::evaluation::evaluate_dataset;
use dual_aae::networks::{encode_all, generate_cluster, hard_assignments, style_traversal, DataMode, ModelState};
use dual_aae::persistence::load_checkpoint;
use dual_aae::trainer::final_checkpoint_path;
use dual_aae::{Error, Result, RunConfig, Tensor, Trainer};

const SEED_VAR: &str = "DUAL_AAE_SEED";

#[derive(Parser)]
#[command(name = "dual-aae", version, about = "Dual adversarial auto-encoder clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a dataset at one or more rejection thresholds
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX image file or CSV feature file
        #[arg(long)]
        data: PathBuf,
        /// IDX label file to go with IDX images
        #[arg(long)]
        labels: Option<PathBuf>,
        /// The CSV's last column holds class labels
        #[arg(long)]
        has_labels: bool,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        gamma: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode prior samples from one cluster
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cluster: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one style coordinate for every cluster
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        style: usize,
        #[arg(long, allow_hyphen_values = true, default_value_t = -2.0)]
        lo: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = 2.0)]
        hi: f64,
        #[arg(long, default_value_t = 9)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write penultimate encoder features, cluster and confidence per sample
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        has_labels: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic Gaussian mixture as CSV (labels in the last column)
    Synth {
        #[arg(long)]
        k: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        n_per_cluster: usize,
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Min-max scale into [0, 1]
        #[arg(long)]
        pixel: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_VAR}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config } => train(&config),
        Command::Eval { checkpoint, data, labels, has_labels, gamma, out } => {
            let (model, _) = load_model(&checkpoint)?;
            let dataset = load_data(&data, labels.as_deref(), has_labels)?;
            check_dim(&model, &dataset)?;
            let mut gammas = gamma;
            gammas.push(0.0);
            gammas.sort_by(f64::total_cmp);
            gammas.dedup();
            let enc = encode_all(&model, dataset.features())?;
            let mut text = String::new();
            for g in gammas {
                let report = evaluate_dataset(&dataset, &enc.y_probs, g)?;
                text.push_str(&report.to_string());
                text.push('\n');
            }
            emit(out.as_deref(), &text)
        }
        Command::Generate { checkpoint, cluster, n, out } => {
            let (model, seed) = load_model(&checkpoint)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples = generate_cluster(&model, cluster, n, &mut rng)?;
            data_io::write_features_csv(&out, &samples, None)?;
            if model.spec.data_mode == DataMode::Pixel {
                if let Some(side) = square_side(samples.cols()) {
                    for i in 0..samples.rows() {
                        data_io::write_pgm(&sibling(&out, &format!("{i:04}.pgm")), side, side, samples.row(i))?;
                    }
                }
            }
            Ok(())
        }
        Command::Traverse { checkpoint, style, lo, hi, steps, out } => {
            let (model, _) = load_model(&checkpoint)?;
            let t = style_traversal(&model, style, lo, hi, steps)?;
            let mut text = String::new();
            for i in 0..t.samples.rows() {
                text.push_str(&format!("{},{}", t.cluster[i], t.value[i]));
                for v in t.samples.row(i) {
                    text.push_str(&format!(",{v}"));
                }
                text.push('\n');
            }
            fs::write(&out, text)?;
            if model.spec.data_mode == DataMode::Pixel {
                if let Some(side) = square_side(t.samples.cols()) {
                    let grid = tile(&t.samples, side, model.prior().k, steps);
                    data_io::write_pgm(&sibling(&out, "grid.pgm"), steps * side, model.prior().k * side, &grid)?;
                }
            }
            Ok(())
        }
        Command::Embed { checkpoint, data, has_labels, out } => {
            let (model, _) = load_model(&checkpoint)?;
            let dataset = load_data(&data, None, has_labels)?;
            check_dim(&model, &dataset)?;
            let enc = encode_all(&model, dataset.features())?;
            let clusters = hard_assignments(&enc.y_probs);
            let mut text = String::new();
            for (i, &c) in clusters.iter().enumerate() {
                for v in enc.penultimate.row(i) {
                    text.push_str(&format!("{v},"));
                }
                let max = enc.y_probs.row(i)[c];
                text.push_str(&format!("{c},{max}\n"));
            }
            fs::write(&out, text)?;
            Ok(())
        }
        Command::Synth { k, dim, n_per_cluster, separation, std, seed, pixel, out } => {
            let spec = GmmSpec { k, dim, n_per_cluster, separation, cluster_std: std, seed };
            let mode = if pixel { DataMode::Pixel } else { DataMode::Feature };
            let ds = data_io::synth_gmm(&spec, mode)?;
            data_io::write_dataset_csv(&out, &ds)
        }
    }
}

fn train(config_path: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(seed) = seed_override()? {
        cfg.training.seed = seed;
    }
    let train_cfg = cfg.train_config()?;
    let dataset = cfg.dataset()?;
    let dir = cfg.output_dir();
    let mut trainer = Trainer::new(train_cfg, dataset.dim())?;
    fs::create_dir_all(&dir)?;
    let mut log = fs::File::create(dir.join(&cfg.output.metrics_log))?;
    trainer.fit(&dataset, Some(&dir), |m| {
        writeln!(log, "{m}")?;
        log.flush()?;
        println!("{m}");
        Ok(())
    })?;
    eprintln!("wrote {}", final_checkpoint_path(&dir).display());
    Ok(())
}

/// The model and the seed generation should use.
fn load_model(path: &Path) -> Result<(ModelState, u64)> {
    let ckpt = load_checkpoint(path)?;
    let seed = match seed_override()? {
        Some(s) => s,
        None => ckpt.meta.config.training.seed,
    };
    Ok((ckpt.model_state()?, seed))
}

fn load_data(path: &Path, labels: Option<&Path>, has_labels: bool) -> Result<Dataset> {
    if data_io::is_idx_images(path)? {
        data_io::load_idx(path, labels)
    } else {
        if labels.is_some() {
            return Err(Error::Invalid("--labels applies to IDX image files; use --has-labels for CSV".into()));
        }
        data_io::load_features_csv(path, has_labels)
    }
}

fn check_dim(model: &ModelState, dataset: &Dataset) -> Result<()> {
    if model.spec.input_dim != dataset.dim() {
        return Err(Error::Shape(format!(
            "model expects {} features, {} has {}",
            model.spec.input_dim,
            dataset.name,
            dataset.dim()
        )));
    }
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn square_side(n: usize) -> Option<usize> {
    let side = (n as f64).sqrt().round() as usize;
    (side * side == n).then_some(side)
}

/// `out` with its extension replaced by `-<suffix>`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}-{suffix}"))
}

/// Lays `rows × cols` square images out as one grid, row-major.
fn tile(samples: &Tensor, side: usize, rows: usize, cols: usize) -> Vec<f64> {
    let width = cols * side;
    let mut grid = vec![0.0; rows * side * width];
    for r in 0..rows {
        for c in 0..cols {
            let img = samples.row(r * cols + c);
            for y in 0..side {
                let dst = (r * side + y) * width + c * side;
                grid[dst..dst + side].copy_from_slice(&img[y * side..(y + 1) * side]);
            }
        }
    }
    grid
}
