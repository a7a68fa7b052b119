use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use semiseg_core::checkpoint::Checkpoint;
use semiseg_core::data::synthetic::{self, ShapesConfig};
use semiseg_core::data::{load_dataset, write_dataset};
use semiseg_core::eval::evaluate;
use semiseg_core::trainer::{load_student, run_ablation, AblationGrid, TrainConfig, TrainData, Trainer};

#[derive(Parser)]
#[command(name = "semiseg", version, about = "Semi-supervised semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student/teacher pair from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Single-threaded kernels, so repeated runs are bit-identical.
        #[arg(long)]
        deterministic: bool,
    },
    /// Score a checkpoint's student on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Manifest inside the dataset directory; defaults to `val.txt` when
        /// present, otherwise `manifest.txt`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train every (run, seed) cell of an ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
    /// Render a synthetic shapes dataset with train/val manifests and a
    /// starter config.
    MakeToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 250)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of images held out for validation.
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let deterministic = matches!(
        cli.command,
        Command::Train {
            deterministic: true,
            ..
        } | Command::Ablate {
            deterministic: true,
            ..
        }
    );
    if deterministic {
        // Must happen before any kernel spins up its thread pool.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match cli.command {
        Command::Train { config, seed, .. } => train(&config, seed),
        Command::Eval {
            checkpoint,
            dataset,
            manifest,
        } => eval(&checkpoint, &dataset, manifest.as_deref()),
        Command::Ablate { config, grid, .. } => ablate(&config, &grid),
        Command::MakeToyData {
            out,
            classes,
            n,
            seed,
            val,
            size,
        } => make_toy_data(&out, classes, n, seed, val, size),
    }
}

fn train(config: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = TrainConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = TrainData::load(&cfg)?;
    let mut trainer = Trainer::new(cfg, data)?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed)).context("installing the interrupt handler")?;
    trainer.set_stop_flag(stop);
    let summary = trainer.run()?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn eval(checkpoint: &Path, dataset: &Path, manifest: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let (cfg, student) = load_student(&ck)?;
    let manifest = match manifest {
        Some(m) => m.to_path_buf(),
        None if dataset.join("val.txt").exists() => PathBuf::from("val.txt"),
        None => PathBuf::from("manifest.txt"),
    };
    let ds = load_dataset(dataset, &manifest, cfg.data.classes, cfg.data.ignore_index)?;
    let (report, _) = evaluate(&student, student.dtype(), &ds, 16)?;
    let out = serde_json::json!({
        "miou": report.miou,
        "per_class_iou": report.per_class_iou,
        "n_images": report.n_images,
        "checkpoint": checkpoint.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn ablate(config: &Path, grid: &Path) -> Result<()> {
    let base_text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let base: toml::Value = toml::from_str(&base_text).with_context(|| format!("parsing {}", config.display()))?;
    let grid_text = fs::read_to_string(grid).with_context(|| format!("reading {}", grid.display()))?;
    let grid = AblationGrid::from_toml_str(&grid_text)?;
    let base_dir = config.parent().unwrap_or(Path::new("."));
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let results = run_ablation(&base, base_dir, &grid, &mut lock)?;
    lock.flush()?;
    log::info!("finished {} ablation runs", results.len());
    Ok(())
}

fn make_toy_data(out: &Path, classes: usize, n: usize, seed: u64, val: usize, size: usize) -> Result<()> {
    if val >= n {
        bail!("--val ({val}) must be smaller than --n ({n})");
    }
    let shapes = ShapesConfig {
        size,
        classes,
        ..Default::default()
    };
    let ds = synthetic::generate(&shapes, n, seed, "img")?;
    let manifest = write_dataset(&ds, out, "manifest.txt")?;
    let text = fs::read_to_string(&manifest)?;
    let lines: Vec<&str> = text.lines().collect();
    let (train, held_out) = lines.split_at(n - val);
    fs::write(out.join("train.txt"), train.join("\n") + "\n")?;
    fs::write(out.join("val.txt"), held_out.join("\n") + "\n")?;
    let mut cfg = TrainConfig::default();
    cfg.data.root = PathBuf::from(".");
    cfg.data.classes = classes;
    cfg.data.labeled_ratio = semiseg_core::data::Ratio::new(1, 20)?;
    cfg.model.width = 16;
    cfg.train.total_iters = 3000;
    cfg.train.warmup_iters = 200;
    cfg.train.crop_size = [size, size];
    cfg.train.labeled_per_step = 2;
    cfg.train.unlabeled_per_step = 2;
    cfg.train.views = 1;
    cfg.train.lr0 = 0.01;
    // Median-frequency weights feed back through the pseudo-labels on
    // a dataset this small and skew the teacher towards foreground.
    cfg.train.class_balancing = false;
    cfg.train.val_every = 500;
    cfg.output.dir = PathBuf::from("runs/toy");
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "out": out.display().to_string(),
            "train": train.len(),
            "val": held_out.len(),
            "classes": classes,
        }))?
    );
    Ok(())
}
