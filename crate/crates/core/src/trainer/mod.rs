//! Mean-teacher training: batch composition, pseudo-labels, augmentation
//! anchoring, warmup gating, schedules, bank updates and EMA.

mod ablation;
mod batch;
mod config;
mod pseudo;
mod schedule;
mod step;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationGrid, AblationResult, AblationRun};
pub use batch::{BatchComposer, Domain, EpochSampler, LabeledDraw};
pub use config::{
    merge_toml, AugmentationConfig, ContrastiveConfig, ContrastiveInputs, DataConfig, LossToggles, OutputConfig,
    Precision, TrainConfig, TrainSection,
};
pub use pseudo::{generate_pseudo_labels, PseudoLabelPack};
pub use schedule::{poly_lr, tau_schedule};

use crate::bank::MemoryBank;
use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::data::{load_dataset, make_split, ClassFrequencyTable, Dataset, RgbImage, Sample, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::nn::{Network, Sgd};

/// One line of the metrics log per training step. `c_*` are the weighted
/// contributions of each term to `total`; `lambda_*` the weights in effect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: u64,
    pub l_sup: f64,
    pub l_pseudo: f64,
    pub l_ent: f64,
    pub l_contr: f64,
    pub total: f64,
    pub lr: f64,
    pub tau: f64,
    pub lambda_sup: f64,
    pub lambda_pseudo: f64,
    pub lambda_ent: f64,
    pub lambda_contr: f64,
    pub c_sup: f64,
    pub c_pseudo: f64,
    pub c_ent: f64,
    pub c_contr: f64,
    pub bank_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub iter: u64,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

/// Everything mutated by a training step.
pub struct TrainState {
    pub student: Network,
    pub teacher: Network,
    pub optimizer: Sgd,
    pub bank: MemoryBank,
    pub frequencies: ClassFrequencyTable,
    pub iter: u64,
    pub rng: ChaCha8Rng,
}

/// Datasets of one run. `split` partitions `train` by sample id.
pub struct TrainData {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub split: SplitSpec,
    pub source: Option<Dataset>,
}

impl TrainData {
    /// Loads the datasets named in `cfg` and reads or draws the split.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let d = &cfg.data;
        let train = load_dataset(&d.root, Path::new(&d.train_manifest), d.classes, d.ignore_index)?;
        let val = d
            .val_manifest
            .as_ref()
            .map(|m| load_dataset(&d.root, Path::new(m), d.classes, d.ignore_index))
            .transpose()?;
        let source = d
            .source_manifest
            .as_ref()
            .filter(|_| cfg.train.domain_adaptation)
            .map(|m| load_dataset(&d.root, Path::new(m), d.classes, d.ignore_index))
            .transpose()?;
        let split = match &d.split_file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
                SplitSpec::from_text(&text)?
            }
            None => make_split(&train, d.labeled_ratio, d.split_seed.unwrap_or(cfg.seed))?,
        };
        Ok(Self {
            train,
            val,
            split,
            source,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iters: u64,
    pub final_miou: Option<f64>,
    pub best_miou: Option<f64>,
    pub best_iter: Option<u64>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub log: PathBuf,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub state: TrainState,
    pub data: TrainData,
    labeled: Vec<usize>,
    composer: BatchComposer,
    stop: Option<Arc<AtomicBool>>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: TrainData) -> Result<Self> {
        config.validate()?;
        let classes = config.data.classes;
        for ds in std::iter::once(&data.train).chain(&data.val).chain(&data.source) {
            if ds.class_count != classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, config says {classes}",
                    ds.class_count
                )));
            }
        }
        let resolve = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    data.train
                        .position(id)
                        .ok_or_else(|| Error::Config(format!("split id `{id}` is not in the training set")))
                })
                .collect()
        };
        let labeled = resolve(&data.split.labeled_ids)?;
        let unlabeled = resolve(&data.split.unlabeled_ids)?;
        for &i in &labeled {
            let s = &data.train.samples[i];
            if s.label.is_none() {
                return Err(Error::Config(format!("labeled sample `{}` has no label file", s.id)));
            }
        }
        let source = match (&data.source, config.train.domain_adaptation) {
            (Some(src), true) => {
                if let Some(s) = src.samples.iter().find(|s| s.label.is_none()) {
                    return Err(Error::Config(format!("source sample `{}` has no label file", s.id)));
                }
                Some((0..src.len()).collect())
            }
            _ => None,
        };
        let composer = BatchComposer::new(labeled.clone(), unlabeled, source)?;

        let dtype = config.train.precision.dtype();
        let student = Network::new(&config.model, classes, config.seed, dtype)?;
        let teacher = student.duplicate()?;
        let mut frequencies =
            ClassFrequencyTable::new(classes, config.data.ignore_index, config.train.frequency_source);
        for &i in &labeled {
            let label = data.train.samples[i].label.as_ref().expect("checked above");
            frequencies.update(label.data());
        }
        let state = TrainState {
            student,
            teacher,
            optimizer: Sgd::new(config.train.momentum, config.train.weight_decay),
            bank: MemoryBank::new(classes, config.contrastive.bank_capacity, config.model.head_dim),
            frequencies,
            iter: 0,
            rng: {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(1);
                rng
            },
        };
        Ok(Self {
            config,
            state,
            data,
            labeled,
            composer,
            stop: None,
        })
    }

    /// When `flag` becomes true, [`Trainer::run`] stops after the current
    /// step and still writes the final checkpoint.
    pub fn set_stop_flag(&mut self, flag: Arc<AtomicBool>) {
        self.stop = Some(flag);
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    /// Draws a batch and runs one step.
    pub fn step(&mut self) -> Result<LossRecord> {
        let t = &self.config.train;
        let (labeled, unlabeled) = self
            .composer
            .compose(&mut self.state.rng, t.labeled_per_step, t.unlabeled_per_step);
        self.train_step(&labeled, &unlabeled)
    }

    /// Runs one step on explicit draws (indices into the training set, or
    /// the source set for source-domain draws).
    pub fn train_step(&mut self, labeled: &[LabeledDraw], unlabeled: &[usize]) -> Result<LossRecord> {
        let samples: Vec<(&Sample, Domain)> = labeled
            .iter()
            .map(|d| {
                let ds = match d.domain {
                    Domain::Target => &self.data.train,
                    Domain::Source => self
                        .data
                        .source
                        .as_ref()
                        .ok_or_else(|| Error::Config("source draw without a source set".into()))?,
                };
                ds.samples
                    .get(d.index)
                    .map(|s| (s, d.domain))
                    .ok_or_else(|| Error::Lookup(format!("no sample at index {}", d.index)))
            })
            .collect::<Result<_>>()?;
        let images: Vec<&RgbImage> = unlabeled
            .iter()
            .map(|&i| {
                self.data
                    .train
                    .samples
                    .get(i)
                    .map(|s| &s.image)
                    .ok_or_else(|| Error::Lookup(format!("no sample at index {i}")))
            })
            .collect::<Result<_>>()?;
        step::train_step(&mut self.state, &self.config, &samples, &images, self.labeled.len())
    }

    /// Student mIoU on the validation set, if there is one.
    pub fn validate(&self) -> Result<Option<EvalReport>> {
        match &self.data.val {
            Some(val) => Ok(Some(
                evaluate(&self.state.student, self.state.student.dtype(), val, 16)?.0,
            )),
            None => Ok(None),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: self.config.to_toml_string()?,
            iter: self.state.iter,
            student: self.state.student.params.named_tensors(),
            teacher: self.state.teacher.params.named_tensors(),
            optimizer: OptimizerState {
                momentum: self.state.optimizer.momentum,
                weight_decay: self.state.optimizer.weight_decay,
                velocity: self.state.optimizer.velocity().to_vec(),
            },
            bank: self.state.bank.clone(),
            frequencies: self.state.frequencies.clone(),
        })
    }

    /// Restores networks, optimiser, bank, frequencies and iteration.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        self.state.student.params.load_named(&ck.student)?;
        self.state.teacher.params.load_named(&ck.teacher)?;
        self.state.optimizer = Sgd::new(ck.optimizer.momentum, ck.optimizer.weight_decay);
        self.state.optimizer.set_velocity(ck.optimizer.velocity.clone());
        self.state.bank = ck.bank.clone();
        self.state.frequencies = ck.frequencies.clone();
        self.state.iter = ck.iter;
        Ok(())
    }

    /// Trains to `total_iters`, writing the JSON-lines log and checkpoints
    /// into the output directory.
    pub fn run(&mut self) -> Result<RunSummary> {
        let out = self.config.output.dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::load(&out, e))?;
        fs::write(out.join("split.txt"), self.data.split.to_text()).map_err(|e| Error::load(&out, e))?;
        let log_path = out.join(&self.config.output.log_file);
        let file = File::create(&log_path).map_err(|e| Error::load(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let summary = self.run_with_log(&mut log, &out)?;
        log.flush()?;
        Ok(RunSummary {
            log: log_path,
            ..summary
        })
    }

    /// As [`Trainer::run`], with the metrics log going to `log`.
    pub fn run_with_log(&mut self, log: &mut dyn Write, out: &Path) -> Result<RunSummary> {
        let total = self.config.train.total_iters;
        let val_every = self.config.train.val_every;
        let final_path = out.join("final.ckpt");
        let best_path = out.join("best.ckpt");
        let mut best: Option<(f64, u64)> = None;
        let mut last_val: Option<(u64, f64)> = None;
        while self.state.iter < total {
            if self.stop.as_ref().is_some_and(|f| f.load(Ordering::Relaxed)) {
                log::warn!("interrupted at iteration {}", self.state.iter);
                break;
            }
            let record = self.step()?;
            writeln!(
                log,
                "{}",
                serde_json::to_string(&record).map_err(|e| Error::Config(e.to_string()))?
            )?;
            let done = self.state.iter;
            if done.is_multiple_of(val_every) || done == total {
                if let Some(report) = self.validate()? {
                    let rec = ValRecord {
                        iter: done,
                        miou: report.miou,
                        per_class_iou: report.per_class_iou,
                    };
                    writeln!(
                        log,
                        "{}",
                        serde_json::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?
                    )?;
                    log::info!("iter {done}: val mIoU {:.4}", rec.miou);
                    last_val = Some((done, rec.miou));
                    if best.is_none_or(|(m, _)| rec.miou > m) {
                        best = Some((rec.miou, done));
                        if self.config.output.save_best {
                            self.checkpoint()?.save(&best_path)?;
                        }
                    }
                }
            }
        }
        self.checkpoint()?.save(&final_path)?;
        Ok(RunSummary {
            iters: self.state.iter,
            final_miou: last_val.filter(|(i, _)| *i == self.state.iter).map(|(_, m)| m),
            best_miou: best.map(|b| b.0),
            best_iter: best.map(|b| b.1),
            final_checkpoint: final_path,
            best_checkpoint: (best.is_some() && self.config.output.save_best).then_some(best_path),
            log: PathBuf::new(),
        })
    }
}

/// Rebuilds the student network stored in a checkpoint.
pub fn load_student(ck: &Checkpoint) -> Result<(TrainConfig, Network)> {
    let cfg = TrainConfig::from_toml_str(&ck.config)?;
    let net = Network::new(&cfg.model, cfg.data.classes, 0, cfg.train.precision.dtype())?;
    net.params.load_named(&ck.student)?;
    Ok((cfg, net))
}
