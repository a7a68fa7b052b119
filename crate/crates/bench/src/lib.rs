//! Shared fixtures for the benchmarks.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semiseg_core::bank::FeatureRecord;
use semiseg_core::data::synthetic::{self, ShapesConfig};
use semiseg_core::data::{split_ids, Ratio};
use semiseg_core::losses::ContrastGroup;
use semiseg_core::trainer::{TrainConfig, TrainData, Trainer};

pub const DIM: usize = 256;

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f32> {
    (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `classes` groups of `n` predictions against `m` bank targets.
pub fn contrast_groups(classes: usize, n: usize, m: usize, seed: u64) -> Vec<ContrastGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..classes)
        .map(|class| ContrastGroup {
            class,
            predictions: Tensor::from_vec(random_rows(&mut rng, n, DIM), (n, DIM), &Device::Cpu).unwrap(),
            targets: Tensor::from_vec(random_rows(&mut rng, m, DIM), (m, DIM), &Device::Cpu).unwrap(),
        })
        .collect()
}

pub fn records(n: usize, class: u16, seed: u64) -> Vec<FeatureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| FeatureRecord {
            vector: random_rows(&mut rng, 1, DIM),
            class_id: class,
            confidence: rng.random_range(0.9..1.0),
            rank_score: rng.random_range(0.0..1.0),
            iteration: i as u64,
        })
        .collect()
}

/// The toy acceptance set-up: 3 classes, 64×64 images, 10 labeled of 200.
pub fn toy_trainer(contrastive: bool) -> Trainer {
    let shapes = ShapesConfig::default();
    let train = synthetic::generate(&shapes, 200, 1, "t").unwrap();
    let ids: Vec<&str> = train.ids().collect();
    let split = split_ids(&ids, Ratio::new(1, 20).unwrap(), 0).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.data.classes = 3;
    cfg.model.width = 16;
    cfg.train.total_iters = 3000;
    cfg.train.warmup_iters = 0;
    cfg.train.crop_size = [64, 64];
    cfg.train.labeled_per_step = 2;
    cfg.train.unlabeled_per_step = 2;
    cfg.train.views = 1;
    cfg.train.precision = semiseg_core::trainer::Precision::F32;
    cfg.losses.contr = contrastive;
    cfg.contrastive.use_fqf = false;
    Trainer::new(
        cfg,
        TrainData {
            train,
            val: None,
            split,
            source: None,
        },
    )
    .unwrap()
}
