use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::data::{FrequencySource, Ratio, DEFAULT_IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{NetworkConfig, OUTPUT_STRIDE};

/// Full run configuration, read from TOML. Unknown keys are rejected at
/// every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: NetworkConfig,
    pub train: TrainSection,
    pub losses: LossToggles,
    pub weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub augmentation: AugmentationConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root; manifest paths are relative to it.
    pub root: PathBuf,
    pub train_manifest: String,
    pub val_manifest: Option<String>,
    pub classes: usize,
    pub ignore_index: u16,
    pub labeled_ratio: Ratio,
    /// Seed of the labeled/unlabeled split; the run seed when absent.
    pub split_seed: Option<u64>,
    /// Existing split file to use instead of drawing one.
    pub split_file: Option<PathBuf>,
    /// Fully labeled source-domain manifest for domain adaptation.
    pub source_manifest: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_manifest: "train.txt".into(),
            val_manifest: Some("val.txt".into()),
            classes: 19,
            ignore_index: DEFAULT_IGNORE_INDEX,
            labeled_ratio: Ratio::new(1, 30).expect("non-zero denominator"),
            split_seed: None,
            split_file: None,
            source_manifest: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub total_iters: u64,
    pub lr0: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub labeled_per_step: usize,
    pub unlabeled_per_step: usize,
    /// `(height, width)` of training crops; multiples of 8.
    pub crop_size: [usize; 2],
    /// Strong views per unlabeled image.
    pub views: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub warmup_iters: u64,
    /// Exponent applied to teacher confidences in the pseudo loss.
    pub sharpen: f64,
    pub class_balancing: bool,
    pub frequency_source: FrequencySource,
    pub domain_adaptation: bool,
    pub precision: Precision,
    pub val_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            total_iters: 150_000,
            lr0: 2e-4,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            labeled_per_step: 5,
            unlabeled_per_step: 5,
            crop_size: [512, 512],
            views: 2,
            tau_start: 0.995,
            tau_end: 1.0,
            warmup_iters: 2000,
            sharpen: 6.0,
            class_balancing: true,
            frequency_source: FrequencySource::LabeledPlusPseudo,
            domain_adaptation: false,
            precision: Precision::F32,
            val_every: 1000,
        }
    }
}

/// Which loss terms run at all (ablations); weights scale those that do.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub sup: bool,
    pub pseudo: bool,
    pub ent: bool,
    pub contr: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            sup: true,
            pseudo: true,
            ent: true,
            contr: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveInputs {
    Labeled,
    Unlabeled,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Per-class bank capacity.
    pub bank_capacity: usize,
    /// Teacher confidence a feature must exceed to enter the bank.
    pub confidence_threshold: f32,
    /// Apply the correctness/confidence filter before ranking.
    pub use_fqf: bool,
    /// Rank and weight features with the attention modules; when off,
    /// ranking uses teacher confidence and all weights are one.
    pub use_attention: bool,
    pub inputs: ContrastiveInputs,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            bank_capacity: 256,
            confidence_threshold: 0.95,
            use_fqf: true,
            use_attention: true,
            inputs: ContrastiveInputs::Both,
        }
    }
}

/// Weak and strong policies. Keys given in the file override the
/// corresponding preset field by field.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AugmentationConfig {
    pub weak: AugmentationPolicy,
    pub strong: AugmentationPolicy,
}

impl<'de> Deserialize<'de> for AugmentationConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            weak: Option<toml::Value>,
            strong: Option<toml::Value>,
        }

        fn overlay<E: serde::de::Error>(
            preset: AugmentationPolicy,
            patch: Option<toml::Value>,
        ) -> std::result::Result<AugmentationPolicy, E> {
            let Some(patch) = patch else {
                return Ok(preset);
            };
            let mut base = toml::Value::try_from(&preset).map_err(E::custom)?;
            merge_toml(&mut base, &patch);
            base.try_into().map_err(E::custom)
        }

        let raw = Raw::deserialize(d)?;
        Ok(Self {
            weak: overlay::<D::Error>(AugmentationPolicy::weak(), raw.weak)?,
            strong: overlay::<D::Error>(AugmentationPolicy::strong(), raw.strong)?,
        })
    }
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            weak: AugmentationPolicy::weak(),
            strong: AugmentationPolicy::strong(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub log_file: String,
    pub save_best: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            log_file: "metrics.jsonl".into(),
            save_best: true,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_value(value: toml::Value) -> Result<Self> {
        let cfg: TrainConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `data.root` or `output.dir` is taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        if self.data.root.is_relative() {
            self.data.root = base.join(&self.data.root);
        }
        if self.output.dir.is_relative() {
            self.output.dir = base.join(&self.output.dir);
        }
        if let Some(split) = &self.data.split_file {
            if split.is_relative() {
                self.data.split_file = Some(base.join(split));
            }
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let fail = |msg: String| Err(Error::Config(msg));
        if self.data.classes == 0 {
            return fail("data.classes must be positive".into());
        }
        let r = self.data.labeled_ratio.as_f64();
        if !(r > 0.0 && r <= 1.0) {
            return fail(format!(
                "data.labeled_ratio {} must be in (0, 1]",
                self.data.labeled_ratio
            ));
        }
        if t.total_iters > 0 && t.warmup_iters >= t.total_iters {
            return fail(format!(
                "train.warmup_iters ({}) must be below train.total_iters ({})",
                t.warmup_iters, t.total_iters
            ));
        }
        if t.views == 0 {
            return fail("train.views must be at least 1".into());
        }
        if t.labeled_per_step == 0 {
            return fail("train.labeled_per_step must be at least 1".into());
        }
        for (name, v) in [("lr0", t.lr0), ("poly_power", t.poly_power), ("sharpen", t.sharpen)] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("train.{name} = {v} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&t.momentum) || t.weight_decay < 0.0 {
            return fail("train.momentum must be in [0, 1) and weight_decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&t.tau_start) || !(0.0..=1.0).contains(&t.tau_end) {
            return fail("train.tau_start and tau_end must lie in [0, 1]".into());
        }
        if t.crop_size.iter().any(|&d| d == 0 || d % OUTPUT_STRIDE != 0) {
            return fail(format!(
                "train.crop_size {:?} must be positive multiples of {OUTPUT_STRIDE}",
                t.crop_size
            ));
        }
        if t.val_every == 0 {
            return fail("train.val_every must be positive".into());
        }
        if t.domain_adaptation && self.data.source_manifest.is_none() {
            return fail("train.domain_adaptation needs data.source_manifest".into());
        }
        if self.contrastive.bank_capacity == 0 {
            return fail("contrastive.bank_capacity must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.contrastive.confidence_threshold) {
            return fail("contrastive.confidence_threshold must be in [0, 1]".into());
        }
        self.weights.validate()?;
        self.augmentation.weak.validate()?;
        self.augmentation.strong.validate()?;
        Ok(())
    }
}

/// Recursively overlays `patch` onto `base`; tables merge, other values
/// replace.
pub fn merge_toml(base: &mut toml::Value, patch: &toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(existing) => merge_toml(existing, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}
