use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu, sigmoid, softmax_rows, BatchNorm, Conv2d, Init, Linear, Mode};
use super::params::ParamStore;
use crate::data::RgbImage;
use crate::error::{Error, Result};

/// Output stride of every backbone behind [`Network`].
pub const OUTPUT_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Channel width of the reference encoder; also the feature size D'.
    pub width: usize,
    /// Output size of the projection and prediction heads.
    pub head_dim: usize,
    /// Hidden size of the class-specific attention modules.
    pub attention_hidden: usize,
    pub in_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width: 64,
            head_dim: 256,
            attention_hidden: 256,
            in_channels: 3,
        }
    }
}

/// A batch of equally sized images in channel-major layout `(3, B, H, W)`,
/// normalised to roughly zero mean.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub tensor: Tensor,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

impl ImageBatch {
    pub fn from_images(images: &[&RgbImage], dtype: DType, device: &Device) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (height, width) = first.dims();
        if let Some(bad) = images.iter().find(|i| i.dims() != (height, width)) {
            return Err(Error::Shape(format!(
                "batch mixes image sizes {:?} and {:?}",
                first.dims(),
                bad.dims()
            )));
        }
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * images.len() * plane);
        for c in 0..3 {
            for img in images {
                data.extend(img.plane(c).iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD));
            }
        }
        let tensor = Tensor::from_vec(data, (3, images.len(), height, width), device)?.to_dtype(dtype)?;
        Ok(Self {
            tensor,
            batch: images.len(),
            height,
            width,
        })
    }
}

/// Feature vectors on the output grid; `rows` is `(B * h * w, D)` in
/// batch-major, row-major order.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub rows: Tensor,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

/// Per-pixel class distributions on the output grid; `probs` is
/// `(B * h * w, C)` and every row sums to one.
#[derive(Clone, Debug)]
pub struct ClassDistMap {
    pub probs: Tensor,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl ClassDistMap {
    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.probs.dim(1)?)
    }

    /// Argmax (lowest index on ties) and the maximum probability per pixel.
    pub fn argmax_confidence(&self) -> Result<(Vec<u16>, Vec<f32>)> {
        let rows: Vec<Vec<f32>> = self.probs.to_dtype(DType::F32)?.to_vec2()?;
        Ok(rows
            .iter()
            .map(|r| {
                let mut best = 0;
                for (c, &p) in r.iter().enumerate() {
                    if p > r[best] {
                        best = c;
                    }
                }
                (best as u16, r[best])
            })
            .unzip())
    }
}

/// Anything that maps images to per-pixel class distributions.
pub trait Segmenter {
    fn segment(&self, images: &ImageBatch, mode: Mode) -> Result<ClassDistMap>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionRole {
    Projection,
    Prediction,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let (c, b, h, w) = y.dims4()?;
        let y = self.bn.forward(&y.reshape((c, b * h * w))?, mode)?.relu()?;
        Ok(y.reshape((c, b, h, w))?)
    }
}

/// Four conv blocks (three of stride 2, one of stride 1), output stride 8.
#[derive(Clone, Debug)]
pub struct Backbone {
    blocks: Vec<ConvBlock>,
}

impl Backbone {
    fn new<R: rand::Rng>(init: &mut Init<R>, in_ch: usize, width: usize) -> Result<Self> {
        let strides = [2, 2, 2, 1];
        let mut blocks = Vec::new();
        let mut c = in_ch;
        for (i, &s) in strides.iter().enumerate() {
            let name = format!("backbone.block{i}");
            blocks.push(ConvBlock {
                conv: Conv2d::new(init, &format!("{name}.conv"), c, width, 3, s)?,
                bn: BatchNorm::new(init, &format!("{name}.bn"), width, 0)?,
            });
            c = width;
        }
        Ok(Self { blocks })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y, mode)?;
        }
        Ok(y)
    }
}

/// Linear → BatchNorm → ReLU → Linear.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
}

impl MlpHead {
    fn new<R: rand::Rng>(init: &mut Init<R>, name: &str, inputs: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), inputs, dim)?,
            bn: BatchNorm::new(init, &format!("{name}.bn"), dim, 1)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), dim, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.dim(1)? != self.fc1.in_features() {
            return Err(Error::Shape(format!(
                "head expects {}-dim inputs, got {}",
                self.fc1.in_features(),
                x.dim(1)?
            )));
        }
        let h = self.bn.forward(&self.fc1.forward(x)?, mode)?.relu()?;
        self.fc2.forward(&h)
    }
}

/// Linear → BatchNorm → LeakyReLU → Linear(1) → Sigmoid.
#[derive(Clone, Debug)]
pub struct AttentionModule {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
}

impl AttentionModule {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.dim(1)? != self.fc1.in_features() {
            return Err(Error::Shape(format!(
                "attention expects {}-dim inputs, got {}",
                self.fc1.in_features(),
                x.dim(1)?
            )));
        }
        let h = leaky_relu(&self.bn.forward(&self.fc1.forward(x)?, mode)?, 0.01)?;
        let logit = self.fc2.forward(&h)?;
        Ok(sigmoid(&logit)?.flatten_all()?)
    }
}

/// Two modules per class, one per role.
#[derive(Clone, Debug)]
pub struct AttentionModuleSet {
    modules: Vec<[AttentionModule; 2]>,
}

impl AttentionModuleSet {
    pub fn classes(&self) -> usize {
        self.modules.len()
    }

    pub fn module(&self, class: usize, role: AttentionRole) -> Result<&AttentionModule> {
        let pair = self
            .modules
            .get(class)
            .ok_or_else(|| Error::Lookup(format!("no attention module for class {class}")))?;
        Ok(match role {
            AttentionRole::Projection => &pair[0],
            AttentionRole::Prediction => &pair[1],
        })
    }
}

/// Segmentation network plus projection/prediction heads and
/// class-specific attention modules, all registered in one [`ParamStore`].
#[derive(Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub classes: usize,
    pub params: ParamStore,
    backbone: Backbone,
    classifier: Linear,
    projection: MlpHead,
    prediction: MlpHead,
    attention: AttentionModuleSet,
}

impl Network {
    pub fn new(config: &NetworkConfig, classes: usize, seed: u64, dtype: DType) -> Result<Self> {
        if classes == 0 || config.width == 0 || config.head_dim == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
            dtype,
            device: &device,
        };
        let backbone = Backbone::new(&mut init, config.in_channels, config.width)?;
        let classifier = Linear::new(&mut init, "classifier", config.width, classes)?;
        let projection = MlpHead::new(&mut init, "projection", config.width, config.head_dim)?;
        let prediction = MlpHead::new(&mut init, "prediction", config.head_dim, config.head_dim)?;
        let mut modules = Vec::with_capacity(classes);
        for c in 0..classes {
            let mut make = |role: &str| -> Result<AttentionModule> {
                let name = format!("attention.c{c}.{role}");
                Ok(AttentionModule {
                    fc1: Linear::new(
                        &mut init,
                        &format!("{name}.fc1"),
                        config.head_dim,
                        config.attention_hidden,
                    )?,
                    bn: BatchNorm::new(&mut init, &format!("{name}.bn"), config.attention_hidden, 1)?,
                    fc2: Linear::new(&mut init, &format!("{name}.fc2"), config.attention_hidden, 1)?,
                })
            };
            modules.push([make("projection")?, make("prediction")?]);
        }
        Ok(Self {
            config: config.clone(),
            classes,
            params,
            backbone,
            classifier,
            projection,
            prediction,
            attention: AttentionModuleSet { modules },
        })
    }

    /// A structurally identical network with copied values.
    pub fn duplicate(&self) -> Result<Self> {
        let copy = Network::new(&self.config, self.classes, 0, self.params.dtype())?;
        copy.params.copy_from(&self.params)?;
        Ok(copy)
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn projection_head(&self) -> &MlpHead {
        &self.projection
    }

    pub fn prediction_head(&self) -> &MlpHead {
        &self.prediction
    }

    pub fn attention(&self) -> &AttentionModuleSet {
        &self.attention
    }

    /// Backbone features at stride 8.
    pub fn forward_features(&self, images: &ImageBatch, mode: Mode) -> Result<FeatureMap> {
        if !images.height.is_multiple_of(OUTPUT_STRIDE) || !images.width.is_multiple_of(OUTPUT_STRIDE) {
            return Err(Error::Shape(format!(
                "input {}x{} is not divisible by {OUTPUT_STRIDE}",
                images.height, images.width
            )));
        }
        let y = self.backbone.forward(&images.tensor, mode)?;
        let (c, b, h, w) = y.dims4()?;
        let rows = y.reshape((c, b * h * w))?.t()?.contiguous()?;
        Ok(FeatureMap {
            rows,
            batch: b,
            height: h,
            width: w,
        })
    }

    pub fn classify(&self, features: &FeatureMap) -> Result<ClassDistMap> {
        let logits = self.classifier.forward(&features.rows)?;
        Ok(ClassDistMap {
            probs: softmax_rows(&logits)?,
            batch: features.batch,
            height: features.height,
            width: features.width,
        })
    }

    pub fn forward_segmentation(&self, images: &ImageBatch, mode: Mode) -> Result<ClassDistMap> {
        self.classify(&self.forward_features(images, mode)?)
    }

    pub fn project(&self, v: &Tensor, mode: Mode) -> Result<Tensor> {
        self.projection.forward(v, mode)
    }

    pub fn predict(&self, z: &Tensor, mode: Mode) -> Result<Tensor> {
        self.prediction.forward(z, mode)
    }

    /// Scores in (0, 1) for every row of `x` from the module of `(class, role)`.
    pub fn attention_score(&self, class: usize, role: AttentionRole, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.attention.module(class, role)?.forward(x, mode)
    }
}

impl Segmenter for Network {
    fn segment(&self, images: &ImageBatch, mode: Mode) -> Result<ClassDistMap> {
        self.forward_segmentation(images, mode)
    }
}
