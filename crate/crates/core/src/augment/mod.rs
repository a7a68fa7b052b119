//! Weak and strong stochastic augmentation with geometry replay, so labels
//! and pseudo-labels follow their images exactly.

mod geometry;
mod photometric;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use geometry::{paste, paste_image, GeomRecord};
pub use photometric::{blur_kernel_size, color_jitter, gaussian_blur, ColorJitter};

use crate::data::{Grid, LabelMap, RgbImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub flip_p: f64,
    pub resize_p: f64,
    pub jitter_p: f64,
    pub blur_p: f64,
    pub classmix_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub resize_range: [f64; 2],
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            flip_p: 0.0,
            resize_p: 0.0,
            jitter_p: 0.0,
            blur_p: 0.0,
            classmix_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            resize_range: [0.75, 1.75],
            blur_sigma: [0.1, 2.0],
        }
    }

    /// Labeled-image set-up.
    pub fn weak() -> Self {
        Self {
            flip_p: 0.5,
            resize_p: 0.5,
            jitter_p: 0.2,
            blur_p: 0.0,
            classmix_p: 0.2,
            brightness: 0.15,
            contrast: 0.15,
            saturation: 0.075,
            hue: 0.05,
            ..Self::identity()
        }
    }

    /// Unlabeled-image set-up.
    pub fn strong() -> Self {
        Self {
            flip_p: 0.5,
            resize_p: 0.8,
            jitter_p: 0.8,
            blur_p: 0.2,
            classmix_p: 0.8,
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.15,
            hue: 0.1,
            ..Self::identity()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("resize_p", self.resize_p),
            ("jitter_p", self.jitter_p),
            ("blur_p", self.blur_p),
            ("classmix_p", self.classmix_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} intensity {v} must be >= 0")));
            }
        }
        let [lo, hi] = self.resize_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::Config(format!("bad resize_range [{lo}, {hi}]")));
        }
        let [slo, shi] = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::Config(format!("bad blur_sigma [{slo}, {shi}]")));
        }
        Ok(())
    }
}

/// A concrete draw from an [`AugmentationPolicy`].
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub geometry: GeomRecord,
    pub jitter: Option<ColorJitter>,
    pub blur_sigma: Option<f32>,
    /// Whether ClassMix fired; the pipeline supplies the partner image.
    pub classmix: bool,
}

impl Transform {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            geometry: GeomRecord::identity(height, width),
            jitter: None,
            blur_sigma: None,
            classmix: false,
        }
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, max: f64) -> f32 {
    if max > 0.0 {
        rng.random_range(-max..=max) as f32
    } else {
        0.0
    }
}

/// Draws a transform for an input of `input_size` producing `output_size`
/// (both `(height, width)`). Every sub-transform fires independently.
pub fn sample_transform<R: Rng + ?Sized>(
    policy: &AugmentationPolicy,
    rng: &mut R,
    input_size: (usize, usize),
    output_size: (usize, usize),
) -> Transform {
    // Every random draw happens unconditionally so the stream consumed per
    // transform has a fixed length.
    let flipped = rng.random::<f64>() < policy.flip_p;
    let resize = rng.random::<f64>() < policy.resize_p;
    let scale_draw = rng.random_range(policy.resize_range[0]..=policy.resize_range[1]);
    let scale = if resize { scale_draw } else { 1.0 };
    let (rh, rw) = geometry::resized_dims(input_size, scale);
    let (oh, ow) = output_size;
    let offset = |rng: &mut R, resized: usize, out: usize| -> i64 {
        let slack = resized as i64 - out as i64;
        let (lo, hi) = if slack >= 0 { (0, slack) } else { (slack, 0) };
        rng.random_range(lo..=hi)
    };
    let crop_offset = (offset(rng, rh, oh), offset(rng, rw, ow));

    let jitter_on = rng.random::<f64>() < policy.jitter_p;
    let jitter = ColorJitter {
        brightness: symmetric(rng, policy.brightness),
        contrast: symmetric(rng, policy.contrast),
        saturation: symmetric(rng, policy.saturation),
        hue: symmetric(rng, policy.hue),
    };
    let blur_on = rng.random::<f64>() < policy.blur_p;
    let sigma = rng.random_range(policy.blur_sigma[0]..=policy.blur_sigma[1]) as f32;
    let classmix = rng.random::<f64>() < policy.classmix_p;

    Transform {
        geometry: GeomRecord {
            flipped,
            scale,
            crop_offset,
            input_size,
            output_size,
            mix_mask: None,
        },
        jitter: jitter_on.then_some(jitter),
        blur_sigma: blur_on.then_some(sigma),
        classmix,
    }
}

/// Applies the geometric part to image and label (nearest-neighbour for
/// labels, padding with `ignore_index`) and the photometric part to the
/// image only.
pub fn apply(
    transform: &Transform,
    image: &RgbImage,
    label: Option<&LabelMap>,
    ignore_index: u16,
) -> Result<(RgbImage, Option<LabelMap>, GeomRecord)> {
    let rec = &transform.geometry;
    if image.dims() != rec.input_size {
        return Err(Error::Validation(format!(
            "transform expects input {:?}, image is {:?}",
            rec.input_size,
            image.dims()
        )));
    }
    if let Some(l) = label {
        if l.dims() != image.dims() {
            return Err(Error::Validation(format!(
                "label {:?} does not match image {:?}",
                l.dims(),
                image.dims()
            )));
        }
    }
    let mut out = rec.warp_image(image);
    if let Some(j) = &transform.jitter {
        out = color_jitter(&out, j);
    }
    if let Some(sigma) = transform.blur_sigma {
        out = gaussian_blur(&out, sigma);
    }
    let label = label.map(|l| rec.warp_grid(l, ignore_index));
    Ok((out, label, rec.clone()))
}

/// ClassMix: pastes the pixels of half (rounded up) of the classes present
/// in `src_lab` onto `dst`.
pub fn classmix<R: Rng + ?Sized>(
    src_img: &RgbImage,
    src_lab: &LabelMap,
    dst_img: &RgbImage,
    dst_lab: &LabelMap,
    rng: &mut R,
    ignore_index: u16,
) -> Result<(RgbImage, LabelMap, Grid<bool>)> {
    let dims = dst_img.dims();
    if src_img.dims() != dims || src_lab.dims() != dims || dst_lab.dims() != dims {
        return Err(Error::Validation("classmix inputs must share one shape".into()));
    }
    let mask = classmix_mask(src_lab, rng, ignore_index);
    let img = paste_image(&mask, src_img, dst_img);
    let lab = paste(&mask, src_lab, dst_lab);
    Ok((img, lab, mask))
}

/// Mask of the pixels belonging to `ceil(n/2)` classes drawn uniformly
/// without replacement from the `n` non-ignored classes of `labels`.
pub fn classmix_mask<R: Rng + ?Sized>(labels: &LabelMap, rng: &mut R, ignore_index: u16) -> Grid<bool> {
    let mut present: Vec<u16> = labels.data().iter().copied().filter(|&v| v != ignore_index).collect();
    present.sort_unstable();
    present.dedup();
    if present.is_empty() {
        return Grid::filled(labels.width(), labels.height(), false);
    }
    let take = present.len().div_ceil(2);
    let chosen: Vec<u16> = index::sample(rng, present.len(), take)
        .into_iter()
        .map(|i| present[i])
        .collect();
    labels.map(|v| chosen.contains(&v))
}
