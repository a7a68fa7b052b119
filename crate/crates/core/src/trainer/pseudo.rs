use candle_core::DType;

use crate::data::{ConfidenceMap, LabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::eval::pad_to_stride;
use crate::nn::{ImageBatch, Mode, Segmenter, OUTPUT_STRIDE};

/// Teacher argmax and confidence for one clean unlabeled image, both on the
/// output grid and upsampled to the image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelPack {
    pub labels: LabelMap,
    pub confidence: ConfidenceMap,
    pub coarse_labels: LabelMap,
    pub coarse_confidence: ConfidenceMap,
}

/// Runs `teacher` in evaluation mode on clean images. The returned maps are
/// plain values, so nothing computed here can carry a gradient.
pub fn generate_pseudo_labels(
    teacher: &dyn Segmenter,
    images: &[&RgbImage],
    dtype: DType,
) -> Result<Vec<PseudoLabelPack>> {
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = first.dims();
    if images.iter().any(|i| i.dims() != (h, w)) {
        return Err(Error::Shape("pseudo-label batch images must share dimensions".into()));
    }
    let padded: Vec<RgbImage> = images.iter().map(|i| pad_to_stride(i)).collect();
    let refs: Vec<&RgbImage> = padded.iter().collect();
    let batch = ImageBatch::from_images(&refs, dtype, &candle_core::Device::Cpu)?;
    let dist = teacher.segment(&batch, Mode::Eval)?;
    let (arg, conf) = dist.argmax_confidence()?;
    let per = dist.pixels_per_image();
    (0..images.len())
        .map(|i| {
            let span = i * per..(i + 1) * per;
            let coarse_labels = LabelMap::new(dist.width, dist.height, arg[span.clone()].to_vec())?;
            let coarse_confidence = ConfidenceMap::new(dist.width, dist.height, conf[span].to_vec())?;
            Ok(PseudoLabelPack {
                labels: coarse_labels.upsample_nearest(OUTPUT_STRIDE, w, h),
                confidence: coarse_confidence.upsample_nearest(OUTPUT_STRIDE, w, h),
                coarse_labels,
                coarse_confidence,
            })
        })
        .collect()
}
