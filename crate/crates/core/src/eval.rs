//! Confusion-matrix bookkeeping and mean IoU, plus full-resolution
//! validation of a segmenter over a dataset.

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::nn::{ImageBatch, Mode, Segmenter, OUTPUT_STRIDE};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not `ignore_index`.
    pub fn accumulate(&mut self, pred: &[u16], gt: &[u16], ignore_index: u16) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                pred.len(),
                gt.len()
            )));
        }
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g == ignore_index {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::Validation(format!(
                    "pixel {i}: class pair (gt {g}, pred {p}) outside 0..{}",
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Mean IoU over classes with a non-zero denominator, and the per-class
    /// IoU (`None` for excluded classes).
    pub fn miou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|j| self.get(j, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Degenerate(
                "no class occurs in ground truth or prediction".into(),
            ));
        }
        Ok((present.iter().sum::<f64>() / present.len() as f64, per_class))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub n_images: usize,
}

/// Zero-pads bottom and right up to the next multiple of the output stride.
pub fn pad_to_stride(img: &RgbImage) -> RgbImage {
    let (h, w) = img.dims();
    let height = h.div_ceil(OUTPUT_STRIDE) * OUTPUT_STRIDE;
    let width = w.div_ceil(OUTPUT_STRIDE) * OUTPUT_STRIDE;
    if img.dims() == (height, width) {
        return img.clone();
    }
    let mut out = RgbImage::zeros(width, height);
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.set_pixel(x, y, img.pixel(x, y));
        }
    }
    out
}

/// Predicts labels at native resolution: the input is zero-padded to a
/// multiple of the output stride and the stride-8 argmax is upsampled by
/// nearest neighbour, then cropped back.
pub fn predict_labels(model: &dyn Segmenter, images: &[&RgbImage], dtype: DType) -> Result<Vec<LabelMap>> {
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let (h, w) = first.dims();
    if images.iter().any(|i| i.dims() != (h, w)) {
        return Err(Error::Shape("batch images must share dimensions".into()));
    }
    let padded: Vec<RgbImage> = images.iter().map(|i| pad_to_stride(i)).collect();
    let refs: Vec<&RgbImage> = padded.iter().collect();
    let batch = ImageBatch::from_images(&refs, dtype, &Device::Cpu)?;
    let dist = model.segment(&batch, Mode::Eval)?;
    let (pred, _) = dist.argmax_confidence()?;
    let per = dist.pixels_per_image();
    pred.chunks(per)
        .map(|chunk| {
            let coarse = LabelMap::new(dist.width, dist.height, chunk.to_vec())?;
            Ok(coarse.upsample_nearest(OUTPUT_STRIDE, w, h))
        })
        .collect()
}

/// Scores the model on every labeled sample of `dataset`.
pub fn evaluate(
    model: &dyn Segmenter,
    dtype: DType,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<(EvalReport, ConfusionMatrix)> {
    let mut cm = ConfusionMatrix::new(dataset.class_count);
    let labeled: Vec<_> = dataset.samples.iter().filter(|s| s.label.is_some()).collect();
    let mut start = 0;
    while start < labeled.len() {
        let dims = labeled[start].image.dims();
        let mut end = start + 1;
        while end < labeled.len() && end - start < batch_size.max(1) && labeled[end].image.dims() == dims {
            end += 1;
        }
        let imgs: Vec<&RgbImage> = labeled[start..end].iter().map(|s| &s.image).collect();
        for (pred, s) in predict_labels(model, &imgs, dtype)?
            .into_iter()
            .zip(&labeled[start..end])
        {
            let gt = s.label.as_ref().expect("filtered");
            cm.accumulate(pred.data(), gt.data(), dataset.ignore_index)?;
        }
        start = end;
    }
    let (miou, per_class_iou) = cm.miou()?;
    Ok((
        EvalReport {
            miou,
            per_class_iou,
            n_images: labeled.len(),
        },
        cm,
    ))
}
