//! Loss terms: class/pixel weighted cross-entropy, the supervised and
//! confidence-weighted pseudo-label losses, entropy minimisation and the
//! attention-weighted positive-only contrastive loss.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionModuleSet, AttentionRole, ClassDistMap, ImageBatch, Mode, Segmenter};

/// Guard used for logarithms and vector norms.
pub const EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub sup: f64,
    pub pseudo: f64,
    pub ent: f64,
    pub contr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sup: 1.0,
            pseudo: 1.0,
            ent: 0.01,
            contr: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sup", self.sup),
            ("pseudo", self.pseudo),
            ("ent", self.ent),
            ("contr", self.contr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// A scalar loss and the number of elements (pixels, classes) it averaged
/// over. `count == 0` flags an empty reduction; the value is then zero.
#[derive(Clone, Debug)]
pub struct Loss {
    pub value: Tensor,
    pub count: usize,
}

impl Loss {
    pub fn zero(dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            value: Tensor::zeros((), dtype, device)?,
            count: 0,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn scalar(&self) -> Result<f64> {
        Ok(self.value.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// Cross-entropy target: class indices (with ignore) or full distributions.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Indices { labels: &'a [u16], ignore_index: u16 },
    Distribution(&'a Tensor),
}

fn clamped_log(p: &Tensor) -> Result<Tensor> {
    Ok(p.maximum(EPS)?.log()?)
}

/// `-(1/N) sum_n sum_c target * log(pred) * alpha_c * beta_n` over the
/// `N` non-ignored rows of `probs` (`(N_total, C)`). `beta` defaults to one.
pub fn weighted_cross_entropy(probs: &Tensor, target: Target<'_>, alpha: &[f64], beta: Option<&[f64]>) -> Result<Loss> {
    let (n, c) = probs.dims2()?;
    if alpha.len() != c {
        return Err(Error::Shape(format!("{} class weights for {c} classes", alpha.len())));
    }
    if let Some(b) = beta {
        if b.len() != n {
            return Err(Error::Shape(format!("{} pixel weights for {n} pixels", b.len())));
        }
    }
    let beta_at = |i: usize| beta.map_or(1.0, |b| b[i]);
    let (weights, valid) = match target {
        Target::Indices { labels, ignore_index } => {
            if labels.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} predictions", labels.len())));
            }
            let mut w = vec![0f64; n * c];
            let mut valid = 0;
            for (i, &l) in labels.iter().enumerate() {
                if l == ignore_index {
                    continue;
                }
                let l = l as usize;
                if l >= c {
                    return Err(Error::Validation(format!("label {l} at pixel {i} is not below {c}")));
                }
                w[i * c + l] = alpha[l] * beta_at(i);
                valid += 1;
            }
            (
                Tensor::from_vec(w, (n, c), probs.device())?.to_dtype(probs.dtype())?,
                valid,
            )
        }
        Target::Distribution(t) => {
            if t.dims2()? != (n, c) {
                return Err(Error::Shape(format!(
                    "target {:?} for predictions ({n}, {c})",
                    t.dims()
                )));
            }
            let mut w = vec![0f64; n * c];
            for i in 0..n {
                for (j, a) in alpha.iter().enumerate() {
                    w[i * c + j] = a * beta_at(i);
                }
            }
            let w = Tensor::from_vec(w, (n, c), probs.device())?.to_dtype(probs.dtype())?;
            (t.detach().mul(&w)?, n)
        }
    };
    if valid == 0 {
        return Loss::zero(probs.dtype(), probs.device());
    }
    let total = clamped_log(probs)?.mul(&weights)?.sum_all()?;
    Ok(Loss {
        value: (total.neg()? / valid as f64)?,
        count: valid,
    })
}

/// Cross-entropy of the student on weakly augmented labeled images.
pub fn supervised_loss(
    student: &dyn Segmenter,
    images: &ImageBatch,
    labels: &[u16],
    alpha: &[f64],
    ignore_index: u16,
) -> Result<Loss> {
    let pred = student.segment(images, Mode::Train)?;
    weighted_cross_entropy(&pred.probs, Target::Indices { labels, ignore_index }, alpha, None)
}

/// Pseudo-labels and teacher confidences carried into one augmented view.
#[derive(Clone, Copy, Debug)]
pub struct PseudoTarget<'a> {
    pub labels: &'a [u16],
    pub confidence: &'a [f32],
}

/// Mean over views of the cross-entropy against pseudo-labels, each pixel
/// weighted by `confidence^sharpen`.
pub fn pseudo_loss_from_probs(
    preds: &[&Tensor],
    targets: &[PseudoTarget<'_>],
    alpha: &[f64],
    sharpen: f64,
    ignore_index: u16,
) -> Result<Loss> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predicted views for {} pseudo-label views",
            preds.len(),
            targets.len()
        )));
    }
    let mut sum: Option<Tensor> = None;
    let mut count = 0;
    for (p, t) in preds.iter().zip(targets) {
        let beta: Vec<f64> = t.confidence.iter().map(|&c| (c as f64).powf(sharpen)).collect();
        let l = weighted_cross_entropy(
            p,
            Target::Indices {
                labels: t.labels,
                ignore_index,
            },
            alpha,
            Some(&beta),
        )?;
        count += l.count;
        sum = Some(match sum {
            Some(s) => (s + l.value)?,
            None => l.value,
        });
    }
    let sum = sum.expect("at least one view");
    Ok(Loss {
        value: (sum / preds.len() as f64)?,
        count,
    })
}

/// Runs the student on every augmented view and applies
/// [`pseudo_loss_from_probs`].
pub fn pseudo_loss(
    student: &dyn Segmenter,
    views: &[&ImageBatch],
    targets: &[PseudoTarget<'_>],
    alpha: &[f64],
    sharpen: f64,
    ignore_index: u16,
) -> Result<Loss> {
    let preds: Vec<ClassDistMap> = views
        .iter()
        .map(|v| student.segment(v, Mode::Train))
        .collect::<Result<_>>()?;
    let probs: Vec<&Tensor> = preds.iter().map(|p| &p.probs).collect();
    pseudo_loss_from_probs(&probs, targets, alpha, sharpen, ignore_index)
}

/// Mean per-pixel Shannon entropy, averaged over views.
pub fn entropy_from_probs(preds: &[&Tensor]) -> Result<Loss> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Shape("entropy needs at least one view".into()))?;
    let mut sum: Option<Tensor> = None;
    let mut count = 0;
    for p in preds {
        let n = p.dim(0)?;
        if n == 0 {
            continue;
        }
        let h = (p.mul(&clamped_log(p)?)?.sum_all()?.neg()? / n as f64)?;
        count += n;
        sum = Some(match sum {
            Some(s) => (s + h)?,
            None => h,
        });
    }
    match sum {
        Some(s) => Ok(Loss {
            value: (s / preds.len() as f64)?,
            count,
        }),
        None => Loss::zero(first.dtype(), first.device()),
    }
}

pub fn entropy_loss(student: &dyn Segmenter, views: &[&ImageBatch]) -> Result<Loss> {
    let preds: Vec<ClassDistMap> = views
        .iter()
        .map(|v| student.segment(v, Mode::Train))
        .collect::<Result<_>>()?;
    let probs: Vec<&Tensor> = preds.iter().map(|p| &p.probs).collect();
    entropy_from_probs(&probs)
}

/// Rescales positive scores `(n,)` so they average to one: `n s_i / sum s`.
pub fn normalize_weights(scores: &Tensor) -> Result<Tensor> {
    let n = scores.dim(0)?;
    let sum = scores.sum_all()?.maximum(EPS)?;
    Ok((scores.broadcast_div(&sum)? * n as f64)?)
}

/// Cosine similarity of two vectors. The flag is set when either norm fell
/// below [`EPS`], in which case the similarity is zero.
pub fn cosine_similarity(p: &[f64], z: &[f64]) -> (f64, bool) {
    let dot: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nz = z.iter().map(|a| a * a).sum::<f64>().sqrt();
    if np < EPS || nz < EPS {
        return (0.0, true);
    }
    (dot / (np * nz), false)
}

pub fn weighted_distance(p: &[f64], z: &[f64], w_p: f64, w_z: f64) -> f64 {
    w_p * w_z * (1.0 - cosine_similarity(p, z).0)
}

fn unit_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(EPS)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Pairwise cosine similarities `(n, m)` between the rows of `p` and `z`.
pub fn cosine_matrix(p: &Tensor, z: &Tensor) -> Result<Tensor> {
    Ok(unit_rows(p)?.matmul(&unit_rows(z)?.t()?)?)
}

/// Student predictions and bank targets of one class.
#[derive(Clone, Debug)]
pub struct ContrastGroup {
    pub class: usize,
    /// `(n, D)` prediction-head outputs.
    pub predictions: Tensor,
    /// `(m, D)` bank vectors, treated as constants.
    pub targets: Tensor,
}

/// Mean of `w_p[i] * w_z[j] * (1 - cos(p_i, z_j))` over all pairs of one
/// class; absent weights count as one. Weights are used as given.
pub fn class_term(
    predictions: &Tensor,
    targets: &Tensor,
    w_p: Option<&Tensor>,
    w_z: Option<&Tensor>,
) -> Result<Tensor> {
    let (n, _) = predictions.dims2()?;
    let (m, _) = targets.dims2()?;
    let mut dist = cosine_matrix(predictions, &targets.detach())?.affine(-1.0, 1.0)?;
    if let Some(w) = w_p {
        dist = dist.broadcast_mul(&w.unsqueeze(1)?)?;
    }
    if let Some(w) = w_z {
        dist = dist.broadcast_mul(&w.unsqueeze(0)?)?;
    }
    Ok((dist.sum_all()? / (n * m) as f64)?)
}

/// Per class, the attention-weighted mean distance over all
/// (prediction, target) pairs; the result is the mean over classes where
/// both sets are non-empty.
///
/// Without attention modules every weight is one.
pub fn contrastive_loss(attention: Option<&AttentionModuleSet>, groups: &[ContrastGroup], mode: Mode) -> Result<Loss> {
    let mut sum: Option<Tensor> = None;
    let mut count = 0;
    for g in groups {
        let (n, _) = g.predictions.dims2()?;
        let (m, _) = g.targets.dims2()?;
        if n == 0 || m == 0 {
            continue;
        }
        let targets = g.targets.detach();
        let term = match attention {
            Some(att) => {
                let w_p = normalize_weights(
                    &att.module(g.class, AttentionRole::Prediction)?
                        .forward(&g.predictions, mode)?,
                )?;
                let w_z = normalize_weights(
                    &att.module(g.class, AttentionRole::Projection)?
                        .forward(&targets, mode)?,
                )?;
                class_term(&g.predictions, &targets, Some(&w_p), Some(&w_z))?
            }
            None => class_term(&g.predictions, &targets, None, None)?,
        };
        count += 1;
        sum = Some(match sum {
            Some(s) => (s + term)?,
            None => term,
        });
    }
    match sum {
        Some(s) => Ok(Loss {
            value: (s / count as f64)?,
            count,
        }),
        None => {
            let like = groups.first().map(|g| &g.predictions);
            let (dtype, device) = like.map_or((DType::F32, Device::Cpu), |t| (t.dtype(), t.device().clone()));
            Loss::zero(dtype, &device)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossParts {
    pub sup: Tensor,
    pub pseudo: Tensor,
    pub ent: Tensor,
    pub contr: Tensor,
}

/// Scalar values of the parts and of the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub sup: f64,
    pub pseudo: f64,
    pub ent: f64,
    pub contr: f64,
    pub total: f64,
}

/// `sum lambda_k * L_k`; any non-finite part aborts with its name.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, iter: u64) -> Result<(Tensor, LossValues)> {
    let named = [
        ("l_sup", &parts.sup, weights.sup),
        ("l_pseudo", &parts.pseudo, weights.pseudo),
        ("l_ent", &parts.ent, weights.ent),
        ("l_contr", &parts.contr, weights.contr),
    ];
    let mut values = [0f64; 4];
    let mut total: Option<Tensor> = None;
    for (k, (term, t, lambda)) in named.into_iter().enumerate() {
        let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { term, iter, value: v });
        }
        values[k] = v;
        let scaled = (t * lambda)?;
        total = Some(match total {
            Some(s) => (s + scaled)?,
            None => scaled,
        });
    }
    let total = total.expect("four parts");
    let t = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !t.is_finite() {
        return Err(Error::NonFinite {
            term: "total",
            iter,
            value: t,
        });
    }
    Ok((
        total,
        LossValues {
            sup: values[0],
            pseudo: values[1],
            ent: values[2],
            contr: values[3],
            total: t,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), c), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn cross_entropy_uniform() {
        let p = t2(&[&[0.25; 4], &[0.25; 4], &[0.25; 4]]);
        let l = weighted_cross_entropy(
            &p,
            Target::Indices {
                labels: &[0, 3, 255],
                ignore_index: 255,
            },
            &[1.0; 4],
            None,
        )
        .unwrap();
        assert_eq!(l.count, 2);
        assert_abs_diff_eq!(l.scalar().unwrap(), 1.3863, epsilon = 1e-4);
        assert_abs_diff_eq!(l.scalar().unwrap(), 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_one_hot_and_beta() {
        let p = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let target = Target::Indices {
            labels: &[0, 1],
            ignore_index: 255,
        };
        let l = weighted_cross_entropy(&p, target, &[1.0, 1.0], None).unwrap();
        assert!(l.scalar().unwrap().abs() < 1e-12);

        let p = t2(&[&[0.7, 0.3], &[0.4, 0.6]]);
        let one = weighted_cross_entropy(&p, target, &[1.0, 1.0], Some(&[1.0, 1.0])).unwrap();
        let two = weighted_cross_entropy(&p, target, &[1.0, 1.0], Some(&[2.0, 2.0])).unwrap();
        assert_abs_diff_eq!(two.scalar().unwrap(), 2.0 * one.scalar().unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored() {
        let p = t2(&[&[0.5, 0.5]]);
        let l = weighted_cross_entropy(
            &p,
            Target::Indices {
                labels: &[255],
                ignore_index: 255,
            },
            &[1.0, 1.0],
            None,
        )
        .unwrap();
        assert!(l.is_empty());
        assert_eq!(l.scalar().unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_distribution_target() {
        let p = t2(&[&[0.25; 4]]);
        let t = t2(&[&[0.1, 0.2, 0.3, 0.4]]);
        let l = weighted_cross_entropy(&p, Target::Distribution(&t), &[1.0; 4], None).unwrap();
        assert_abs_diff_eq!(l.scalar().unwrap(), 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn pseudo_weights() {
        let p = t2(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let labels = [0u16, 1];
        let sharp = pseudo_loss_from_probs(
            &[&p],
            &[PseudoTarget {
                labels: &labels,
                confidence: &[0.9, 0.9],
            }],
            &[1.0, 1.0],
            6.0,
            255,
        )
        .unwrap();
        // 0.9^6 = 0.531441
        assert_abs_diff_eq!(sharp.scalar().unwrap(), 0.5314 * 2f64.ln(), epsilon = 1e-4);
        let none = pseudo_loss_from_probs(
            &[&p, &p],
            &[PseudoTarget {
                labels: &labels,
                confidence: &[0.0, 0.0],
            }; 2],
            &[1.0, 1.0],
            6.0,
            255,
        )
        .unwrap();
        assert_eq!(none.scalar().unwrap(), 0.0);
    }

    #[test]
    fn entropy_values() {
        let u = t2(&[&[0.25; 4]]);
        assert_abs_diff_eq!(
            scalar(&entropy_from_probs(&[&u]).unwrap().value),
            4f64.ln(),
            epsilon = 1e-12
        );
        let h = t2(&[&[0.0, 1.0, 0.0]]);
        assert!(scalar(&entropy_from_probs(&[&h]).unwrap().value).abs() < 1e-6);
        let b = t2(&[&[0.75, 0.25], &[0.75, 0.25]]);
        assert_abs_diff_eq!(
            scalar(&entropy_from_probs(&[&b, &b]).unwrap().value),
            0.5623,
            epsilon = 1e-4
        );
    }

    #[test]
    fn weight_normalisation() {
        let w = |s: Vec<f64>| {
            let n = s.len();
            normalize_weights(&Tensor::from_vec(s, n, &Device::Cpu).unwrap())
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()
        };
        let out = w(vec![0.2, 0.6]);
        assert_abs_diff_eq!(out[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 1.5, epsilon = 1e-12);
        for v in w(vec![0.3; 5]) {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(w(vec![0.7])[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn cosine_and_distance() {
        let u = [1.0, 2.0, -1.0];
        assert_abs_diff_eq!(cosine_similarity(&u, &u).0, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).0, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine_similarity(&u, &[-1.0, -2.0, 1.0]).0, -1.0, epsilon = 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &u), (0.0, true));
        assert_abs_diff_eq!(weighted_distance(&u, &u, 3.0, 7.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            weighted_distance(&[1.0, 0.0], &[-1.0, 0.0], 1.0, 1.0),
            2.0,
            epsilon = 1e-12
        );
        // 60 degrees apart
        let z = [0.5, 3f64.sqrt() / 2.0];
        assert_abs_diff_eq!(weighted_distance(&[1.0, 0.0], &z, 2.0, 0.5), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn totals() {
        let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let parts = LossParts {
            sup: s(1.0),
            pseudo: s(2.0),
            ent: s(3.0),
            contr: s(4.0),
        };
        let (_, v) = total_loss(&parts, &LossWeights::default(), 0).unwrap();
        assert_abs_diff_eq!(v.total, 3.43, epsilon = 1e-12);
        let zero = LossWeights {
            sup: 0.0,
            pseudo: 0.0,
            ent: 0.0,
            contr: 0.0,
        };
        assert_eq!(total_loss(&parts, &zero, 0).unwrap().1.total, 0.0);
        let warm = LossWeights {
            pseudo: 0.0,
            contr: 0.0,
            ..LossWeights::default()
        };
        assert_abs_diff_eq!(total_loss(&parts, &warm, 0).unwrap().1.total, 1.03, epsilon = 1e-12);
        let bad = LossParts {
            ent: s(f64::NAN),
            ..parts
        };
        match total_loss(&bad, &LossWeights::default(), 17) {
            Err(Error::NonFinite { term, iter, .. }) => {
                assert_eq!(term, "l_ent");
                assert_eq!(iter, 17);
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }
}
