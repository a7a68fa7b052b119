use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::batch::Domain;
use super::config::{ContrastiveInputs, TrainConfig};
use super::pseudo::{generate_pseudo_labels, PseudoLabelPack};
use super::schedule::{poly_lr, tau_schedule};
use super::{LossRecord, TrainState};
use crate::augment::{apply, classmix, sample_transform, AugmentationPolicy};
use crate::bank::{per_image_quota, quality_filter, rank_and_select, FeatureRecord};
use crate::data::{downsample_labels, FrequencySource, RgbImage, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, entropy_from_probs, pseudo_loss_from_probs, total_loss, weighted_cross_entropy, ContrastGroup,
    Loss, LossParts, LossWeights, PseudoTarget, Target,
};
use crate::nn::{AttentionRole, ClassDistMap, FeatureMap, ImageBatch, Mode, Network, OUTPUT_STRIDE};

/// One labeled view after weak augmentation.
pub(crate) struct LabeledView {
    pub image: RgbImage,
    /// Training target on the output grid, flattened row-major.
    pub labels: Vec<u16>,
    pub domain: Domain,
}

/// One strongly augmented unlabeled view with its replayed pseudo-labels.
pub(crate) struct UnlabeledView {
    pub image: RgbImage,
    pub labels: Vec<u16>,
    pub confidence: Vec<f32>,
}

fn pseudo_packs(teacher: &Network, images: &[&RgbImage]) -> Result<Vec<PseudoLabelPack>> {
    let same = images.windows(2).all(|w| w[0].dims() == w[1].dims());
    if same {
        return generate_pseudo_labels(teacher, images, teacher.dtype());
    }
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        out.extend(generate_pseudo_labels(teacher, &[img], teacher.dtype())?);
    }
    Ok(out)
}

fn weak_views<R: Rng + ?Sized>(
    samples: &[(&Sample, Domain)],
    policy: &AugmentationPolicy,
    crop: (usize, usize),
    ignore: u16,
    rng: &mut R,
) -> Result<Vec<LabeledView>> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n);
    for (i, (s, domain)) in samples.iter().enumerate() {
        let label = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("labeled sample `{}` has no label map", s.id)))?;
        let mut transform = sample_transform(policy, rng, s.image.dims(), crop);
        let partner = &samples[(i + 1) % n].0;
        let mixed;
        let (img, lab) = if transform.classmix && n > 1 && partner.image.dims() == s.image.dims() {
            let p_lab = partner.label.as_ref().expect("checked on its own turn");
            let (m_img, m_lab, mask) = classmix(&partner.image, p_lab, &s.image, label, rng, ignore)?;
            transform.geometry.mix_mask = Some(mask);
            mixed = (m_img, m_lab);
            (&mixed.0, &mixed.1)
        } else {
            (&s.image, label)
        };
        let (image, aug_label, _) = apply(&transform, img, Some(lab), ignore)?;
        let labels = downsample_labels(&aug_label.expect("label given"), OUTPUT_STRIDE)?.into_data();
        out.push(LabeledView {
            image,
            labels,
            domain: *domain,
        });
    }
    Ok(out)
}

fn strong_views<R: Rng + ?Sized>(
    images: &[&RgbImage],
    packs: &[PseudoLabelPack],
    policy: &AugmentationPolicy,
    crop: (usize, usize),
    ignore: u16,
    rng: &mut R,
) -> Result<Vec<UnlabeledView>> {
    let n = images.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let img = images[i];
        let pack = &packs[i];
        let mut transform = sample_transform(policy, rng, img.dims(), crop);
        let j = (i + 1) % n;
        let mixed;
        let (base, partner) = if transform.classmix && n > 1 && images[j].dims() == img.dims() {
            let (m_img, _, mask) = classmix(images[j], &packs[j].labels, img, &pack.labels, rng, ignore)?;
            transform.geometry.mix_mask = Some(mask);
            mixed = m_img;
            (&mixed, Some(&packs[j]))
        } else {
            (img, None)
        };
        let (image, _, rec) = apply(&transform, base, None, ignore)?;
        let labels = rec.replay(&pack.labels, partner.map(|p| &p.labels), ignore);
        let confidence = rec.replay(&pack.confidence, partner.map(|p| &p.confidence), 0.0);
        out.push(UnlabeledView {
            image,
            labels: downsample_labels(&labels, OUTPUT_STRIDE)?.into_data(),
            confidence: downsample_labels(&confidence, OUTPUT_STRIDE)?.into_data(),
        });
    }
    Ok(out)
}

fn batch_of<'a>(images: impl Iterator<Item = &'a RgbImage>, dtype: DType) -> Result<ImageBatch> {
    let refs: Vec<&RgbImage> = images.collect();
    ImageBatch::from_images(&refs, dtype, &Device::Cpu)
}

fn index_tensor(idx: &[u32]) -> Result<Tensor> {
    Ok(Tensor::from_vec(idx.to_vec(), idx.len(), &Device::Cpu)?)
}

/// Teacher features of the labeled views that pass the filter, ranked and
/// trimmed to the per-image quota, go into the bank.
fn update_bank(
    state: &mut TrainState,
    cfg: &TrainConfig,
    views: &[LabeledView],
    batch: &ImageBatch,
    n_labeled_total: usize,
    iter: u64,
) -> Result<()> {
    let teacher = &state.teacher;
    let features = teacher.forward_features(batch, Mode::Eval)?;
    let (arg, conf) = teacher.classify(&features)?.argmax_confidence()?;
    let z = teacher.project(&features.rows, Mode::Eval)?;
    let dim = z.dim(1)?;
    let z_flat: Vec<f32> = z.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let per = features.height * features.width;
    let c = &cfg.contrastive;
    let k = per_image_quota(c.bank_capacity, n_labeled_total);
    for (i, view) in views.iter().enumerate() {
        if view.domain != Domain::Target {
            continue;
        }
        let span = i * per..(i + 1) * per;
        let candidates = quality_filter(
            &z_flat[i * per * dim..(i + 1) * per * dim],
            dim,
            &arg[span.clone()],
            &conf[span],
            &view.labels,
            cfg.data.ignore_index,
            c.confidence_threshold,
            cfg.data.classes,
            c.use_fqf,
        )?;
        for (class, cands) in candidates.into_iter().enumerate() {
            if cands.is_empty() {
                continue;
            }
            let scores: Vec<f32> = if c.use_attention {
                let flat: Vec<f32> = cands.iter().flat_map(|c| c.vector.iter().copied()).collect();
                let x = Tensor::from_vec(flat, (cands.len(), dim), &Device::Cpu)?.to_dtype(teacher.dtype())?;
                teacher
                    .attention_score(class, AttentionRole::Projection, &x, Mode::Eval)?
                    .to_dtype(DType::F32)?
                    .to_vec1()?
            } else {
                cands.iter().map(|c| c.confidence).collect()
            };
            let records = rank_and_select(cands, &scores, k)?
                .into_iter()
                .map(|(cand, score)| FeatureRecord {
                    vector: cand.vector,
                    class_id: class as u16,
                    confidence: cand.confidence,
                    rank_score: score,
                    iteration: iter,
                })
                .collect();
            state.bank.enqueue(class, records)?;
        }
    }
    Ok(())
}

pub(crate) fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    labeled: &[(&Sample, Domain)],
    unlabeled: &[&RgbImage],
    n_labeled_total: usize,
) -> Result<LossRecord> {
    let t = &cfg.train;
    let toggles = cfg.losses;
    let iter = state.iter;
    let ignore = cfg.data.ignore_index;
    let crop = (t.crop_size[0], t.crop_size[1]);
    let dtype = state.student.dtype();
    let classes = cfg.data.classes;
    let alpha = if t.class_balancing {
        state
            .frequencies
            .class_weights(true)
            .unwrap_or_else(|_| vec![1.0; classes])
    } else {
        vec![1.0; classes]
    };
    let contr_labeled = toggles.contr && cfg.contrastive.inputs != ContrastiveInputs::Unlabeled;
    let contr_unlabeled = toggles.contr && cfg.contrastive.inputs != ContrastiveInputs::Labeled;
    let use_unlabeled = !unlabeled.is_empty() && (toggles.pseudo || toggles.ent || contr_unlabeled);

    // 1. pseudo-labels from the teacher on clean images
    let packs = if use_unlabeled {
        pseudo_packs(&state.teacher, unlabeled)?
    } else {
        Vec::new()
    };

    // 2. augmentation
    let l_views = weak_views(labeled, &cfg.augmentation.weak, crop, ignore, &mut state.rng)?;
    let mut u_views: Vec<Vec<UnlabeledView>> = Vec::new();
    if use_unlabeled {
        for _ in 0..t.views {
            u_views.push(strong_views(
                unlabeled,
                &packs,
                &cfg.augmentation.strong,
                crop,
                ignore,
                &mut state.rng,
            )?);
        }
    }

    // 3. student forward pass: one joint batch of the labeled and every
    // unlabeled view, so batch-norm statistics see the same mixture in
    // training and in the running averages the teacher inherits.
    let student = &state.student;
    let images = l_views
        .iter()
        .map(|v| &v.image)
        .chain(u_views.iter().flatten().map(|v| &v.image));
    let joint = batch_of(images, dtype)?;
    let features = student.forward_features(&joint, Mode::Train)?;
    let dist = student.classify(&features)?;
    let per = features.height * features.width;
    let part = |start: usize, images: usize| -> Result<(FeatureMap, ClassDistMap)> {
        let (lo, n) = (start * per, images * per);
        Ok((
            FeatureMap {
                rows: features.rows.narrow(0, lo, n)?,
                batch: images,
                height: features.height,
                width: features.width,
            },
            ClassDistMap {
                probs: dist.probs.narrow(0, lo, n)?,
                batch: images,
                height: dist.height,
                width: dist.width,
            },
        ))
    };
    let (fl, pl) = part(0, l_views.len())?;
    let mut fu = Vec::with_capacity(u_views.len());
    let mut pu = Vec::with_capacity(u_views.len());
    for (a, views) in u_views.iter().enumerate() {
        let (f, p) = part(l_views.len() + a * views.len(), views.len())?;
        fu.push(f);
        pu.push(p);
    }
    let u_labels: Vec<Vec<u16>> = u_views
        .iter()
        .map(|vs| vs.iter().flat_map(|v| v.labels.iter().copied()).collect())
        .collect();
    let u_conf: Vec<Vec<f32>> = u_views
        .iter()
        .map(|vs| vs.iter().flat_map(|v| v.confidence.iter().copied()).collect())
        .collect();
    let l_labels: Vec<u16> = l_views.iter().flat_map(|v| v.labels.iter().copied()).collect();

    // 4. loss terms
    let zero = || Loss::zero(dtype, &Device::Cpu);
    let l_sup = if toggles.sup {
        weighted_cross_entropy(
            &pl.probs,
            Target::Indices {
                labels: &l_labels,
                ignore_index: ignore,
            },
            &alpha,
            None,
        )?
    } else {
        zero()?
    };
    let u_probs: Vec<&Tensor> = pu.iter().map(|p| &p.probs).collect();
    let l_pseudo = if toggles.pseudo && !u_probs.is_empty() {
        let targets: Vec<PseudoTarget> = u_labels
            .iter()
            .zip(&u_conf)
            .map(|(labels, confidence)| PseudoTarget { labels, confidence })
            .collect();
        pseudo_loss_from_probs(&u_probs, &targets, &alpha, t.sharpen, ignore)?
    } else {
        zero()?
    };
    let l_ent = if toggles.ent && !u_probs.is_empty() {
        entropy_from_probs(&u_probs)?
    } else {
        zero()?
    };
    let l_contr = if toggles.contr && !state.bank.is_empty() {
        let mut rows = Vec::new();
        let mut labels: Vec<u16> = Vec::new();
        if contr_labeled {
            rows.push(fl.rows.clone());
            labels.extend_from_slice(&l_labels);
        }
        if contr_unlabeled {
            for (f, l) in fu.iter().zip(&u_labels) {
                rows.push(f.rows.clone());
                labels.extend_from_slice(l);
            }
        }
        let mut groups = Vec::new();
        if !rows.is_empty() {
            let v = Tensor::cat(&rows, 0)?;
            let p = student.predict(&student.project(&v, Mode::Train)?, Mode::Train)?;
            for c in 0..classes {
                let (flat, m) = state.bank.targets_flat(c);
                let idx: Vec<u32> = (0..labels.len() as u32)
                    .filter(|&i| labels[i as usize] as usize == c)
                    .collect();
                if m == 0 || idx.is_empty() {
                    continue;
                }
                groups.push(ContrastGroup {
                    class: c,
                    predictions: p.index_select(&index_tensor(&idx)?, 0)?,
                    targets: Tensor::from_vec(flat, (m, state.bank.dim()), &Device::Cpu)?.to_dtype(dtype)?,
                });
            }
        }
        let attention = cfg.contrastive.use_attention.then(|| student.attention());
        contrastive_loss(attention, &groups, Mode::Train)?
    } else {
        zero()?
    };

    let warm = iter < t.warmup_iters;
    let effective = LossWeights {
        sup: cfg.weights.sup,
        pseudo: if warm { 0.0 } else { cfg.weights.pseudo },
        ent: cfg.weights.ent,
        contr: if warm { 0.0 } else { cfg.weights.contr },
    };
    let parts = LossParts {
        sup: l_sup.value,
        pseudo: l_pseudo.value,
        ent: l_ent.value,
        contr: l_contr.value,
    };
    let (total, values) = total_loss(&parts, &effective, iter)?;

    // 5. optimiser step on the student only
    let lr = poly_lr(iter, t.lr0, t.poly_power, t.total_iters);
    let grads = total.backward()?;
    state.optimizer.step(&state.student.params, &grads, lr)?;

    // 6. teacher EMA
    let tau = tau_schedule(iter, t.total_iters, t.tau_start, t.tau_end);
    crate::nn::ema_update(&state.teacher.params, &state.student.params, tau)?;

    // 7. bank update from the teacher's view of the labeled batch
    if toggles.contr {
        let xl = batch_of(l_views.iter().map(|v| &v.image), dtype)?;
        update_bank(state, cfg, &l_views, &xl, n_labeled_total, iter)?;
    }

    // 8. class frequencies
    state.frequencies.update(&l_labels);
    if state.frequencies.source == FrequencySource::LabeledPlusPseudo {
        for p in &packs {
            state.frequencies.update(p.coarse_labels.data());
        }
    }

    state.iter += 1;
    Ok(LossRecord {
        iter,
        l_sup: values.sup,
        l_pseudo: values.pseudo,
        l_ent: values.ent,
        l_contr: values.contr,
        total: values.total,
        lr,
        tau,
        lambda_sup: effective.sup,
        lambda_pseudo: effective.pseudo,
        lambda_ent: effective.ent,
        lambda_contr: effective.contr,
        c_sup: effective.sup * values.sup,
        c_pseudo: effective.pseudo * values.pseudo,
        c_ent: effective.ent * values.ent,
        c_contr: effective.contr * values.contr,
        bank_size: state.bank.total_len(),
    })
}
