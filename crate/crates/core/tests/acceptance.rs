//! End-to-end acceptance checks. Every test prints one `[PASS]`/`[FAIL]`
//! line before asserting, so `cargo test --test acceptance -- --nocapture`
//! gives a summary table.

mod common;

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semiseg_core::augment::{apply, classmix, sample_transform, AugmentationPolicy};
use semiseg_core::bank::{per_image_quota, quality_filter, rank_and_select, FeatureRecord, MemoryBank};
use semiseg_core::data::{split_ids, synthetic, LabelMap, Ratio, RgbImage};
use semiseg_core::eval::ConfusionMatrix;
use semiseg_core::losses::*;
use semiseg_core::nn::*;
use semiseg_core::trainer::{LossRecord, TrainConfig, TrainData, Trainer};

use common::max_grad_error;

fn report(name: &str, ok: bool, detail: impl std::fmt::Display) {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        width: 8,
        head_dim: 8,
        attention_hidden: 8,
        in_channels: 3,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rows(v: &[Vec<f64>], dim: usize) -> Tensor {
    Tensor::from_vec(v.concat(), (v.len(), dim), &Device::Cpu).unwrap()
}

#[test]
fn loss_oracles() {
    let start = Instant::now();
    let dev = Device::Cpu;
    let uniform4 = Tensor::full(0.25f64, (10, 4), &dev).unwrap();
    let h_uniform = entropy_from_probs(&[&uniform4]).unwrap().scalar().unwrap();
    let onehot = Tensor::from_vec(
        (0..40)
            .map(|i| if i % 4 == (i / 4) % 4 { 1.0 } else { 0.0 })
            .collect::<Vec<f64>>(),
        (10, 4),
        &dev,
    )
    .unwrap();
    let h_onehot = entropy_from_probs(&[&onehot]).unwrap().scalar().unwrap();
    let mut ce_err = 0f64;
    for c in 2..=8usize {
        let probs = Tensor::full(1.0 / c as f64, (7, c), &dev).unwrap();
        let labels: Vec<u16> = (0..7).map(|i| (i % c) as u16).collect();
        let ce = weighted_cross_entropy(
            &probs,
            Target::Indices {
                labels: &labels,
                ignore_index: 255,
            },
            &vec![1.0; c],
            None,
        )
        .unwrap()
        .scalar()
        .unwrap();
        ce_err = ce_err.max((ce - (c as f64).ln()).abs());
    }
    let ok = (h_uniform - 4f64.ln()).abs() <= 1e-6
        && h_onehot <= 1e-6
        && ce_err <= 1e-6
        && start.elapsed() < Duration::from_secs(1);
    report(
        "loss oracles",
        ok,
        format!(
            "H(uniform4)-ln4 = {:.1e}, H(one-hot) = {h_onehot:.1e}, max |CE(uniform)-lnC| = {ce_err:.1e}, {:?}",
            h_uniform - 4f64.ln(),
            start.elapsed()
        ),
    );
}

/// Prediction and target vectors of one class.
type ClassVectors = (Vec<Vec<f64>>, Vec<Vec<f64>>);

struct ContrastInstance {
    groups: Vec<ContrastGroup>,
    vectors: Vec<ClassVectors>,
}

fn contrast_instance(rng: &mut ChaCha8Rng) -> ContrastInstance {
    let dim = 8;
    let classes = rng.random_range(1..=5);
    let mut groups = Vec::new();
    let mut vectors = Vec::new();
    for class in 0..classes {
        let p: Vec<Vec<f64>> = (0..rng.random_range(0..=10)).map(|_| uniform(rng, dim)).collect();
        let z: Vec<Vec<f64>> = (0..rng.random_range(0..=10)).map(|_| uniform(rng, dim)).collect();
        groups.push(ContrastGroup {
            class,
            predictions: rows(&p, dim),
            targets: rows(&z, dim),
        });
        vectors.push((p, z));
    }
    ContrastInstance { groups, vectors }
}

/// Per class: `(1/(|P||Z|)) sum_i sum_j w_i w_j (1 - cos(p_i, z_j))` with
/// weights rescaled to mean one; averaged over classes with both sets
/// non-empty.
fn contrast_oracle(net: Option<&Network>, inst: &ContrastInstance, mode: Mode) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mean_one = |s: Vec<f64>| {
        let total: f64 = s.iter().sum();
        s.iter().map(|v| s.len() as f64 * v / total).collect::<Vec<f64>>()
    };
    let (mut sum, mut classes) = (0.0, 0);
    for (g, (p, z)) in inst.groups.iter().zip(&inst.vectors) {
        if p.is_empty() || z.is_empty() {
            continue;
        }
        let (wp, wz) = match net {
            Some(net) => {
                let score = |role, t: &Tensor| net.attention_score(g.class, role, t, mode).unwrap().to_vec1().unwrap();
                (
                    mean_one(score(AttentionRole::Prediction, &g.predictions)),
                    mean_one(score(AttentionRole::Projection, &g.targets)),
                )
            }
            None => (vec![1.0; p.len()], vec![1.0; z.len()]),
        };
        let mut class_sum = 0.0;
        for (i, pi) in p.iter().enumerate() {
            for (j, zj) in z.iter().enumerate() {
                let cos = dot(pi, zj) / (dot(pi, pi).sqrt() * dot(zj, zj).sqrt());
                class_sum += wp[i] * wz[j] * (1.0 - cos);
            }
        }
        sum += class_sum / (p.len() * z.len()) as f64;
        classes += 1;
    }
    if classes == 0 {
        0.0
    } else {
        sum / classes as f64
    }
}

#[test]
fn contrastive_brute_force_oracle() {
    let start = Instant::now();
    let net = Network::new(&tiny_config(), 5, 21, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0f64;
    for _ in 0..100 {
        let inst = contrast_instance(&mut rng);
        for mode in [Mode::Eval, Mode::Train] {
            let got = contrastive_loss(Some(net.attention()), &inst.groups, mode)
                .unwrap()
                .scalar()
                .unwrap();
            worst = worst.max((got - contrast_oracle(Some(&net), &inst, mode)).abs());
        }
        let plain = contrastive_loss(None, &inst.groups, Mode::Train)
            .unwrap()
            .scalar()
            .unwrap();
        worst = worst.max((plain - contrast_oracle(None, &inst, Mode::Train)).abs());
    }
    let ok = worst <= 1e-6 && start.elapsed() < Duration::from_secs(10);
    report(
        "contrastive oracle",
        ok,
        format!(
            "100 instances, max |loss - triple sum| = {worst:.1e}, {:?}",
            start.elapsed()
        ),
    );
}

fn logits_var(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Var {
    Var::from_tensor(&Tensor::from_vec(uniform(rng, n * c), (n, c), &Device::Cpu).unwrap()).unwrap()
}

#[test]
fn gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut errors = Vec::new();

    let logits = logits_var(&mut rng, 12, 4);
    let labels: Vec<u16> = (0..12).map(|i| if i % 5 == 0 { 255 } else { (i % 4) as u16 }).collect();
    let sup = || {
        let probs = softmax_rows(logits.as_tensor()).unwrap();
        let target = Target::Indices {
            labels: &labels,
            ignore_index: 255,
        };
        weighted_cross_entropy(&probs, target, &[0.5, 1.0, 2.0, 1.5], None)
            .unwrap()
            .value
    };
    errors.push(("l_sup", max_grad_error(&[&logits], &sup, 48, 1)));

    let views = [logits_var(&mut rng, 10, 3), logits_var(&mut rng, 10, 3)];
    let p_labels: Vec<Vec<u16>> = (0..2)
        .map(|_| (0..10).map(|_| rng.random_range(0..3)).collect())
        .collect();
    let p_conf: Vec<Vec<f32>> = (0..2)
        .map(|_| (0..10).map(|_| rng.random_range(0.3..1.0)).collect())
        .collect();
    let pseudo = || {
        let probs: Vec<Tensor> = views.iter().map(|v| softmax_rows(v.as_tensor()).unwrap()).collect();
        let refs: Vec<&Tensor> = probs.iter().collect();
        let targets: Vec<PseudoTarget> = (0..2)
            .map(|i| PseudoTarget {
                labels: &p_labels[i],
                confidence: &p_conf[i],
            })
            .collect();
        pseudo_loss_from_probs(&refs, &targets, &[1.0, 0.7, 1.3], 6.0, 255)
            .unwrap()
            .value
    };
    errors.push(("l_pseudo", max_grad_error(&[&views[0], &views[1]], &pseudo, 30, 2)));

    let ent = || {
        let probs: Vec<Tensor> = views.iter().map(|v| softmax_rows(v.as_tensor()).unwrap()).collect();
        let refs: Vec<&Tensor> = probs.iter().collect();
        entropy_from_probs(&refs).unwrap().value
    };
    errors.push(("l_ent", max_grad_error(&[&views[0], &views[1]], &ent, 30, 3)));

    let net = Network::new(&tiny_config(), 2, 4, DType::F64).unwrap();
    let preds = [logits_var(&mut rng, 5, 8), logits_var(&mut rng, 4, 8)];
    let targets = [
        Tensor::from_vec(uniform(&mut rng, 6 * 8), (6, 8), &Device::Cpu).unwrap(),
        Tensor::from_vec(uniform(&mut rng, 3 * 8), (3, 8), &Device::Cpu).unwrap(),
    ];
    let mut vars: Vec<&Var> = preds.iter().collect();
    for c in 0..2 {
        for role in [AttentionRole::Projection, AttentionRole::Prediction] {
            let m = net.attention().module(c, role).unwrap();
            vars.extend([
                &m.fc1.weight,
                &m.fc1.bias,
                &m.bn.gamma,
                &m.bn.beta,
                &m.fc2.weight,
                &m.fc2.bias,
            ]);
        }
    }
    for mode in [Mode::Train, Mode::Eval] {
        let contr = || {
            let groups: Vec<ContrastGroup> = (0..2)
                .map(|c| ContrastGroup {
                    class: c,
                    predictions: preds[c].as_tensor().clone(),
                    targets: targets[c].clone(),
                })
                .collect();
            contrastive_loss(Some(net.attention()), &groups, mode).unwrap().value
        };
        errors.push(("l_contr", max_grad_error(&vars, &contr, 6, 4)));
    }

    let scores = Var::from_tensor(
        &Tensor::from_vec(
            (0..7).map(|_| rng.random_range(0.05..1.0)).collect::<Vec<f64>>(),
            7,
            &Device::Cpu,
        )
        .unwrap(),
    )
    .unwrap();
    let w = Tensor::from_vec(uniform(&mut rng, 7), 7, &Device::Cpu).unwrap();
    let norm = || {
        normalize_weights(scores.as_tensor())
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    };
    errors.push(("normalize_weights", max_grad_error(&[&scores], &norm, 14, 6)));

    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let ok = worst < 1e-4 && start.elapsed() < Duration::from_secs(60);
    let detail: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    report(
        "gradient checks",
        ok,
        format!(
            "max relative error {worst:.1e} ({}), {:?}",
            detail.join(", "),
            start.elapsed()
        ),
    );
}

fn randomise(store: &ParamStore, rng: &mut ChaCha8Rng) {
    for e in store.entries() {
        let n = e.var.elem_count();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        e.var
            .set(&Tensor::from_vec(v, e.var.shape(), &Device::Cpu).unwrap())
            .unwrap();
    }
}

fn flat_values(store: &ParamStore) -> Vec<(ParamKind, Vec<f32>)> {
    store
        .entries()
        .iter()
        .map(|e| (e.kind, e.var.as_tensor().flatten_all().unwrap().to_vec1().unwrap()))
        .collect()
}

#[test]
fn ema_exactness() {
    let teacher = Network::new(&tiny_config(), 3, 1, DType::F32).unwrap();
    let student = Network::new(&tiny_config(), 3, 2, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0usize;
    let mut scalars = 0usize;
    for i in 0..1000 {
        randomise(&teacher.params, &mut rng);
        randomise(&student.params, &mut rng);
        let tau = match i {
            0 => 1.0,
            1 => 0.0,
            _ => rng.random_range(0.0..=1.0),
        };
        let before = flat_values(&teacher.params);
        let s = flat_values(&student.params);
        ema_update(&teacher.params, &student.params, tau).unwrap();
        let after = flat_values(&teacher.params);
        // Working-precision oracle: both coefficients rounded to f32 once.
        let (keep, take) = (tau as f32, (1.0 - tau) as f32);
        for ((kind, xi), ((_, theta), (_, got))) in before.iter().zip(s.iter().zip(&after)) {
            for k in 0..xi.len() {
                let want = match kind {
                    ParamKind::Trainable => keep * xi[k] + take * theta[k],
                    ParamKind::Buffer => theta[k],
                };
                let special = match (kind, i) {
                    (ParamKind::Trainable, 0) => got[k].to_bits() == xi[k].to_bits(),
                    (ParamKind::Trainable, 1) => got[k].to_bits() == theta[k].to_bits(),
                    _ => true,
                };
                scalars += 1;
                if want.to_bits() != got[k].to_bits() || !special {
                    mismatches += 1;
                }
            }
        }
    }
    report(
        "EMA exactness",
        mismatches == 0,
        format!("1000 triples, {scalars} scalars, {mismatches} bit mismatches (tau=1 keeps, tau=0 copies)"),
    );
}

struct BankStep {
    proj: Vec<f32>,
    gt: Vec<u16>,
    pred: Vec<u16>,
    conf: Vec<f32>,
    /// Ranking score per position; coarse so ties are common.
    score: Vec<f32>,
}

fn bank_step(rng: &mut ChaCha8Rng, classes: usize, dim: usize, ignore: u16) -> BankStep {
    let n = rng.random_range(0..=24);
    let gt: Vec<u16> = (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                ignore
            } else {
                rng.random_range(0..classes as u16)
            }
        })
        .collect();
    let pred = gt
        .iter()
        .map(|&g| {
            if g != ignore && rng.random_bool(0.7) {
                g
            } else {
                rng.random_range(0..classes as u16)
            }
        })
        .collect();
    BankStep {
        proj: (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        gt,
        pred,
        // Confidences straddle the threshold, including an exact tie with it.
        conf: (0..n)
            .map(|_| *[0.5, 0.94, 0.95, 0.951, 0.99, 1.0].choose(rng).unwrap())
            .collect(),
        score: (0..n).map(|_| rng.random_range(0..4) as f32 / 4.0).collect(),
    }
}

type RefRecord = (Vec<f32>, u16, f32, f32, u64);

/// Plain FIFO-plus-sort model of filter, rank and enqueue.
#[allow(clippy::too_many_arguments)]
fn reference_step(
    queues: &mut [VecDeque<RefRecord>],
    step: &BankStep,
    dim: usize,
    ignore: u16,
    phi: f32,
    fqf: bool,
    quota: usize,
    capacity: usize,
    iter: u64,
) {
    for (class, queue) in queues.iter_mut().enumerate() {
        let mut survivors: Vec<usize> = (0..step.gt.len())
            .filter(|&i| {
                step.gt[i] as usize == class
                    && step.gt[i] != ignore
                    && (!fqf || (step.pred[i] == step.gt[i] && step.conf[i] > phi))
            })
            .collect();
        // Stable sort: equal scores keep position order.
        survivors.sort_by(|&a, &b| step.score[b].partial_cmp(&step.score[a]).unwrap());
        for &i in survivors.iter().take(quota) {
            queue.push_back((
                step.proj[i * dim..(i + 1) * dim].to_vec(),
                class as u16,
                step.conf[i],
                step.score[i],
                iter,
            ));
            if queue.len() > capacity {
                queue.pop_front();
            }
        }
    }
}

#[test]
fn memory_bank_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (dim, ignore, phi) = (4, 255u16, 0.95f32);
    let mut differing = 0;
    let mut stored = 0usize;
    for _ in 0..1000 {
        let classes = rng.random_range(1..=4);
        let capacity = rng.random_range(1..=16usize);
        let quota = per_image_quota(capacity, rng.random_range(1..=4usize));
        let fqf = rng.random_bool(0.8);
        let steps: Vec<BankStep> = (0..rng.random_range(1..=8))
            .map(|_| bank_step(&mut rng, classes, dim, ignore))
            .collect();

        let mut bank = MemoryBank::new(classes, capacity, dim);
        let mut queues = vec![VecDeque::new(); classes];
        for (iter, step) in steps.iter().enumerate() {
            let candidates = quality_filter(
                &step.proj, dim, &step.pred, &step.conf, &step.gt, ignore, phi, classes, fqf,
            )
            .unwrap();
            for (class, cands) in candidates.into_iter().enumerate() {
                let scores: Vec<f32> = cands.iter().map(|c| step.score[c.position]).collect();
                let records = rank_and_select(cands, &scores, quota)
                    .unwrap()
                    .into_iter()
                    .map(|(c, s)| FeatureRecord {
                        vector: c.vector,
                        class_id: class as u16,
                        confidence: c.confidence,
                        rank_score: s,
                        iteration: iter as u64,
                    })
                    .collect();
                bank.enqueue(class, records).unwrap();
            }
            reference_step(&mut queues, step, dim, ignore, phi, fqf, quota, capacity, iter as u64);
        }
        let same = (0..classes).all(|c| {
            let got: Vec<RefRecord> = bank
                .records(c)
                .map(|r| (r.vector.clone(), r.class_id, r.confidence, r.rank_score, r.iteration))
                .collect();
            got == queues[c].iter().cloned().collect::<Vec<_>>()
        });
        stored += bank.total_len();
        if !same {
            differing += 1;
        }
    }
    let ok = differing == 0 && start.elapsed() < Duration::from_secs(30);
    report(
        "memory-bank equivalence",
        ok,
        format!(
            "1000 sequences, {differing} differ from the reference, {stored} records compared, {:?}",
            start.elapsed()
        ),
    );
}

#[test]
fn normalize_weights_mean_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0) * scale).collect();
        let w: Vec<f64> = normalize_weights(&Tensor::from_vec(s, n, &Device::Cpu).unwrap())
            .unwrap()
            .to_vec1()
            .unwrap();
        let mean = w.iter().sum::<f64>() / n as f64;
        worst = worst.max((mean - 1.0).abs());
    }
    let zeros: Vec<f64> = normalize_weights(&Tensor::zeros(5, DType::F64, &Device::Cpu).unwrap())
        .unwrap()
        .to_vec1()
        .unwrap();
    let guarded = zeros.iter().all(|v| v.is_finite());
    report(
        "normalize_weights mean one",
        worst <= 1e-6 && guarded,
        format!("1000 vectors, max |mean - 1| = {worst:.1e}, all-zero input finite: {guarded}"),
    );
}

fn random_labels(rng: &mut ChaCha8Rng, w: usize, h: usize, classes: u16) -> LabelMap {
    LabelMap::from_fn(w, h, |x, y| {
        if rng.random_bool(0.05) {
            255
        } else {
            ((x / 5 + y / 7) as u16 + rng.random_range(0..2)) % classes
        }
    })
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    RgbImage::new(w, h, (0..3 * w * h).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn augmentation_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let policy = AugmentationPolicy::strong();
    let (mut replay_bad, mut mix_bad) = (0, 0);
    for _ in 0..100 {
        let (w, h) = (rng.random_range(16..48), rng.random_range(16..48));
        let crop = (rng.random_range(8..40), rng.random_range(8..40));
        let img = random_image(&mut rng, w, h);
        let lab = random_labels(&mut rng, w, h, 4);
        let t = sample_transform(&policy, &mut rng, (h, w), crop);
        let (_, out, rec) = apply(&t, &img, Some(&lab), 255).unwrap();
        if rec.replay(&lab, None, 255) != out.unwrap() {
            replay_bad += 1;
        }

        let src_img = random_image(&mut rng, w, h);
        let src_lab = random_labels(&mut rng, w, h, 4);
        let (m_img, m_lab, mask) = classmix(&src_img, &src_lab, &img, &lab, &mut rng, 255).unwrap();
        let mut present: Vec<u16> = src_lab.data().iter().copied().filter(|&v| v != 255).collect();
        present.sort_unstable();
        present.dedup();
        // Classes whose pixels were selected; every pixel of such a class must be in the mask.
        let chosen: Vec<u16> = present
            .iter()
            .copied()
            .filter(|&c| (0..w * h).any(|i| mask.data()[i] && src_lab.data()[i] == c))
            .collect();
        let mut ok = chosen.len() == present.len().div_ceil(2);
        for y in 0..h {
            for x in 0..w {
                let take = chosen.contains(&src_lab.get(x, y));
                let (want_px, want_lab) = if take {
                    (src_img.pixel(x, y), src_lab.get(x, y))
                } else {
                    (img.pixel(x, y), lab.get(x, y))
                };
                ok &= mask.get(x, y) == take && m_img.pixel(x, y) == want_px && m_lab.get(x, y) == want_lab;
            }
        }
        if !ok {
            mix_bad += 1;
        }
    }
    report(
        "augmentation consistency",
        replay_bad == 0 && mix_bad == 0,
        format!("100 transforms, {replay_bad} replay mismatches, {mix_bad} ClassMix paste mismatches"),
    );
}

#[test]
fn miou_oracle() {
    let cases: Vec<(Vec<Vec<u64>>, f64)> = vec![
        (vec![vec![1, 1], vec![0, 1]], 0.5),
        (vec![vec![3, 0], vec![0, 5]], 1.0),
        (vec![vec![0, 2], vec![2, 0]], 0.0),
        // IoU 2/(3+3-2), 4/(5+5-4), 3/(4+4-3).
        (
            vec![vec![2, 1, 0], vec![0, 4, 1], vec![1, 0, 3]],
            (0.5 + 4.0 / 6.0 + 0.6) / 3.0,
        ),
        // A class absent from both sides is excluded.
        (
            vec![vec![4, 0, 0], vec![0, 0, 0], vec![2, 0, 2]],
            (4.0 / 6.0 + 0.5) / 2.0,
        ),
    ];
    let mut worst = 0f64;
    for (rows, want) in &cases {
        let got = ConfusionMatrix::from_rows(rows).unwrap().miou().unwrap().0;
        worst = worst.max((got - want).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut additive = true;
    for _ in 0..50 {
        let classes = rng.random_range(2..6);
        let n = rng.random_range(1..500);
        let gt: Vec<u16> = (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    255
                } else {
                    rng.random_range(0..classes as u16)
                }
            })
            .collect();
        let pred: Vec<u16> = (0..n).map(|_| rng.random_range(0..classes as u16)).collect();
        let mut whole = ConfusionMatrix::new(classes);
        whole.accumulate(&pred, &gt, 255).unwrap();
        let mut merged = ConfusionMatrix::new(classes);
        let mut cuts: Vec<usize> = (0..rng.random_range(0..5)).map(|_| rng.random_range(0..=n)).collect();
        cuts.extend([0, n]);
        cuts.sort_unstable();
        for c in cuts.windows(2) {
            let mut part = ConfusionMatrix::new(classes);
            part.accumulate(&pred[c[0]..c[1]], &gt[c[0]..c[1]], 255).unwrap();
            merged.merge(&part).unwrap();
        }
        additive &= merged == whole && merged.miou().unwrap() == whole.miou().unwrap();
    }
    report(
        "mIoU oracle",
        worst <= 1e-9 && additive,
        format!(
            "{} hand cases, max error {worst:.1e}, additivity over 50 random partitions: {additive}",
            cases.len()
        ),
    );
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Variant {
    SupOnly,
    SupContr,
    Full,
}

const TOY_ITERS: u64 = 3000;
const TOY_WARMUP: u64 = 200;

/// The desk-scale configuration shared by every toy run; variants differ
/// only in the loss toggles.
#[allow(clippy::field_reassign_with_default)]
fn toy_config(seed: u64, variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.data.classes = 3;
    cfg.data.labeled_ratio = Ratio::new(1, 20).unwrap();
    cfg.model.width = 16;
    cfg.train.total_iters = TOY_ITERS;
    cfg.train.warmup_iters = TOY_WARMUP;
    cfg.train.crop_size = [64, 64];
    cfg.train.labeled_per_step = 2;
    cfg.train.unlabeled_per_step = 2;
    cfg.train.views = 1;
    cfg.train.lr0 = 0.01;
    // Median-frequency weights compound through the pseudo-labels on ten
    // labeled images and drift the teacher towards foreground.
    cfg.train.class_balancing = false;
    cfg.train.val_every = TOY_ITERS;
    cfg.losses.sup = true;
    cfg.losses.contr = variant != Variant::SupOnly;
    cfg.losses.pseudo = variant == Variant::Full;
    cfg.losses.ent = variant == Variant::Full;
    cfg
}

struct ToyRun {
    miou: f64,
    log: String,
}

fn toy_run(
    train: &semiseg_core::data::Dataset,
    val: &semiseg_core::data::Dataset,
    seed: u64,
    variant: Variant,
) -> ToyRun {
    let cfg = toy_config(seed, variant);
    let ids: Vec<&str> = train.ids().collect();
    let split = split_ids(&ids, cfg.data.labeled_ratio, seed).unwrap();
    assert_eq!(split.labeled_ids.len(), 10);
    let data = TrainData {
        train: train.clone(),
        val: Some(val.clone()),
        split,
        source: None,
    };
    let mut trainer = Trainer::new(cfg, data).unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut log = Vec::new();
    let summary = trainer.run_with_log(&mut log, out.path()).unwrap();
    ToyRun {
        miou: summary.final_miou.expect("validated at the last iteration"),
        log: String::from_utf8(log).unwrap(),
    }
}

fn loss_records(log: &str) -> Vec<LossRecord> {
    log.lines()
        .filter(|l| l.contains("\"l_sup\""))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Synthetic shapes, 3 classes, 200 train / 50 val at 64×64, 10 labeled,
/// 3000 iterations, seeds 0..3, for the supervised baseline, supervised plus
/// contrastive, and the full method. The warmup-gate and determinism checks
/// reuse the full-method logs.
#[test]
fn toy_end_to_end() {
    // Single-threaded kernels, as with the CLI's `--deterministic`.
    std::env::set_var("RAYON_NUM_THREADS", "1");
    let shapes = synthetic::ShapesConfig::default();
    let train = synthetic::generate(&shapes, 200, 1, "train").unwrap();
    let val = synthetic::generate(&shapes, 50, 2, "val").unwrap();
    let start = Instant::now();
    let variants = [Variant::SupOnly, Variant::SupContr, Variant::Full];
    let mut miou = [[0f64; 3]; 3];
    let mut full_logs = Vec::new();
    for seed in 0..3u64 {
        for (v, &variant) in variants.iter().enumerate() {
            let run = toy_run(&train, &val, seed, variant);
            println!("toy seed {seed} {variant:?}: final val mIoU {:.4}", run.miou);
            miou[v][seed as usize] = run.miou;
            if variant == Variant::Full {
                full_logs.push(run.log);
            }
        }
    }
    let elapsed = start.elapsed();
    let mean = |v: usize| miou[v].iter().sum::<f64>() / 3.0;
    let (sup, contr, full) = (mean(0), mean(1), mean(2));
    let within_budget = elapsed < Duration::from_secs(30 * 60);

    // Warmup gate: contrastive and pseudo contributions are exactly zero
    // before warmup ends, and both switch on afterwards.
    let mut gate_ok = true;
    let mut gated_steps = 0;
    for log in &full_logs {
        let records = loss_records(log);
        gate_ok &= records.len() as u64 == TOY_ITERS;
        for r in records.iter().filter(|r| r.iter < TOY_WARMUP) {
            gate_ok &= r.c_contr == 0.0 && r.c_pseudo == 0.0 && r.lambda_contr == 0.0 && r.lambda_pseudo == 0.0;
            gated_steps += 1;
        }
        gate_ok &= records
            .iter()
            .filter(|r| r.iter >= TOY_WARMUP)
            .any(|r| r.c_pseudo > 0.0);
        gate_ok &= records.iter().filter(|r| r.iter >= TOY_WARMUP).any(|r| r.c_contr > 0.0);
    }

    // Determinism: the first full-method run, repeated.
    let again = toy_run(&train, &val, 0, Variant::Full);
    let identical = again.log == full_logs[0];

    let summary = format!(
        "mean final mIoU over 3 seeds: sup-only {sup:.4}, sup+contr {contr:.4}, full {full:.4}; 9 runs in {elapsed:.0?}"
    );
    println!(
        "[{}] toy full method beats sup-only: {summary}",
        if full > sup && within_budget { "PASS" } else { "FAIL" }
    );
    println!(
        "[{}] toy sup+contr beats sup-only: {summary}",
        if contr > sup && within_budget { "PASS" } else { "FAIL" }
    );
    println!(
        "[{}] warmup gate: {gated_steps} warmup steps over 3 full runs with contrastive and pseudo contributions exactly 0",
        if gate_ok { "PASS" } else { "FAIL" }
    );
    println!(
        "[{}] determinism: repeated seed-0 full run {} the loss log ({} bytes)",
        if identical { "PASS" } else { "FAIL" },
        if identical { "reproduces" } else { "does not reproduce" },
        again.log.len()
    );
    assert!(within_budget, "toy runs took {elapsed:?}");
    assert!(full > sup, "{summary}");
    assert!(contr > sup, "{summary}");
    assert!(gate_ok, "warmup gate violated");
    assert!(identical, "repeated run diverged");
}
