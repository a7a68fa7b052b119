//! Class-wise FIFO memory bank of high-quality teacher projections from
//! labeled images, with the quality filter and attention-ranked selection
//! that decide what gets stored.

use std::collections::VecDeque;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub vector: Vec<f32>,
    pub class_id: u16,
    pub confidence: f32,
    pub rank_score: f32,
    pub iteration: u64,
}

/// A feature that survived the quality filter, with its grid position.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub position: usize,
    pub vector: Vec<f32>,
    pub confidence: f32,
}

/// Keeps the grid positions where the prediction equals the (non-ignored)
/// ground truth with confidence strictly above `threshold`, grouped by
/// ground-truth class. `projections` is row-major `(positions, dim)`.
///
/// With `enabled == false` only the ignore test is applied.
#[allow(clippy::too_many_arguments)]
pub fn quality_filter(
    projections: &[f32],
    dim: usize,
    pred_argmax: &[u16],
    pred_confidence: &[f32],
    gt_labels: &[u16],
    ignore_index: u16,
    threshold: f32,
    classes: usize,
    enabled: bool,
) -> Result<Vec<Vec<Candidate>>> {
    let n = gt_labels.len();
    if pred_argmax.len() != n || pred_confidence.len() != n || projections.len() != n * dim {
        return Err(Error::Validation(format!(
            "quality filter inputs disagree: {} labels, {} predictions, {} confidences, {} projection values (dim {dim})",
            n,
            pred_argmax.len(),
            pred_confidence.len(),
            projections.len()
        )));
    }
    let mut out = vec![Vec::new(); classes];
    for i in 0..n {
        let gt = gt_labels[i];
        if gt == ignore_index || gt as usize >= classes {
            continue;
        }
        if enabled && !(pred_argmax[i] == gt && pred_confidence[i] > threshold) {
            continue;
        }
        out[gt as usize].push(Candidate {
            position: i,
            vector: projections[i * dim..(i + 1) * dim].to_vec(),
            confidence: pred_confidence[i],
        });
    }
    Ok(out)
}

/// Vectors added per image, per class and per iteration:
/// `max(1, floor(capacity / n_labeled))`.
pub fn per_image_quota(capacity: usize, n_labeled: usize) -> usize {
    (capacity / n_labeled.max(1)).max(1)
}

/// Indices of the `k` highest scores; ties go to the earlier index.
pub fn top_k_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// The `k` candidates with the highest attention scores, best first.
pub fn rank_and_select(candidates: Vec<Candidate>, scores: &[f32], k: usize) -> Result<Vec<(Candidate, f32)>> {
    if candidates.len() != scores.len() {
        return Err(Error::Validation(format!(
            "{} candidates but {} scores",
            candidates.len(),
            scores.len()
        )));
    }
    let keep = top_k_indices(scores, k);
    let mut slots: Vec<Option<Candidate>> = candidates.into_iter().map(Some).collect();
    Ok(keep
        .into_iter()
        .map(|i| (slots[i].take().expect("unique index"), scores[i]))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    queues: Vec<VecDeque<FeatureRecord>>,
}

impl MemoryBank {
    pub fn new(classes: usize, capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            queues: (0..classes).map(|_| VecDeque::with_capacity(capacity)).collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.queues.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self, class: usize) -> usize {
        self.queues.get(class).map_or(0, VecDeque::len)
    }

    pub fn total_len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    pub fn records(&self, class: usize) -> impl Iterator<Item = &FeatureRecord> {
        self.queues.get(class).into_iter().flatten()
    }

    /// Appends in order, evicting the oldest entries beyond capacity.
    pub fn enqueue(&mut self, class: usize, records: Vec<FeatureRecord>) -> Result<()> {
        let capacity = self.capacity;
        let dim = self.dim;
        let queue = self
            .queues
            .get_mut(class)
            .ok_or_else(|| Error::Lookup(format!("bank has no class {class}")))?;
        for r in records {
            if r.class_id as usize != class || r.vector.len() != dim {
                return Err(Error::Validation(format!(
                    "record for class {} with {} values pushed to class {class} queue of dim {dim}",
                    r.class_id,
                    r.vector.len()
                )));
            }
            queue.push_back(r);
            while queue.len() > capacity {
                queue.pop_front();
            }
        }
        Ok(())
    }

    /// Snapshot of the stored vectors of `class`, oldest first.
    pub fn targets(&self, class: usize) -> Vec<Vec<f32>> {
        self.records(class).map(|r| r.vector.clone()).collect()
    }

    /// Row-major `(count, dim)` copy of the stored vectors of `class`.
    pub fn targets_flat(&self, class: usize) -> (Vec<f32>, usize) {
        let mut flat = Vec::with_capacity(self.len(class) * self.dim);
        for r in self.records(class) {
            flat.extend_from_slice(&r.vector);
        }
        (flat, self.len(class))
    }

    /// Binary layout: `classes, capacity, dim` as u32, then per class a u32
    /// count followed by records of `dim` f32 values, confidence (f32),
    /// rank score (f32) and iteration (u64). Little-endian throughout.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_u32::<LittleEndian>(self.queues.len() as u32)?;
        w.write_u32::<LittleEndian>(self.capacity as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        for q in &self.queues {
            w.write_u32::<LittleEndian>(q.len() as u32)?;
            for r in q {
                for &v in &r.vector {
                    w.write_f32::<LittleEndian>(v)?;
                }
                w.write_f32::<LittleEndian>(r.confidence)?;
                w.write_f32::<LittleEndian>(r.rank_score)?;
                w.write_u64::<LittleEndian>(r.iteration)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let classes = r.read_u32::<LittleEndian>()? as usize;
        let capacity = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let mut bank = MemoryBank::new(classes, capacity, dim);
        for (c, queue) in bank.queues.iter_mut().enumerate() {
            let count = r.read_u32::<LittleEndian>()? as usize;
            if count > capacity {
                return Err(Error::Checkpoint(format!(
                    "class {c} holds {count} records, capacity is {capacity}"
                )));
            }
            for _ in 0..count {
                let mut vector = vec![0f32; dim];
                r.read_f32_into::<LittleEndian>(&mut vector)?;
                queue.push_back(FeatureRecord {
                    vector,
                    class_id: c as u16,
                    confidence: r.read_f32::<LittleEndian>()?,
                    rank_score: r.read_f32::<LittleEndian>()?,
                    iteration: r.read_u64::<LittleEndian>()?,
                });
            }
        }
        Ok(bank)
    }
}
