use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Endless reshuffled pass over a fixed index set.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    items: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(items: Vec<usize>) -> Self {
        Self {
            items,
            order: Vec::new(),
            pos: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<usize> {
        if self.items.is_empty() {
            return None;
        }
        if self.pos == self.order.len() {
            self.order = self.items.clone();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.order[self.pos - 1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Target,
    Source,
}

/// A labeled draw: dataset index and where it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabeledDraw {
    pub index: usize,
    pub domain: Domain,
}

/// Draws labeled and unlabeled indices per step. With a source set the
/// labeled slots alternate target and source draws.
#[derive(Clone, Debug)]
pub struct BatchComposer {
    labeled: EpochSampler,
    unlabeled: EpochSampler,
    source: Option<EpochSampler>,
    slot: u64,
}

impl BatchComposer {
    pub fn new(labeled: Vec<usize>, unlabeled: Vec<usize>, source: Option<Vec<usize>>) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::Config("the labeled split is empty".into()));
        }
        if matches!(&source, Some(s) if s.is_empty()) {
            return Err(Error::Config("the source-domain set is empty".into()));
        }
        Ok(Self {
            labeled: EpochSampler::new(labeled),
            unlabeled: EpochSampler::new(unlabeled),
            source: source.map(EpochSampler::new),
            slot: 0,
        })
    }

    pub fn compose<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        n_labeled: usize,
        n_unlabeled: usize,
    ) -> (Vec<LabeledDraw>, Vec<usize>) {
        let mut labeled = Vec::with_capacity(n_labeled);
        for _ in 0..n_labeled {
            let from_source = self.source.is_some() && self.slot % 2 == 1;
            self.slot += 1;
            let draw = match (&mut self.source, from_source) {
                (Some(src), true) => LabeledDraw {
                    index: src.next(rng).expect("non-empty"),
                    domain: Domain::Source,
                },
                _ => LabeledDraw {
                    index: self.labeled.next(rng).expect("non-empty"),
                    domain: Domain::Target,
                },
            };
            labeled.push(draw);
        }
        let unlabeled = (0..n_unlabeled).filter_map(|_| self.unlabeled.next(rng)).collect();
        (labeled, unlabeled)
    }
}
