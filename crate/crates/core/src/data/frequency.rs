use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencySource {
    LabeledOnly,
    LabeledPlusPseudo,
}

/// Cumulative per-class pixel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassFrequencyTable {
    counts: Vec<u64>,
    ignore_index: u16,
    pub source: FrequencySource,
}

impl ClassFrequencyTable {
    pub fn new(class_count: usize, ignore_index: u16, source: FrequencySource) -> Self {
        Self {
            counts: vec![0; class_count],
            ignore_index,
            source,
        }
    }

    pub fn from_counts(counts: Vec<u64>, ignore_index: u16, source: FrequencySource) -> Self {
        Self {
            counts,
            ignore_index,
            source,
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn ignore_index(&self) -> u16 {
        self.ignore_index
    }

    /// Adds the occurrences of every class in `labels`. `ignore_index`
    /// pixels (and anything outside the class range) are not counted.
    pub fn update(&mut self, labels: &[u16]) {
        for &v in labels {
            if v != self.ignore_index {
                if let Some(c) = self.counts.get_mut(v as usize) {
                    *c += 1;
                }
            }
        }
    }

    /// Per-class weights `sqrt(f_median / f_c)`.
    ///
    /// The median is taken over the classes that have been observed;
    /// unobserved classes get weight 1. With `balancing` off every weight
    /// is 1.
    pub fn class_weights(&self, balancing: bool) -> Result<Vec<f64>> {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return Err(Error::Degenerate(
                "class weights need at least one counted pixel".into(),
            ));
        }
        if !balancing {
            return Ok(vec![1.0; self.counts.len()]);
        }
        let freqs: Vec<f64> = self.counts.iter().map(|&c| c as f64 / total as f64).collect();
        let mut observed: Vec<f64> = freqs.iter().copied().filter(|&f| f > 0.0).collect();
        observed.sort_by(f64::total_cmp);
        let mid = observed.len() / 2;
        let median = if observed.len() % 2 == 1 {
            observed[mid]
        } else {
            0.5 * (observed[mid - 1] + observed[mid])
        };
        Ok(freqs
            .iter()
            .map(|&f| if f > 0.0 { (median / f).sqrt() } else { 1.0 })
            .collect())
    }
}
