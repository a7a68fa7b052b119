use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};

/// Positive rational number written as `num/den` (or a bare integer).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    num: u64,
    den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::Config("ratio denominator must be non-zero".into()));
        }
        Ok(Self { num, den })
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(self * n)`, half rounding up, in exact integer arithmetic.
    pub fn round_mul(&self, n: usize) -> usize {
        let n = n as u128;
        ((2 * self.num as u128 * n + self.den as u128) / (2 * self.den as u128)) as usize
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse ratio `{s}`"));
        match s.trim().split_once('/') {
            Some((a, b)) => Ratio::new(
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ),
            None => Ratio::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

/// Partition of a training set into labeled and unlabeled ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub ratio: Ratio,
    pub seed: u64,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
}

pub fn make_split(dataset: &Dataset, ratio: Ratio, seed: u64) -> Result<SplitSpec> {
    let ids: Vec<&str> = dataset.ids().collect();
    split_ids(&ids, ratio, seed)
}

/// Deterministically selects `max(1, round(ratio * N))` labeled ids.
/// Both id lists keep the input order.
pub fn split_ids(ids: &[&str], ratio: Ratio, seed: u64) -> Result<SplitSpec> {
    if ratio.num == 0 || ratio.num > ratio.den {
        return Err(Error::Config(format!("labeled ratio {ratio} must lie in (0, 1]")));
    }
    if ids.is_empty() {
        return Err(Error::Config("cannot split an empty training set".into()));
    }
    let n_labeled = ratio.round_mul(ids.len()).max(1);
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_labeled = vec![false; ids.len()];
    for &i in &order[..n_labeled] {
        is_labeled[i] = true;
    }
    let (mut labeled_ids, mut unlabeled_ids) = (Vec::new(), Vec::new());
    for (i, id) in ids.iter().enumerate() {
        if is_labeled[i] {
            labeled_ids.push(id.to_string());
        } else {
            unlabeled_ids.push(id.to_string());
        }
    }
    Ok(SplitSpec {
        ratio,
        seed,
        labeled_ids,
        unlabeled_ids,
    })
}

impl SplitSpec {
    pub fn to_text(&self) -> String {
        let mut out = format!("ratio={} seed={}\n", self.ratio, self.seed);
        for id in &self.labeled_ids {
            out.push_str(id);
            out.push_str("\tlabeled\n");
        }
        for id in &self.unlabeled_ids {
            out.push_str(id);
            out.push_str("\tunlabeled\n");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Validation("empty split file".into()))?;
        let (mut ratio, mut seed) = (None, None);
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("ratio", v)) => ratio = Some(v.parse::<Ratio>()?),
                Some(("seed", v)) => {
                    seed = Some(
                        v.parse::<u64>()
                            .map_err(|_| Error::Validation(format!("bad seed `{v}` in split header")))?,
                    )
                }
                _ => return Err(Error::Validation(format!("bad split header `{header}`"))),
            }
        }
        let (Some(ratio), Some(seed)) = (ratio, seed) else {
            return Err(Error::Validation(format!("bad split header `{header}`")));
        };
        let mut spec = SplitSpec {
            ratio,
            seed,
            labeled_ids: Vec::new(),
            unlabeled_ids: Vec::new(),
        };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            match line.split_once('\t') {
                Some((id, "labeled")) => spec.labeled_ids.push(id.to_string()),
                Some((id, "unlabeled")) => spec.unlabeled_ids.push(id.to_string()),
                _ => return Err(Error::Validation(format!("bad split line `{line}`"))),
            }
        }
        Ok(spec)
    }
}
