//! Per-layer magnitude top-k selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamVector, SparseUpdate};

/// Percentage of entries dropped per layer, `0 <= R < 100`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SparsifyConfig {
    drop_ratio: f64,
}

impl SparsifyConfig {
    pub fn new(drop_ratio: f64) -> Result<Self> {
        if !drop_ratio.is_finite() || !(0.0..100.0).contains(&drop_ratio) {
            return Err(Error::Config(format!(
                "drop ratio must lie in [0, 100), got {drop_ratio}"
            )));
        }
        Ok(Self { drop_ratio })
    }

    pub fn dense() -> Self {
        Self { drop_ratio: 0.0 }
    }

    pub fn drop_ratio(&self) -> f64 {
        self.drop_ratio
    }

    /// Number of entries kept in a layer of `n` elements: `ceil(n * (100 - R) / 100)`.
    pub fn keep_count(&self, n: usize) -> usize {
        if n == 0 {
            return 0;
        }
        let exact = n as f64 * (100.0 - self.drop_ratio) / 100.0;
        // absorb representation error in R (e.g. 100 - 99.9) before rounding up
        let k = (exact - 1e-9).ceil();
        (k.max(1.0) as usize).min(n)
    }
}

impl TryFrom<f64> for SparsifyConfig {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<SparsifyConfig> for f64 {
    fn from(cfg: SparsifyConfig) -> f64 {
        cfg.drop_ratio
    }
}

/// Positions (ascending) of the `keep_count(len)` largest-magnitude nonzero values.
/// Ties are broken towards the lower index.
pub fn select_topk(values: &[f64], cfg: &SparsifyConfig) -> Vec<usize> {
    let k = cfg.keep_count(values.len());
    let mut candidates: Vec<usize> = (0..values.len()).filter(|&i| values[i] != 0.0).collect();
    if candidates.len() > k {
        let by_magnitude = |a: &usize, b: &usize| values[*b].abs().total_cmp(&values[*a].abs()).then_with(|| a.cmp(b));
        candidates.select_nth_unstable_by(k - 1, by_magnitude);
        candidates.truncate(k);
    }
    candidates.sort_unstable();
    candidates
}

/// Flat indices selected in every layer of `v`.
pub fn select_mask(v: &ParamVector, cfg: &SparsifyConfig) -> Vec<u32> {
    let mut mask = Vec::new();
    for range in v.partition().ranges() {
        let start = range.start;
        mask.extend(
            select_topk(&v.as_slice()[range], cfg)
                .into_iter()
                .map(|i| (start + i) as u32),
        );
    }
    mask
}

fn gather(v: &ParamVector, mask: &[u32]) -> SparseUpdate {
    let values = mask.iter().map(|&i| v.get(i as usize)).collect();
    SparseUpdate::from_sorted_unchecked(mask.to_vec(), values)
}

/// Splits `v` into the selected entries and the remainder.
/// `densify(g) + rest == v` holds exactly.
pub fn split_residual(v: &ParamVector, cfg: &SparsifyConfig) -> (SparseUpdate, ParamVector) {
    let mask = select_mask(v, cfg);
    let g = gather(v, &mask);
    let mut rest = v.clone();
    let values = rest.values_mut();
    for &i in &mask {
        values[i as usize] = 0.0;
    }
    (g, rest)
}

/// Velocity split with a caller-chosen mask: masked entries are emitted and kept,
/// every other entry is divided by `momentum`.
///
/// `mask` must be strictly increasing. Masked zeros are not emitted.
pub fn split_samomentum_masked(u: &ParamVector, mask: &[u32], momentum: f64) -> Result<(SparseUpdate, ParamVector)> {
    check_momentum(momentum)?;
    if let Some(pos) = mask.windows(2).position(|w| w[0] >= w[1]) {
        return Err(Error::InvariantViolation(format!(
            "mask not strictly increasing at {}",
            pos + 1
        )));
    }
    if let Some(&last) = mask.last() {
        if last as usize >= u.len() {
            return Err(Error::IndexOutOfBounds {
                index: last,
                len: u.len(),
            });
        }
    }
    let (indices, values): (Vec<u32>, Vec<f64>) = mask
        .iter()
        .map(|&i| (i, u.get(i as usize)))
        .filter(|(_, v)| *v != 0.0)
        .unzip();
    let g = SparseUpdate::from_sorted_unchecked(indices, values);

    let mut rescaled = u.clone();
    let values = rescaled.values_mut();
    let mut next = mask.iter().peekable();
    for (i, x) in values.iter_mut().enumerate() {
        if next.peek().is_some_and(|&&m| m as usize == i) {
            next.next();
            continue;
        }
        *x /= momentum;
        if !x.is_finite() {
            return Err(Error::NumericOverflow { index: i });
        }
    }
    Ok((g, rescaled))
}

/// Top-k velocity split used by sparsification-aware momentum.
pub fn split_samomentum(u: &ParamVector, cfg: &SparsifyConfig, momentum: f64) -> Result<(SparseUpdate, ParamVector)> {
    check_momentum(momentum)?;
    let mask = select_mask(u, cfg);
    split_samomentum_masked(u, &mask, momentum)
}

pub(crate) fn check_momentum(m: f64) -> Result<()> {
    if m > 0.0 && m < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "sparsification-aware momentum needs 0 < m < 1, got {m}"
        )))
    }
}
