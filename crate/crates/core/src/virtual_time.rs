//! Equal-count "virtual time" bins over the week.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SECONDS_PER_WEEK: i64 = 604_800;
pub const DEFAULT_BIN_COUNT: usize = 100;

/// Unix time of Monday 1970-01-05 00:00 UTC.
const MONDAY_ANCHOR: i64 = 4 * 86_400;

/// Seconds since the most recent Monday 00:00 UTC.
pub fn week_offset(ts: i64) -> i64 {
    (ts - MONDAY_ANCHOR).rem_euclid(SECONDS_PER_WEEK)
}

/// Start of the week (Monday 00:00 UTC) containing `ts`.
pub fn week_start(ts: i64) -> i64 {
    ts - week_offset(ts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinScheme {
    anchor: String,
    boundaries_s: Vec<i64>,
}

impl BinScheme {
    /// Builds a scheme from explicit boundaries; `boundaries` must start at 0,
    /// end at one week and be strictly increasing.
    pub fn from_boundaries(boundaries: Vec<i64>) -> Result<Self> {
        let ok = boundaries.len() >= 3
            && boundaries[0] == 0
            && *boundaries.last().unwrap() == SECONDS_PER_WEEK
            && boundaries.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidParameter(
                "bin boundaries must rise strictly from 0 to one week".into(),
            ));
        }
        Ok(Self {
            anchor: "monday_utc".into(),
            boundaries_s: boundaries,
        })
    }

    /// Equal-width bins; useful as a fixed scheme for generators and tests.
    pub fn uniform(bin_count: usize) -> Result<Self> {
        let b = bin_count as i64;
        Self::from_boundaries((0..=b).map(|k| k * SECONDS_PER_WEEK / b).collect())
    }

    pub fn bin_count(&self) -> usize {
        self.boundaries_s.len() - 1
    }

    pub fn boundaries(&self) -> &[i64] {
        &self.boundaries_s
    }

    /// Bin of a week offset in `[0, SECONDS_PER_WEEK)`; bins are left-closed.
    pub fn bin_of_offset(&self, offset: i64) -> usize {
        let inner = &self.boundaries_s[1..self.boundaries_s.len() - 1];
        inner.partition_point(|&b| b <= offset)
    }

    pub fn bin_of(&self, ts: i64) -> usize {
        self.bin_of_offset(week_offset(ts))
    }

    /// Width of each bin in seconds.
    pub fn widths(&self) -> Vec<i64> {
        self.boundaries_s.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Stable content hash used to pair models with the scheme they saw.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.anchor.as_bytes());
        for b in &self.boundaries_s {
            hasher.update(b.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..16])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BinScheme = serde_json::from_str(&s)?;
        if raw.anchor != "monday_utc" {
            return Err(Error::Schema {
                file: path.display().to_string(),
                message: format!("unsupported anchor {:?}", raw.anchor),
            });
        }
        Self::from_boundaries(raw.boundaries_s)
    }
}

/// Fits equal-count bins to the week offsets of `send_times`.
///
/// Cut `k` targets rank `ceil(k n / bins)` in the sorted offsets and is
/// placed on the nearest gap between distinct values, so a run of equal
/// offsets never straddles a boundary. The boundary stored is the first
/// offset of the upper bin. With distinct offsets every bin gets
/// `floor(n / bins)` or `ceil(n / bins)` messages.
pub fn fit_bins(send_times: &[i64], bin_count: usize) -> Result<BinScheme> {
    if bin_count < 2 {
        return Err(Error::InvalidParameter("bin_count must be at least 2".into()));
    }
    if send_times.is_empty() {
        return Err(Error::InsufficientOffsets {
            distinct: 0,
            bins: bin_count,
        });
    }
    let mut offsets: Vec<i64> = send_times.iter().map(|&t| week_offset(t)).collect();
    offsets.sort_unstable();
    let n = offsets.len();

    // gap positions p: offsets[p - 1] < offsets[p]
    let gaps: Vec<usize> = (1..n).filter(|&p| offsets[p - 1] < offsets[p]).collect();
    let distinct = gaps.len() + 1;
    if bin_count > distinct {
        return Err(Error::InsufficientOffsets {
            distinct,
            bins: bin_count,
        });
    }

    let cuts = bin_count - 1;
    let mut boundaries = Vec::with_capacity(bin_count + 1);
    boundaries.push(0);
    let mut lo = 0usize;
    for k in 1..=cuts {
        let target = (k * n).div_ceil(bin_count);
        // leave room for the remaining cuts
        let hi = gaps.len() - (cuts - k);
        let window = &gaps[lo..hi];
        let idx = window.partition_point(|&p| p < target);
        let pick = match (idx.checked_sub(1), window.get(idx)) {
            (Some(below), Some(&above)) => {
                if target - window[below] <= above - target {
                    below
                } else {
                    idx
                }
            }
            (Some(below), None) => below,
            (None, Some(_)) => idx,
            (None, None) => unreachable!("gap window is never empty"),
        };
        boundaries.push(offsets[window[pick]]);
        lo += pick + 1;
    }
    boundaries.push(SECONDS_PER_WEEK);
    BinScheme::from_boundaries(boundaries)
}

pub fn one_hot(bin: usize, bin_count: usize) -> Result<Vec<f64>> {
    if bin >= bin_count {
        return Err(Error::InvalidBin { bin, bin_count });
    }
    let mut v = vec![0.0; bin_count];
    v[bin] = 1.0;
    Ok(v)
}
