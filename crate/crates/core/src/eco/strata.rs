//! Height histograms, Shannon height diversity, shrub cut-off detection and
//! the shrub-return ratio.

use std::fmt::Write as _;

use thiserror::Error;

/// Width of the excluded ground bin and default histogram bin.
pub const GROUND_BIN_M: f64 = 0.2;
pub const DEFAULT_CLASS_M: f64 = 0.5;
pub const DEFAULT_SHCO_SEARCH_MAX_M: f64 = 6.0;
/// The valley must fall to at most this fraction of the lower flanking peak.
pub const SHCO_MAX_VALLEY_RATIO: f64 = 0.5;

/// Absorbs float error when a height sits exactly on a bin edge.
const EDGE_EPS: f64 = 1e-9;

fn bin_index(h: f64, width: f64) -> usize {
    (h / width + EDGE_EPS).floor().max(0.0) as usize
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrataError {
    #[error("bin width must be > 0, got {0}")]
    BadWidth(f64),
    #[error("no points at or above the ground bin")]
    NoVegetation,
    #[error("no shrub or ground points")]
    NoShrubOrGround,
    #[error("shrub cut-off must be > 0.2 m, got {0}")]
    BadShco(f64),
    #[error("histogram shows no separable strata")]
    NotSeparable,
}

/// Point share per height bin `[k·w, (k+1)·w)`; bin 0 (the ground bin) is
/// counted in the total but not displayed.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightHistogram {
    pub bin_m: f64,
    /// `counts[k]` for bin `k`, including `k = 0`.
    pub counts: Vec<u64>,
    pub total_points: u64,
}

impl HeightHistogram {
    pub fn ground_count(&self) -> u64 {
        self.counts.first().copied().unwrap_or(0)
    }

    pub fn percent(&self, k: usize) -> f64 {
        if self.total_points == 0 {
            return 0.0;
        }
        self.counts.get(k).copied().unwrap_or(0) as f64 / self.total_points as f64 * 100.0
    }

    /// `(low, high, count, percent)` for every displayed bin up to the last
    /// non-empty one.
    pub fn displayed(&self) -> Vec<(f64, f64, u64, f64)> {
        let last = self.counts.iter().rposition(|&c| c > 0).unwrap_or(0);
        (1..=last)
            .map(|k| {
                (
                    k as f64 * self.bin_m,
                    (k + 1) as f64 * self.bin_m,
                    self.counts[k],
                    self.percent(k),
                )
            })
            .collect()
    }

    pub fn displayed_percent_total(&self) -> f64 {
        (1..self.counts.len()).map(|k| self.percent(k)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low_m,bin_high_m,count,percent\n");
        for (lo, hi, n, pct) in self.displayed() {
            let _ = writeln!(out, "{lo:.2},{hi:.2},{n},{pct:.6}");
        }
        out
    }
}

pub fn vegetation_histogram(heights: &[f64], bin_m: f64) -> Result<HeightHistogram, StrataError> {
    if !(bin_m > 0.0 && bin_m.is_finite()) {
        return Err(StrataError::BadWidth(bin_m));
    }
    let mut counts = vec![0u64; 1];
    for &h in heights {
        let k = bin_index(h, bin_m);
        if k >= counts.len() {
            counts.resize(k + 1, 0);
        }
        counts[k] += 1;
    }
    Ok(HeightHistogram {
        bin_m,
        counts,
        total_points: heights.len() as u64,
    })
}

/// `H = −Σ p ln p` over non-empty counts.
pub fn shannon_from_counts(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    // a single class yields -0.0
    h.max(0.0)
}

/// Shannon index over `class_m` height classes of non-ground points
/// (`h ≥ 0.2 m`).
pub fn shannon_index(heights: &[f64], class_m: f64) -> Result<f64, StrataError> {
    if !(class_m > 0.0 && class_m.is_finite()) {
        return Err(StrataError::BadWidth(class_m));
    }
    let mut counts: Vec<u64> = Vec::new();
    let mut any = false;
    for &h in heights {
        if h + EDGE_EPS < GROUND_BIN_M {
            continue;
        }
        any = true;
        let k = bin_index(h, class_m);
        if k >= counts.len() {
            counts.resize(k + 1, 0);
        }
        counts[k] += 1;
    }
    if !any {
        return Err(StrataError::NoVegetation);
    }
    Ok(shannon_from_counts(&counts))
}

/// Centred moving average, shrinking at the ends.
pub fn smooth3(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

fn local_maxima(s: &[f64]) -> Vec<usize> {
    let n = s.len();
    (0..n)
        .filter(|&i| {
            let left = if i == 0 { f64::NEG_INFINITY } else { s[i - 1] };
            let right = if i + 1 == n {
                f64::NEG_INFINITY
            } else {
                s[i + 1]
            };
            s[i] > 0.0 && s[i] > left && s[i] >= right
        })
        .collect()
}

/// Shrub height cut-off: the upper edge of the deepest valley in the
/// smoothed histogram between the first peak above the ground bin and the
/// tallest peak above it. A flat-bottomed valley resolves to its middle
/// bin. The valley must start below `search_max_m` and drop to at most half
/// of the lower flanking peak.
pub fn detect_shco(hist: &HeightHistogram, search_max_m: f64) -> Result<f64, StrataError> {
    let w = hist.bin_m;
    // displayed bins only: index j ↔ bin j + 1
    let pct: Vec<f64> = (1..hist.counts.len()).map(|k| hist.percent(k)).collect();
    if pct.len() < 3 {
        return Err(StrataError::NotSeparable);
    }
    let s = smooth3(&pct);
    let maxima = local_maxima(&s);
    let Some(&first) = maxima.first() else {
        return Err(StrataError::NotSeparable);
    };
    let upper = maxima
        .iter()
        .copied()
        .filter(|&j| j > first + 1)
        .max_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a)))
        .ok_or(StrataError::NotSeparable)?;

    let valley = &s[first + 1..upper];
    let lowest = valley.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * s[first].max(s[upper]);
    // first run of bins at the minimum
    let start = valley.iter().position(|&v| v <= lowest + tol).unwrap();
    let len = valley[start..]
        .iter()
        .take_while(|&&v| v <= lowest + tol)
        .count();
    let j = first + 1 + start + (len - 1) / 2;

    let floor_edge = (first + 1 + start + 1) as f64 * w;
    let peak = s[first].min(s[upper]);
    if floor_edge > search_max_m + EDGE_EPS || lowest > SHCO_MAX_VALLEY_RATIO * peak {
        return Err(StrataError::NotSeparable);
    }
    // displayed index j is bin j + 1, whose upper edge is (j + 2)·w
    Ok((j + 2) as f64 * w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StrataCounts {
    /// `0 ≤ h < 0.2`
    pub ngp: u64,
    /// `0.2 ≤ h ≤ shco`
    pub nsp: u64,
    /// `h > shco`
    pub ntp: u64,
}

/// Shrub-return ratio `NSP / (NSP + NGP)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nsr {
    pub fraction: f64,
}

impl Nsr {
    pub fn percent(&self) -> f64 {
        self.fraction * 100.0
    }

    pub fn percent_rounded(&self) -> u32 {
        self.percent().round() as u32
    }
}

pub fn nsr_from_counts(nsp: u64, ngp: u64) -> Result<Nsr, StrataError> {
    let denom = nsp + ngp;
    if denom == 0 {
        return Err(StrataError::NoShrubOrGround);
    }
    Ok(Nsr {
        fraction: nsp as f64 / denom as f64,
    })
}

pub fn classify(heights: &[f64], shco_m: f64) -> Result<StrataCounts, StrataError> {
    if !(shco_m > GROUND_BIN_M) {
        return Err(StrataError::BadShco(shco_m));
    }
    let mut c = StrataCounts::default();
    for &h in heights {
        if h < 0.0 {
            continue;
        }
        if h + EDGE_EPS < GROUND_BIN_M {
            c.ngp += 1;
        } else if h <= shco_m + EDGE_EPS {
            c.nsp += 1;
        } else {
            c.ntp += 1;
        }
    }
    Ok(c)
}

pub fn classify_and_nsr(heights: &[f64], shco_m: f64) -> Result<(StrataCounts, Nsr), StrataError> {
    let counts = classify(heights, shco_m)?;
    let nsr = nsr_from_counts(counts.nsp, counts.ngp)?;
    Ok((counts, nsr))
}
