//! Point-density grids and per-plot summary metrics.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::raster::{AsciiGrid, DEFAULT_NODATA};
use super::strata::{Nsr, StrataCounts};
use crate::model::Point;

pub const DEFAULT_DENSITY_CELL_M: f64 = 1.0;

/// Counts per cell `[i·c, (i+1)·c) × [j·c, (j+1)·c)`; row 0 is south.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub col0: i64,
    pub row0: i64,
    pub cell_m: f64,
    pub ncols: usize,
    pub nrows: usize,
    pub counts: Vec<u64>,
}

impl DensityGrid {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count_at(&self, x: f64, y: f64) -> u64 {
        let i = (x / self.cell_m).floor() as i64 - self.col0;
        let j = (y / self.cell_m).floor() as i64 - self.row0;
        if i < 0 || j < 0 || i as usize >= self.ncols || j as usize >= self.nrows {
            return 0;
        }
        self.counts[j as usize * self.ncols + i as usize]
    }

    /// Points per square metre.
    pub fn to_ascii(&self) -> AsciiGrid {
        let area = self.cell_m * self.cell_m;
        let mut values = Vec::with_capacity(self.counts.len());
        for r in (0..self.nrows).rev() {
            for c in 0..self.ncols {
                values.push(self.counts[r * self.ncols + c] as f64 / area);
            }
        }
        AsciiGrid {
            ncols: self.ncols,
            nrows: self.nrows,
            xllcorner: self.col0 as f64 * self.cell_m,
            yllcorner: self.row0 as f64 * self.cell_m,
            cellsize: self.cell_m,
            nodata_value: DEFAULT_NODATA,
            values,
        }
    }
}

fn cell_index(v: f64, cell: f64) -> i64 {
    (v / cell).floor() as i64
}

pub fn point_density_grid(points: &[Point], cell_m: f64) -> DensityGrid {
    assert!(cell_m > 0.0 && cell_m.is_finite(), "cell size must be > 0");
    let finite = |p: &&Point| p.x.is_finite() && p.y.is_finite();
    let (mut i0, mut j0, mut i1, mut j1) = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for p in points.iter().filter(finite) {
        let (i, j) = (cell_index(p.x, cell_m), cell_index(p.y, cell_m));
        i0 = i0.min(i);
        j0 = j0.min(j);
        i1 = i1.max(i);
        j1 = j1.max(j);
    }
    if i0 > i1 {
        return DensityGrid {
            col0: 0,
            row0: 0,
            cell_m,
            ncols: 1,
            nrows: 1,
            counts: vec![0],
        };
    }
    let ncols = (i1 - i0 + 1) as usize;
    let nrows = (j1 - j0 + 1) as usize;
    let counts = points
        .par_chunks(64 * 1024)
        .fold(
            || vec![0u64; ncols * nrows],
            |mut acc, chunk| {
                for p in chunk.iter().filter(finite) {
                    let i = (cell_index(p.x, cell_m) - i0) as usize;
                    let j = (cell_index(p.y, cell_m) - j0) as usize;
                    acc[j * ncols + i] += 1;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; ncols * nrows],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    DensityGrid {
        col0: i0,
        row0: j0,
        cell_m,
        ncols,
        nrows,
        counts,
    }
}

/// Per-plot metrics; fields that cannot be computed are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub point_count: u64,
    pub max_height_m: Option<f64>,
    pub shco_m: Option<f64>,
    pub ngp: u64,
    pub nsp: u64,
    pub ntp: u64,
    pub nsr: Option<f64>,
    pub shannon: Option<f64>,
}

pub fn summary_metrics(
    heights: &[f64],
    strata: Option<(&StrataCounts, f64)>,
    nsr: Option<Nsr>,
    shannon: Option<f64>,
) -> Summary {
    let max_height_m = heights
        .iter()
        .copied()
        .filter(|h| h.is_finite())
        .fold(None, |m: Option<f64>, h| Some(m.map_or(h, |m| m.max(h))));
    let (ngp, nsp, ntp, shco_m) = match strata {
        Some((c, shco)) => (c.ngp, c.nsp, c.ntp, Some(shco)),
        None => (0, 0, 0, None),
    };
    Summary {
        point_count: heights.len() as u64,
        max_height_m,
        shco_m,
        ngp,
        nsp,
        ntp,
        nsr: nsr.map(|n| n.fraction),
        shannon,
    }
}

impl Summary {
    /// `key=value` lines; absent values are written as `none`.
    pub fn to_text(&self) -> String {
        fn opt(v: Option<f64>, decimals: usize) -> String {
            v.map_or_else(|| "none".to_string(), |v| format!("{v:.decimals$}"))
        }
        let mut out = String::new();
        let _ = writeln!(out, "points={}", self.point_count);
        let _ = writeln!(out, "max_height_m={}", opt(self.max_height_m, 3));
        let _ = writeln!(out, "shco_m={}", opt(self.shco_m, 2));
        let _ = writeln!(out, "ngp={}", self.ngp);
        let _ = writeln!(out, "nsp={}", self.nsp);
        let _ = writeln!(out, "ntp={}", self.ntp);
        let _ = writeln!(out, "nsr={}", opt(self.nsr, 6));
        let _ = writeln!(out, "nsr_percent={}", opt(self.nsr.map(|f| f * 100.0), 2));
        let _ = writeln!(out, "shannon={}", opt(self.shannon, 6));
        out
    }
}
