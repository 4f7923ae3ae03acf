//! Gridded ground model and height normalization.
//!
//! Each cell takes the mean of its points lying within `ground_band_m` of
//! the cell minimum. Cells standing well above a nearby cell (a steeper
//! rise than `max_slope` plus `spike_base_m`) are treated as vegetation
//! tops and dropped. Empty cells inherit the nearest filled cell; queries
//! interpolate bilinearly between cell centres.

use std::collections::VecDeque;

use rayon::prelude::*;
use thiserror::Error;

use super::raster::{AsciiGrid, DEFAULT_NODATA};
use crate::model::Point;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DtmError {
    #[error("empty cloud")]
    EmptyCloud,
    #[error("cell size must be > 0, got {0}")]
    BadCell(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtmParams {
    pub cell_m: f64,
    pub ground_band_m: f64,
    pub spike_window_m: f64,
    pub spike_base_m: f64,
    pub max_slope: f64,
}

impl Default for DtmParams {
    fn default() -> Self {
        Self {
            cell_m: 0.5,
            ground_band_m: 0.15,
            spike_window_m: 10.0,
            spike_base_m: 0.25,
            max_slope: 0.3,
        }
    }
}

impl DtmParams {
    pub fn with_cell(cell_m: f64) -> Self {
        Self {
            cell_m,
            ..Self::default()
        }
    }
}

/// Row-major ground elevations; row 0 is the southernmost row.
#[derive(Debug, Clone, PartialEq)]
pub struct DtmGrid {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_m: f64,
    pub ncols: usize,
    pub nrows: usize,
    pub values: Vec<f64>,
    /// True where the value came from points in that cell.
    pub measured: Vec<bool>,
}

/// Lower-left corner and dimensions of the grid covering `points`.
pub(crate) fn grid_extent(points: &[Point], cell: f64) -> (f64, f64, usize, usize) {
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let ox = (x0 / cell).floor() * cell;
    let oy = (y0 / cell).floor() * cell;
    let ncols = ((x1 - ox) / cell).floor() as usize + 1;
    let nrows = ((y1 - oy) / cell).floor() as usize + 1;
    (ox, oy, ncols, nrows)
}

impl DtmGrid {
    fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let c = ((x - self.origin_x) / self.cell_m).floor();
        let r = ((y - self.origin_y) / self.cell_m).floor();
        (
            (c.max(0.0) as usize).min(self.ncols - 1),
            (r.max(0.0) as usize).min(self.nrows - 1),
        )
    }

    pub fn value(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    /// Ground elevation at `(x, y)`; clamps to the edge outside the grid.
    pub fn elevation_at(&self, x: f64, y: f64) -> f64 {
        let axis = |v: f64, origin: f64, n: usize| -> (usize, usize, f64) {
            let f = (v - origin) / self.cell_m - 0.5;
            if f <= 0.0 || n == 1 {
                return (0, 0, 0.0);
            }
            let i0 = (f.floor() as usize).min(n - 1);
            if i0 >= n - 1 {
                return (n - 1, n - 1, 0.0);
            }
            (i0, i0 + 1, f - i0 as f64)
        };
        let (c0, c1, tx) = axis(x, self.origin_x, self.ncols);
        let (r0, r1, ty) = axis(y, self.origin_y, self.nrows);
        let v00 = self.value(c0, r0);
        let v10 = self.value(c1, r0);
        let v01 = self.value(c0, r1);
        let v11 = self.value(c1, r1);
        let south = v00 + (v10 - v00) * tx;
        let north = v01 + (v11 - v01) * tx;
        south + (north - south) * ty
    }

    pub fn to_ascii(&self) -> AsciiGrid {
        let mut values = Vec::with_capacity(self.values.len());
        for row in (0..self.nrows).rev() {
            values.extend_from_slice(&self.values[row * self.ncols..(row + 1) * self.ncols]);
        }
        AsciiGrid {
            ncols: self.ncols,
            nrows: self.nrows,
            xllcorner: self.origin_x,
            yllcorner: self.origin_y,
            cellsize: self.cell_m,
            nodata_value: DEFAULT_NODATA,
            values,
        }
    }
}

pub fn build_dtm(points: &[Point], params: &DtmParams) -> Result<DtmGrid, DtmError> {
    if points.is_empty() {
        return Err(DtmError::EmptyCloud);
    }
    let cell = params.cell_m;
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(DtmError::BadCell(cell));
    }
    let (ox, oy, ncols, nrows) = grid_extent(points, cell);
    let mut grid = DtmGrid {
        origin_x: ox,
        origin_y: oy,
        cell_m: cell,
        ncols,
        nrows,
        values: vec![f64::NAN; ncols * nrows],
        measured: vec![false; ncols * nrows],
    };
    let idx: Vec<usize> = points
        .iter()
        .map(|p| {
            let (c, r) = grid.cell_of(p.x, p.y);
            r * ncols + c
        })
        .collect();

    let mut min = vec![f64::INFINITY; ncols * nrows];
    for (p, &i) in points.iter().zip(&idx) {
        min[i] = min[i].min(p.z);
    }
    let mut sum = vec![0.0; ncols * nrows];
    let mut count = vec![0usize; ncols * nrows];
    for (p, &i) in points.iter().zip(&idx) {
        if p.z <= min[i] + params.ground_band_m {
            sum[i] += p.z;
            count[i] += 1;
        }
    }
    let ground: Vec<Option<f64>> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();

    // drop cells rising too steeply above any measured cell nearby
    let k = (params.spike_window_m / cell).ceil() as isize;
    let is_spike = |i: usize, v: f64| -> bool {
        let (r, c) = ((i / ncols) as isize, (i % ncols) as isize);
        for dr in -k..=k {
            let rr = r + dr;
            if rr < 0 || rr >= nrows as isize {
                continue;
            }
            for dc in -k..=k {
                let cc = c + dc;
                if cc < 0 || cc >= ncols as isize || (dr == 0 && dc == 0) {
                    continue;
                }
                if let Some(n) = ground[rr as usize * ncols + cc as usize] {
                    let dist = ((dr * dr + dc * dc) as f64).sqrt() * cell;
                    if v - n > params.spike_base_m + params.max_slope * dist {
                        return true;
                    }
                }
            }
        }
        false
    };
    let kept: Vec<Option<f64>> = ground
        .par_iter()
        .enumerate()
        .map(|(i, g)| g.filter(|&v| !is_spike(i, v)))
        .collect();
    for (i, v) in kept.into_iter().enumerate() {
        if let Some(v) = v {
            grid.values[i] = v;
            grid.measured[i] = true;
        }
    }
    if !grid.measured.iter().any(|&m| m) {
        // every cell looked like a spike; fall back to raw estimates
        for (i, g) in ground.iter().enumerate() {
            if let Some(v) = g {
                grid.values[i] = *v;
                grid.measured[i] = true;
            }
        }
    }
    fill_nearest(&mut grid);
    Ok(grid)
}

/// Multi-source breadth-first fill over 8-neighbours.
fn fill_nearest(grid: &mut DtmGrid) {
    let (ncols, nrows) = (grid.ncols, grid.nrows);
    let mut queue: VecDeque<usize> = (0..grid.values.len())
        .filter(|&i| grid.measured[i])
        .collect();
    while let Some(i) = queue.pop_front() {
        let (r, c) = ((i / ncols) as isize, (i % ncols) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= nrows as isize || cc >= ncols as isize {
                    continue;
                }
                let j = rr as usize * ncols + cc as usize;
                if grid.values[j].is_nan() {
                    grid.values[j] = grid.values[i];
                    queue.push_back(j);
                }
            }
        }
    }
}

/// Height above ground per point; values below the model clamp to 0.
pub fn normalize_heights(points: &[Point], dtm: &DtmGrid) -> Vec<f64> {
    points
        .iter()
        .map(|p| (p.z - dtm.elevation_at(p.x, p.y)).max(0.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, y: f64, z: f64) -> Point {
        Point {
            x,
            y,
            z,
            intensity: 0,
            timestamp_us: 0,
        }
    }

    fn lattice(f: impl Fn(f64, f64) -> f64, n: usize, step: f64) -> Vec<Point> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (i as f64 * step - 5.0, j as f64 * step);
                v.push(pt(x, y, f(x, y)));
            }
        }
        v
    }

    #[test]
    fn flat_plane() {
        let pts = lattice(|_, _| 0.0, 60, 0.2);
        let dtm = build_dtm(&pts, &DtmParams::default()).unwrap();
        assert!(dtm.values.iter().all(|v| v.abs() < 1e-12));
        assert!(normalize_heights(&pts, &dtm).iter().all(|h| *h == 0.0));
    }

    #[test]
    fn sloped_plane() {
        let pts = lattice(|_, y| 0.1 * y, 80, 0.2);
        let dtm = build_dtm(&pts, &DtmParams::default()).unwrap();
        let z = dtm.elevation_at(0.0, 10.0);
        assert!((z - 1.0).abs() <= 0.5 / 2.0 * 0.1, "{z}");
    }

    #[test]
    fn single_point() {
        let dtm = build_dtm(&[pt(3.3, -2.1, 7.5)], &DtmParams::default()).unwrap();
        assert_eq!((dtm.ncols, dtm.nrows), (1, 1));
        assert_eq!(dtm.elevation_at(100.0, 100.0), 7.5);
    }

    #[test]
    fn empty_cloud_rejected() {
        assert_eq!(
            build_dtm(&[], &DtmParams::default()),
            Err(DtmError::EmptyCloud)
        );
        assert!(build_dtm(&[pt(0.0, 0.0, 0.0)], &DtmParams::with_cell(0.0)).is_err());
    }

    #[test]
    fn heights_and_clamp() {
        let mut pts = lattice(|_, _| 0.2, 30, 0.2);
        pts.push(pt(0.0, 2.0, 8.2));
        pts.push(pt(0.1, 2.0, 0.17));
        let dtm = build_dtm(&pts, &DtmParams::default()).unwrap();
        let h = normalize_heights(&pts, &dtm);
        assert!((h[h.len() - 2] - 8.0).abs() < 0.01);
        assert_eq!(h[h.len() - 1], 0.0);
    }

    #[test]
    fn shrub_cells_are_refilled_from_ground() {
        let mut pts = lattice(|_, _| 0.0, 60, 0.2);
        // a 1 m thick blob hiding a 1.5 m wide patch of ground
        pts.retain(|p| !(p.x.abs() < 0.75 && (p.y - 5.0).abs() < 0.75));
        for i in 0..15 {
            for j in 0..15 {
                pts.push(pt(-0.7 + i as f64 * 0.1, 4.3 + j as f64 * 0.1, 1.0));
            }
        }
        let dtm = build_dtm(&pts, &DtmParams::default()).unwrap();
        assert!(dtm.elevation_at(0.0, 5.0).abs() < 1e-9);
    }

    #[test]
    fn ascii_rows_run_north_to_south() {
        let pts = vec![pt(0.1, 0.1, 1.0), pt(0.1, 1.1, 2.0)];
        let dtm = build_dtm(
            &pts,
            &DtmParams {
                spike_base_m: 10.0,
                ..DtmParams::with_cell(1.0)
            },
        )
        .unwrap();
        let g = dtm.to_ascii();
        assert_eq!((g.ncols, g.nrows), (1, 2));
        assert_eq!(g.values, vec![2.0, 1.0]);
    }
}
