use std::fmt::Write as _;

use lcls::cloud::{assemble_capture, filter_duplicates};
use lcls::eco::{
    build_dtm, detect_shco, normalize_heights, point_density_grid, summary_metrics,
    vegetation_histogram, DtmParams, StrataError, DEFAULT_SHCO_SEARCH_MAX_M,
};
use lcls::sim::{parse_scene, run_capture, RigPose};
use lcls::{validate_config, PointCloud, ScanConfig};

const SHRUB_R: f64 = 0.6;

/// Whether a shrub centred at `(x, y)` sits wholly inside a 23° wedge of
/// every 30°, between 3 m and 12 m out.
fn in_shrub_wedge(x: f64, y: f64) -> bool {
    let r = x.hypot(y);
    if !(3.0..=12.0).contains(&r) {
        return false;
    }
    let margin = (SHRUB_R / r).asin().to_degrees();
    let az = x.atan2(y).to_degrees().rem_euclid(30.0);
    (margin..=23.0 - margin).contains(&az)
}

/// Shrub clumps up to 2 m tall with open lanes between them, optionally
/// under floating 8–12 m crowns.
fn plot(with_canopy: bool) -> String {
    let mut s = String::from("ground 0 0 0\n");
    for (x, y, top) in shrubs() {
        let _ = writeln!(
            s,
            "ellipsoid {x} {y} {} {SHRUB_R} {SHRUB_R} {} 60",
            top / 2.0,
            top / 2.0
        );
    }
    if with_canopy {
        for i in -3..=3 {
            for j in -3..=3 {
                let _ = writeln!(
                    s,
                    "ellipsoid {} {} 10 3 3 2 90",
                    i as f64 * 5.0,
                    j as f64 * 5.0
                );
            }
        }
    }
    s
}

fn capture(scene: &str, c: ScanConfig) -> PointCloud {
    let scene = parse_scene(scene).unwrap();
    let v = validate_config(c).unwrap();
    let rec = run_capture(&scene, &RigPose::default(), &v).unwrap();
    filter_duplicates(assemble_capture(&rec).unwrap().cloud)
}

fn heights(cloud: &PointCloud) -> Vec<f64> {
    let dtm = build_dtm(&cloud.points, &DtmParams::default()).unwrap();
    normalize_heights(&cloud.points, &dtm)
}

fn shrubs() -> Vec<(f64, f64, f64)> {
    let n: i32 = 18;
    let mut v = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            let (x, y) = (i as f64 * 0.7, j as f64 * 0.7);
            if in_shrub_wedge(x, y) {
                let top = 1.2 + 0.8 * ((i * 7 + j * 13).rem_euclid(5) as f64 / 4.0);
                v.push((x, y, top));
            }
        }
    }
    v
}

#[test]
fn shrub_layer_covers_sixty_percent() {
    let centres = shrubs();
    let (mut inside, mut covered) = (0u32, 0u32);
    let step = 0.05;
    let mut x = -12.0;
    while x <= 12.0 {
        let mut y = -12.0;
        while y <= 12.0 {
            let r = f64::hypot(x, y);
            if (3.0..=12.0).contains(&r) {
                inside += 1;
                if centres
                    .iter()
                    .any(|&(cx, cy, _)| (x - cx).hypot(y - cy) <= SHRUB_R)
                {
                    covered += 1;
                }
            }
            y += step;
        }
        x += step;
    }
    let cover = covered as f64 / inside as f64;
    assert!((cover - 0.6).abs() < 0.05, "{cover}");
}

#[test]
fn two_strata_plot_separates_near_gap_centre() {
    let cloud = capture(&plot(true), ScanConfig::default());
    let h = heights(&cloud);
    let hist = vegetation_histogram(&h, 0.2).unwrap();
    let shown = hist.displayed();
    let peak_below = shown
        .iter()
        .filter(|b| b.1 <= 2.2)
        .map(|b| b.3)
        .fold(0.0, f64::max);
    let peak_above = shown
        .iter()
        .filter(|b| b.0 >= 7.8)
        .map(|b| b.3)
        .fold(0.0, f64::max);
    let gap = shown.iter().find(|b| (b.0 - 5.0).abs() < 1e-9).unwrap().3;
    assert!(gap < peak_below && gap < peak_above);
    let shco = detect_shco(&hist, DEFAULT_SHCO_SEARCH_MAX_M).unwrap();
    assert!((shco - 5.0).abs() <= 0.3, "{shco}");
}

#[test]
fn treeless_plot_is_not_separable() {
    let cloud = capture(&plot(false), ScanConfig::default());
    let h = heights(&cloud);
    let hist = vegetation_histogram(&h, 0.2).unwrap();
    assert_eq!(
        detect_shco(&hist, DEFAULT_SHCO_SEARCH_MAX_M),
        Err(StrataError::NotSeparable)
    );
    let above: f64 = hist
        .displayed()
        .iter()
        .filter(|b| b.0 >= 2.6 - 1e-9)
        .map(|b| b.3)
        .sum();
    assert_eq!(above, 0.0);
}

/// Crowns on a 4 m lattice: centres 12 m up, 2.6 m wide, 3 m deep, so the
/// trees are 15 m tall.
fn dense_forest() -> String {
    let mut s = String::from("ground 0 0 0\n");
    for i in -5..5 {
        for j in -5..5 {
            let (x, y) = (2.0 + 4.0 * i as f64, 2.0 + 4.0 * j as f64);
            let _ = writeln!(s, "cylinder {x} {y} 0.2 0 12 80");
            let _ = writeln!(s, "ellipsoid {x} {y} 12 2.6 2.6 3 110");
        }
    }
    s
}

#[test]
fn dense_canopy_hides_tree_tops() {
    // closure over the inner plot
    let (mut cells, mut closed) = (0, 0);
    for i in -150..150 {
        for j in -150..150 {
            let (x, y) = (i as f64 * 0.1, j as f64 * 0.1);
            let cx = ((x - 2.0) / 4.0).round() * 4.0 + 2.0;
            let cy = ((y - 2.0) / 4.0).round() * 4.0 + 2.0;
            cells += 1;
            if (x - cx).hypot(y - cy) <= 2.6 {
                closed += 1;
            }
        }
    }
    assert!(closed as f64 / cells as f64 >= 0.9);

    let cloud = capture(&dense_forest(), ScanConfig::default());
    let h = heights(&cloud);
    let summary = summary_metrics(&h, None, None, None);
    let max = summary.max_height_m.unwrap();
    assert!(max < 15.0, "{max}");
    assert!(max > 5.0, "{max}");
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn density_falls_off_with_distance() {
    let scene = "ground 0 0 0\ncylinder 0 0 40 -5 30 90\n";
    let cloud = capture(scene, ScanConfig::default());
    let grid = point_density_grid(&cloud.points, 1.0);
    assert_eq!(grid.total(), cloud.len() as u64);
    let mut ring_count = vec![0u64; 31];
    let mut ring_cells = vec![0u64; 31];
    for r in 0..grid.nrows {
        for c in 0..grid.ncols {
            let x = (grid.col0 + c as i64) as f64 + 0.5;
            let y = (grid.row0 + r as i64) as f64 + 0.5;
            let ring = x.hypot(y).floor() as usize;
            if (1..=30).contains(&ring) {
                ring_count[ring] += grid.counts[r * grid.ncols + c];
                ring_cells[ring] += 1;
            }
        }
    }
    let rings: Vec<f64> = (1..=30).map(|r| r as f64).collect();
    let density: Vec<f64> = (1..=30)
        .map(|r| ring_count[r] as f64 / ring_cells[r] as f64)
        .collect();
    let rho = spearman(&rings, &density);
    assert!(rho < 0.0, "{rho}");
}

#[test]
fn flat_ground_normalizes_to_quantization() {
    let cloud = capture(
        "ground 0 0 0",
        ScanConfig {
            range_noise_sigma_m: 0.0,
            ..ScanConfig::default()
        },
    );
    let dtm = build_dtm(&cloud.points, &DtmParams::default()).unwrap();
    let h = normalize_heights(&cloud.points, &dtm);
    let worst = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst <= 0.002 + 1e-9, "{worst}");
}
