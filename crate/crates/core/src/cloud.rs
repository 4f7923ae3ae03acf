//! Capture → corrected point cloud.
//!
//! The laser head spins in a vertical plane. A return at vertical angle `α`
//! on fan channel `i` with the table at `M` lies at horizontal azimuth
//! `φ = M + ω_i` (clockwise from `+y`):
//!
//! ```text
//! x = d·cos α·sin φ,  y = d·cos α·cos φ,  z = d·sin α
//! ```
//!
//! For `α` past 90° the point falls on the far side (`φ + 180°`), so a 180°
//! table rotation already covers every azimuth.

use std::collections::HashSet;
use std::io::{self, BufRead, Write};

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::imu::{calibrate_drift, settle_tilt, DriftBias, ImuError, Settled};
use crate::model::{
    beam_offset_mdeg, mdeg_to_deg, normalize_heading, Attitude, CloudMeta, ConfigError, GeoFix,
    Point, PointCloud, ScanConfig, ValidatedConfig, BEAMS, FAN_SPACING_DEG,
};
use crate::packet::{decode_stream, Diagnostic, Sweep, DISTANCE_UNIT_M};
use crate::sim::CaptureRecord;

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("raw stream has {count} diagnostics, first: {first}")]
    Codec { count: usize, first: Diagnostic },
    #[error("expected {expected} sweeps ({positions} positions x {rep} rep), decoded {found}")]
    CountMismatch {
        expected: usize,
        found: usize,
        positions: u32,
        rep: u32,
    },
    #[error("expected {expected} motor angles, got {found}")]
    MotorAngles { expected: usize, found: usize },
    #[error(transparent)]
    Imu(#[from] ImuError),
}

/// One decoded, present return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawReturn {
    pub position_index: u32,
    pub sweep_index: u32,
    pub block_index: u16,
    pub channel_index: u8,
    pub distance_m: f64,
    pub reflectivity: u8,
    pub timestamp_us: u32,
}

/// Unit vector for a vertical angle and horizontal azimuth, both degrees.
pub fn unit_direction(alpha_deg: f64, azimuth_deg: f64) -> Vector3<f64> {
    let (sa, ca) = alpha_deg.to_radians().sin_cos();
    let (sp, cp) = azimuth_deg.to_radians().sin_cos();
    Vector3::new(ca * sp, ca * cp, sa)
}

/// Azimuth of channel `channel` with the table at `table_mdeg`, computed
/// in integer millidegrees so coincident beams give identical floats.
pub fn channel_azimuth_deg(table_mdeg: i64, channel: usize) -> f64 {
    mdeg_to_deg(table_mdeg + beam_offset_mdeg(channel))
}

/// Sensor-frame point for one measurement.
pub fn measurement_to_point(
    vertical_angle_deg: f64,
    channel: usize,
    table_angle_deg: f64,
    distance_m: f64,
) -> Vector3<f64> {
    let phi = table_angle_deg + crate::model::beam_offset_deg(channel);
    unit_direction(vertical_angle_deg, phi) * distance_m
}

/// Rotates every point into the levelled north-up frame and records the
/// applied angles in the metadata.
pub fn correct_attitude(
    mut cloud: PointCloud,
    attitude: &Attitude,
    heading_deg: f64,
) -> PointCloud {
    let applied = Attitude {
        heading_deg: normalize_heading(heading_deg),
        ..*attitude
    };
    let rot = applied.sensor_to_local();
    cloud.points.par_iter_mut().for_each(|p| {
        let v = rot * p.xyz();
        p.x = v.x;
        p.y = v.y;
        p.z = v.z;
    });
    cloud.meta.attitude = applied;
    cloud
}

/// `NP = ROT / (STEP × mtSTEP) × REP × vData`.
pub fn expected_point_count(cfg: &ValidatedConfig) -> u64 {
    cfg.expected_points()
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}° is not a positive multiple of 0.1°")]
pub struct ResolutionError(pub f64);

fn to_tenths(deg: f64) -> Result<u64, ResolutionError> {
    let t = (deg * 10.0).round();
    if !(deg > 0.0) || (deg * 10.0 - t).abs() > 1e-9 || t < 1.0 {
        return Err(ResolutionError(deg));
    }
    Ok(t as u64)
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Horizontal resolution from interleaving the table step with the beam
/// fan: `gcd(step, fan)` over tenths of a degree.
pub fn effective_resolution(step_deg: f64, fan_spacing_deg: f64) -> Result<f64, ResolutionError> {
    let s = to_tenths(step_deg)?;
    let f = to_tenths(fan_spacing_deg)?;
    Ok(gcd(s, f) as f64 / 10.0)
}

/// Resolution for a validated capture, against the sensor's 2° fan.
pub fn config_resolution(cfg: &ScanConfig) -> Result<f64, ResolutionError> {
    effective_resolution(cfg.position_increment_deg(), FAN_SPACING_DEG)
}

/// Every present return of one sweep, in (block, channel) order.
pub fn sweep_returns(
    sweep: &Sweep,
    position_index: u32,
    sweep_index: u32,
) -> impl Iterator<Item = RawReturn> + '_ {
    sweep
        .blocks()
        .enumerate()
        .flat_map(move |(b, (block, ts))| {
            block
                .channels
                .iter()
                .enumerate()
                .filter_map(move |(ch, c)| {
                    c.distance_m().map(|d| RawReturn {
                        position_index,
                        sweep_index,
                        block_index: b as u16,
                        channel_index: ch as u8,
                        distance_m: d,
                        reflectivity: c.reflectivity,
                        timestamp_us: ts,
                    })
                })
        })
}

fn sweep_points(sweep: &Sweep, table_mdeg: i64, out: &mut Vec<Point>) {
    let azimuths: Vec<(f64, f64)> = (0..BEAMS)
        .map(|ch| channel_azimuth_deg(table_mdeg, ch).to_radians().sin_cos())
        .collect();
    for (block, ts) in sweep.blocks() {
        let (sa, ca) = block.vertical_angle_deg().to_radians().sin_cos();
        for (ch, c) in block.channels.iter().enumerate() {
            if c.distance_2mm == 0 {
                continue;
            }
            let d = c.distance_2mm as f64 * DISTANCE_UNIT_M;
            let (sp, cp) = azimuths[ch];
            out.push(Point {
                x: d * ca * sp,
                y: d * ca * cp,
                z: d * sa,
                intensity: c.reflectivity,
                timestamp_us: ts,
            });
        }
    }
}

/// The filter attitude used to level a capture: drift from the bench
/// calibration stream (if any), then the settle stream.
pub fn capture_attitude(rec: &CaptureRecord) -> Result<Settled, ImuError> {
    let bias = if rec.imu_calibration.is_empty() {
        DriftBias::default()
    } else {
        calibrate_drift(&rec.imu_calibration)?
    };
    settle_tilt(&rec.imu_stream, &bias, rec.cfg.config().tau_s)
}

#[derive(Debug, Clone)]
pub struct Assembly {
    pub cloud: PointCloud,
    pub settle: Settled,
}

pub fn assemble_capture(rec: &CaptureRecord) -> Result<Assembly, AssemblyError> {
    let cfg = &rec.cfg;
    let decoded = decode_stream(&rec.raw);
    if let Some(first) = decoded.diagnostics.first() {
        return Err(AssemblyError::Codec {
            count: decoded.diagnostics.len(),
            first: first.clone(),
        });
    }
    let expected = cfg.total_sweeps();
    if decoded.sweeps.len() != expected {
        return Err(AssemblyError::CountMismatch {
            expected,
            found: decoded.sweeps.len(),
            positions: cfg.positions(),
            rep: cfg.config().rep_count,
        });
    }
    if rec.motor_angles_mdeg.len() != cfg.positions() as usize {
        return Err(AssemblyError::MotorAngles {
            expected: cfg.positions() as usize,
            found: rec.motor_angles_mdeg.len(),
        });
    }

    let rep = cfg.config().rep_count as usize;
    let per_position: Vec<Vec<Point>> = decoded
        .sweeps
        .par_chunks(rep)
        .zip(rec.motor_angles_mdeg.par_iter())
        .map(|(sweeps, &table_mdeg)| {
            let mut pts = Vec::new();
            for sweep in sweeps {
                sweep_points(sweep, table_mdeg, &mut pts);
            }
            pts
        })
        .collect();
    let mut points = Vec::with_capacity(per_position.iter().map(Vec::len).sum());
    for chunk in per_position {
        points.extend(chunk);
    }

    let settle = capture_attitude(rec)?;
    let cloud = PointCloud {
        points,
        meta: CloudMeta {
            geo: rec.geo,
            attitude: settle.attitude,
            config: cfg.config().clone(),
        },
    };
    let cloud = correct_attitude(cloud, &settle.attitude, rec.heading_deg);
    Ok(Assembly { cloud, settle })
}

/// Grid used to decide whether two points are identical.
pub const DEDUP_GRID_M: f64 = DISTANCE_UNIT_M;

fn grid_key(p: &Point) -> (i64, i64, i64) {
    let q = |v: f64| (v / DEDUP_GRID_M).round() as i64;
    (q(p.x), q(p.y), q(p.z))
}

/// Keeps the first point of every 2 mm grid cell, preserving order.
pub fn filter_duplicates(mut cloud: PointCloud) -> PointCloud {
    let mut seen = HashSet::with_capacity(cloud.points.len());
    cloud.points.retain(|p| seen.insert(grid_key(p)));
    cloud
}

#[derive(Debug, Error)]
pub enum CloudFileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("cloud line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cloud header: {0}")]
    Config(#[from] ConfigError),
}

/// Writes the `.xyzit.csv` format: a `# key=value …` header line then
/// `x,y,z,intensity,timestamp_us` rows with 6-decimal coordinates.
pub fn write_xyzit<W: Write>(cloud: &PointCloud, mut w: W) -> io::Result<()> {
    let m = &cloud.meta;
    let c = &m.config;
    writeln!(
        w,
        "# lat={} lon={} alt={} heading={} roll={} pitch={} step={} rep={} rot={} microstep={} yaw={} fix_time={} tau={} noise_sigma={} dropout={} seed={}",
        m.geo.latitude_deg,
        m.geo.longitude_deg,
        m.geo.altitude_m,
        m.attitude.heading_deg,
        m.attitude.roll_deg,
        m.attitude.pitch_deg,
        c.step_count,
        c.rep_count,
        c.rotation_deg,
        c.microstep,
        m.attitude.yaw_deg,
        m.geo.fix_time_s,
        c.tau_s,
        c.range_noise_sigma_m,
        c.dropout_prob,
        c.rng_seed,
    )?;
    for p in &cloud.points {
        writeln!(
            w,
            "{:.6},{:.6},{:.6},{},{}",
            p.x, p.y, p.z, p.intensity, p.timestamp_us
        )?;
    }
    Ok(())
}

fn parse_header(line: &str, meta: &mut CloudMeta) -> Result<(), CloudFileError> {
    let bad = |k: &str, v: &str| CloudFileError::Parse {
        line: 1,
        msg: format!("bad header value {k}={v}"),
    };
    for tok in line.trim_start_matches('#').split_whitespace() {
        let Some((k, v)) = tok.split_once('=') else {
            continue;
        };
        let f = || v.parse::<f64>().map_err(|_| bad(k, v));
        match k {
            "lat" => meta.geo.latitude_deg = f()?,
            "lon" => meta.geo.longitude_deg = f()?,
            "alt" => meta.geo.altitude_m = f()?,
            "fix_time" => meta.geo.fix_time_s = v.parse().map_err(|_| bad(k, v))?,
            "heading" => meta.attitude.heading_deg = f()?,
            "roll" => meta.attitude.roll_deg = f()?,
            "pitch" => meta.attitude.pitch_deg = f()?,
            "yaw" => meta.attitude.yaw_deg = f()?,
            "step" | "rep" | "rot" | "microstep" | "tau" | "noise_sigma" | "dropout" | "seed" => {
                meta.config.set(k, v)?
            }
            _ => {}
        }
    }
    Ok(())
}

/// Reads a `.xyzit.csv` file. `#` lines feed the metadata; a literal
/// `x,y,z,intensity,timestamp_us` header row is tolerated.
pub fn read_xyzit<R: BufRead>(r: R) -> Result<PointCloud, CloudFileError> {
    let mut cloud = PointCloud::default();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            parse_header(line, &mut cloud.meta)?;
            continue;
        }
        if line.starts_with('x') {
            continue;
        }
        let err = |msg: String| CloudFileError::Parse { line: idx + 1, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", f.len())));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| err(format!("'{s}': {e}")))
        };
        cloud.points.push(Point {
            x: num(f[0])?,
            y: num(f[1])?,
            z: num(f[2])?,
            intensity: f[3]
                .trim()
                .parse()
                .map_err(|e| err(format!("intensity: {e}")))?,
            timestamp_us: f[4]
                .trim()
                .parse()
                .map_err(|e| err(format!("timestamp: {e}")))?,
        });
    }
    Ok(cloud)
}

/// Geo metadata helper for callers building clouds by hand.
pub fn cloud_with_points(points: Vec<Point>, geo: GeoFix) -> PointCloud {
    PointCloud {
        points,
        meta: CloudMeta {
            geo,
            ..CloudMeta::default()
        },
    }
}
