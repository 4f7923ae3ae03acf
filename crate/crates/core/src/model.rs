//! Shared domain types, sensor constants and frame conventions.
//!
//! Local frame: origin at the sensor optical centre, `x` east, `y` true
//! north, `z` up (right-handed ENU). Horizontal azimuths are measured
//! clockwise from `+y`, so a point at azimuth `phi` lies along
//! `(sin phi, cos phi, 0)`.
//!
//! Angles that must compose exactly (motor positions, beam fan offsets) are
//! carried as integer millidegrees and only converted to `f64` at the point
//! of use.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};
use thiserror::Error;

/// Number of horizontal-fan channels.
pub const BEAMS: usize = 16;
pub const PACKETS_PER_SWEEP: usize = 82;
pub const BLOCKS_PER_PACKET: usize = 2;
pub const BLOCKS_PER_SWEEP: usize = PACKETS_PER_SWEEP * BLOCKS_PER_PACKET;
pub const RETURNS_PER_PACKET: usize = BLOCKS_PER_PACKET * BEAMS;
/// Returns per full vertical sweep (`vData`).
pub const RETURNS_PER_SWEEP: usize = PACKETS_PER_SWEEP * RETURNS_PER_PACKET;

pub const MIN_RANGE_M: f64 = 0.5;
pub const MAX_RANGE_M: f64 = 100.0;
pub const RANGE_ACCURACY_M: f64 = 0.03;

/// Full motor step in millidegrees (1.8°).
pub const FULL_STEP_MDEG: i64 = 1800;
pub const FULL_STEP_DEG: f64 = 1.8;
/// Angular spacing of the beam fan in millidegrees (2°).
pub const FAN_SPACING_MDEG: i64 = 2000;
pub const FAN_SPACING_DEG: f64 = 2.0;
const FAN_FIRST_MDEG: i64 = -15_000;

/// Fan offset of channel `i` in millidegrees: `-15° + 2°·i`.
pub fn beam_offset_mdeg(channel: usize) -> i64 {
    debug_assert!(channel < BEAMS);
    FAN_FIRST_MDEG + FAN_SPACING_MDEG * channel as i64
}

pub fn beam_offset_deg(channel: usize) -> f64 {
    mdeg_to_deg(beam_offset_mdeg(channel))
}

pub fn mdeg_to_deg(mdeg: i64) -> f64 {
    mdeg as f64 / 1000.0
}

/// Wraps an angle into `[0, 360)`.
pub fn normalize_heading(deg: f64) -> f64 {
    let h = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Microstep {
    #[default]
    Full,
    Half,
    Quarter,
    Eighth,
}

impl Microstep {
    pub const ALL: [Microstep; 4] = [
        Microstep::Full,
        Microstep::Half,
        Microstep::Quarter,
        Microstep::Eighth,
    ];

    pub fn divisor(self) -> u32 {
        match self {
            Microstep::Full => 1,
            Microstep::Half => 2,
            Microstep::Quarter => 4,
            Microstep::Eighth => 8,
        }
    }

    pub fn fraction(self) -> f64 {
        1.0 / self.divisor() as f64
    }

    /// Effective motor step angle (`mtSTEP`) in millidegrees.
    pub fn step_mdeg(self) -> i64 {
        FULL_STEP_MDEG / self.divisor() as i64
    }

    pub fn step_deg(self) -> f64 {
        mdeg_to_deg(self.step_mdeg())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Microstep::Full => "full",
            Microstep::Half => "half",
            Microstep::Quarter => "quarter",
            Microstep::Eighth => "eighth",
        }
    }
}

impl fmt::Display for Microstep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Microstep {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" | "1" | "1/1" => Ok(Microstep::Full),
            "half" | "2" | "1/2" => Ok(Microstep::Half),
            "quarter" | "4" | "1/4" => Ok(Microstep::Quarter),
            "eighth" | "8" | "1/8" => Ok(Microstep::Eighth),
            other => Err(ConfigError::BadValue {
                key: "microstep".into(),
                value: other.into(),
            }),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("step count must be >= 1")]
    ZeroStep,
    #[error("rep count must be >= 1")]
    ZeroRep,
    #[error("rotation {0}° outside (0, 360]")]
    RotationOutOfRange(f64),
    #[error(
        "rotation {rotation_deg}° is not a whole number of {increment_deg}° position increments"
    )]
    NonIntegerPositions {
        rotation_deg: f64,
        increment_deg: f64,
    },
    #[error("time constant must be > 0, got {0}")]
    BadTau(f64),
    #[error("range noise sigma must be finite and >= 0, got {0}")]
    BadNoise(f64),
    #[error("dropout probability must be in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for key '{key}'")]
    BadValue { key: String, value: String },
}

/// User capture parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanConfig {
    /// Motor steps between samplings (STEP).
    pub step_count: u32,
    /// Vertical-plane sweeps per position (REP).
    pub rep_count: u32,
    /// Total turntable rotation in degrees (ROT).
    pub rotation_deg: f64,
    pub microstep: Microstep,
    pub tau_s: f64,
    pub range_noise_sigma_m: f64,
    pub dropout_prob: f64,
    pub rng_seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            step_count: 1,
            rep_count: 1,
            rotation_deg: 180.0,
            microstep: Microstep::Full,
            tau_s: 0.1,
            range_noise_sigma_m: 0.02,
            dropout_prob: 0.0,
            rng_seed: 0,
        }
    }
}

/// Keys accepted by the flat `key=value` config format, in output order.
pub const CONFIG_KEYS: [&str; 8] = [
    "step",
    "rep",
    "rot",
    "microstep",
    "tau",
    "noise_sigma",
    "dropout",
    "seed",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
    })
}

impl ScanConfig {
    /// Effective motor step angle (`mtSTEP`).
    pub fn step_angle_deg(&self) -> f64 {
        self.microstep.step_deg()
    }

    /// Table rotation between consecutive capture positions, millidegrees.
    pub fn position_increment_mdeg(&self) -> i64 {
        self.step_count as i64 * self.microstep.step_mdeg()
    }

    pub fn position_increment_deg(&self) -> f64 {
        mdeg_to_deg(self.position_increment_mdeg())
    }

    /// Sets one field from its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key.trim() {
            "step" => self.step_count = parse_value(key, value)?,
            "rep" => self.rep_count = parse_value(key, value)?,
            "rot" => self.rotation_deg = parse_value(key, value)?,
            "microstep" => self.microstep = value.parse()?,
            "tau" => self.tau_s = parse_value(key, value)?,
            "noise_sigma" => self.range_noise_sigma_m = parse_value(key, value)?,
            "dropout" => self.dropout_prob = parse_value(key, value)?,
            "seed" => self.rng_seed = parse_value(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "step" => self.step_count.to_string(),
            "rep" => self.rep_count.to_string(),
            "rot" => self.rotation_deg.to_string(),
            "microstep" => self.microstep.to_string(),
            "tau" => self.tau_s.to_string(),
            "noise_sigma" => self.range_noise_sigma_m.to_string(),
            "dropout" => self.dropout_prob.to_string(),
            "seed" => self.rng_seed.to_string(),
            _ => return None,
        })
    }

    /// Parses a flat `key=value` config file over the defaults. Blank lines
    /// and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ScanConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: idx + 1 })?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.get(key).unwrap());
            out.push('\n');
        }
        out
    }
}

/// A [`ScanConfig`] whose invariants hold, with its derived counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    config: ScanConfig,
    positions: u32,
    expected_points: u64,
}

impl ValidatedConfig {
    pub fn config(&self) -> &ScanConfig {
        &self.config
    }

    /// Number of capture positions `ROT / (STEP × mtSTEP)`.
    pub fn positions(&self) -> u32 {
        self.positions
    }

    /// Eq.-4 point budget `positions × REP × vData`.
    pub fn expected_points(&self) -> u64 {
        self.expected_points
    }

    pub fn returns_per_sweep(&self) -> usize {
        RETURNS_PER_SWEEP
    }

    pub fn total_sweeps(&self) -> usize {
        self.positions as usize * self.config.rep_count as usize
    }

    /// Table angle of capture position `p`, in millidegrees.
    pub fn table_angle_mdeg(&self, position: u32) -> i64 {
        position as i64 * self.config.position_increment_mdeg()
    }

    pub fn into_config(self) -> ScanConfig {
        self.config
    }
}

pub fn validate_config(cfg: ScanConfig) -> Result<ValidatedConfig, ConfigError> {
    if cfg.step_count == 0 {
        return Err(ConfigError::ZeroStep);
    }
    if cfg.rep_count == 0 {
        return Err(ConfigError::ZeroRep);
    }
    let rot = cfg.rotation_deg;
    if !(rot.is_finite() && rot > 0.0 && rot <= 360.0) {
        return Err(ConfigError::RotationOutOfRange(rot));
    }
    if !(cfg.tau_s.is_finite() && cfg.tau_s > 0.0) {
        return Err(ConfigError::BadTau(cfg.tau_s));
    }
    if !(cfg.range_noise_sigma_m.is_finite() && cfg.range_noise_sigma_m >= 0.0) {
        return Err(ConfigError::BadNoise(cfg.range_noise_sigma_m));
    }
    if !(cfg.dropout_prob >= 0.0 && cfg.dropout_prob < 1.0) {
        return Err(ConfigError::BadDropout(cfg.dropout_prob));
    }

    let increment = cfg.position_increment_mdeg();
    let non_integer = || ConfigError::NonIntegerPositions {
        rotation_deg: rot,
        increment_deg: mdeg_to_deg(increment),
    };
    let rot_mdeg = (rot * 1000.0).round();
    if (rot * 1000.0 - rot_mdeg).abs() > 1e-6 {
        return Err(non_integer());
    }
    let rot_mdeg = rot_mdeg as i64;
    if rot_mdeg % increment != 0 {
        return Err(non_integer());
    }
    let positions = (rot_mdeg / increment) as u32;
    let expected_points = positions as u64 * cfg.rep_count as u64 * RETURNS_PER_SWEEP as u64;
    Ok(ValidatedConfig {
        config: cfg,
        positions,
        expected_points,
    })
}

/// Filter attitude plus compass heading, all in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Attitude {
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    /// Clockwise angle from north to the sensor's table-zero azimuth.
    pub heading_deg: f64,
}

impl Attitude {
    pub fn new(roll_deg: f64, pitch_deg: f64, heading_deg: f64) -> Self {
        Self {
            roll_deg,
            pitch_deg,
            yaw_deg: 0.0,
            heading_deg: normalize_heading(heading_deg),
        }
    }

    /// Rotation taking sensor-frame vectors into the levelled, north-up
    /// local frame: `R_z(-heading) · R_y(pitch) · R_x(roll)`.
    ///
    /// Roll and pitch carry the sign produced by the complementary filter
    /// (an accelerometer reading `(0, sin r, cos r)` means roll `r`), so the
    /// same matrix drives both the simulator and the correction step.
    pub fn sensor_to_local(&self) -> Rotation3<f64> {
        sensor_to_local(self.roll_deg, self.pitch_deg, self.heading_deg)
    }
}

pub fn sensor_to_local(roll_deg: f64, pitch_deg: f64, heading_deg: f64) -> Rotation3<f64> {
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), (-heading_deg).to_radians());
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), pitch_deg.to_radians());
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), roll_deg.to_radians());
    rz * ry * rx
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
}

/// WGS84 fix of the local-frame origin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeoFix {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub altitude_m: f64,
    /// Seconds since the Unix epoch.
    pub fix_time_s: i64,
}

impl GeoFix {
    pub fn new(
        latitude_deg: f64,
        longitude_deg: f64,
        altitude_m: f64,
        fix_time_s: i64,
    ) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&latitude_deg) {
            return Err(GeoError::Latitude(latitude_deg));
        }
        if !(-180.0..=180.0).contains(&longitude_deg) {
            return Err(GeoError::Longitude(longitude_deg));
        }
        Ok(Self {
            latitude_deg,
            longitude_deg,
            altitude_m,
            fix_time_s,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: u8,
    pub timestamp_us: u32,
}

impl Point {
    pub fn xyz(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CloudMeta {
    pub geo: GeoFix,
    pub attitude: Attitude,
    pub config: ScanConfig,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub meta: CloudMeta,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One IMU reading. Gyro rates in °/s, accelerations in g.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub dt_s: f64,
    pub gx: f64,
    pub gy: f64,
    pub gz: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

impl ImuSample {
    pub fn stationary(dt_s: f64, accel: [f64; 3]) -> Self {
        Self {
            dt_s,
            gx: 0.0,
            gy: 0.0,
            gz: 0.0,
            ax: accel[0],
            ay: accel[1],
            az: accel[2],
        }
    }
}
