//! Complementary-filter attitude estimation from gyroscope and accelerometer
//! readings, plus stationary drift calibration and tilt settling.
//!
//! Per sample with period `T` and `α = τ / (τ + T)`:
//!
//! ```text
//! roll  = α·(roll_prev  + Gx·T) + (1 − α)·atan2(Ay, Az)
//! pitch = α·(pitch_prev + Gy·T) + (1 − α)·atan2(−Ax, √(Ay² + Az²))
//! yaw   = yaw_prev + Gz·T
//! ```

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{Attitude, ImuSample};

/// Number of trailing updates inspected by [`settle_tilt`].
pub const SETTLE_WINDOW: usize = 50;
/// Maximum roll/pitch excursion over the window for a settled filter.
pub const SETTLE_THRESHOLD_DEG: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImuError {
    #[error("time constant must be > 0, got {0}")]
    BadTau(f64),
    #[error("sample period must be > 0, got {0}")]
    BadDt(f64),
    #[error("no IMU samples")]
    Empty,
    #[error("imu csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

/// `α = τ / (τ + T)`.
pub fn compute_alpha(tau_s: f64, dt_s: f64) -> Result<f64, ImuError> {
    if !(tau_s > 0.0 && tau_s.is_finite()) {
        return Err(ImuError::BadTau(tau_s));
    }
    if !(dt_s > 0.0 && dt_s.is_finite()) {
        return Err(ImuError::BadDt(dt_s));
    }
    Ok(tau_s / (tau_s + dt_s))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DriftBias {
    pub gyro: [f64; 3],
    pub accel: [f64; 3],
}

impl DriftBias {
    pub fn apply(&self, s: &ImuSample) -> ImuSample {
        ImuSample {
            dt_s: s.dt_s,
            gx: s.gx - self.gyro[0],
            gy: s.gy - self.gyro[1],
            gz: s.gz - self.gyro[2],
            ax: s.ax - self.accel[0],
            ay: s.ay - self.accel[1],
            az: s.az - self.accel[2],
        }
    }
}

/// Drift from a stationary, level recording: mean gyro rates, and mean
/// acceleration minus the expected `(0, 0, 1)` g.
pub fn calibrate_drift(samples: &[ImuSample]) -> Result<DriftBias, ImuError> {
    if samples.is_empty() {
        return Err(ImuError::Empty);
    }
    let n = samples.len() as f64;
    let mut sum = [0.0f64; 6];
    for s in samples {
        for (acc, v) in sum.iter_mut().zip([s.gx, s.gy, s.gz, s.ax, s.ay, s.az]) {
            *acc += v;
        }
    }
    let m = sum.map(|v| v / n);
    Ok(DriftBias {
        gyro: [m[0], m[1], m[2]],
        accel: [m[3], m[4], m[5] - 1.0],
    })
}

/// Whether an update could use the accelerometer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Fused,
    /// Accelerometer vector was zero; only the gyro term was applied.
    GyroOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterState {
    pub attitude: Attitude,
    pub alpha: f64,
    pub tau_s: f64,
    pub last_dt_s: f64,
}

impl FilterState {
    pub fn new(tau_s: f64) -> Result<Self, ImuError> {
        if !(tau_s > 0.0 && tau_s.is_finite()) {
            return Err(ImuError::BadTau(tau_s));
        }
        Ok(Self {
            attitude: Attitude::default(),
            alpha: 0.0,
            tau_s,
            last_dt_s: 0.0,
        })
    }

    pub fn with_attitude(tau_s: f64, attitude: Attitude) -> Result<Self, ImuError> {
        Ok(Self {
            attitude,
            ..Self::new(tau_s)?
        })
    }

    /// Applies one bias-corrected sample in place.
    pub fn update(&mut self, s: &ImuSample) -> Result<UpdateKind, ImuError> {
        let (next, kind) = update_attitude(self, s)?;
        *self = next;
        Ok(kind)
    }

    pub fn run<'a, I>(&mut self, samples: I) -> Result<usize, ImuError>
    where
        I: IntoIterator<Item = &'a ImuSample>,
    {
        let mut gyro_only = 0;
        for s in samples {
            if self.update(s)? == UpdateKind::GyroOnly {
                gyro_only += 1;
            }
        }
        Ok(gyro_only)
    }
}

/// One complementary-filter step. The sample must already be bias-corrected.
pub fn update_attitude(
    state: &FilterState,
    s: &ImuSample,
) -> Result<(FilterState, UpdateKind), ImuError> {
    let alpha = compute_alpha(state.tau_s, s.dt_s)?;
    let t = s.dt_s;
    let prev = state.attitude;
    let gyro_roll = prev.roll_deg + s.gx * t;
    let gyro_pitch = prev.pitch_deg + s.gy * t;

    let degenerate = s.ax == 0.0 && s.ay == 0.0 && s.az == 0.0;
    let (roll, pitch, kind) = if degenerate {
        (gyro_roll, gyro_pitch, UpdateKind::GyroOnly)
    } else {
        let accel_roll = s.ay.atan2(s.az).to_degrees();
        let accel_pitch = (-s.ax).atan2(s.ay.hypot(s.az)).to_degrees();
        (
            alpha * gyro_roll + (1.0 - alpha) * accel_roll,
            alpha * gyro_pitch + (1.0 - alpha) * accel_pitch,
            UpdateKind::Fused,
        )
    };

    let attitude = Attitude {
        roll_deg: roll,
        pitch_deg: pitch,
        yaw_deg: prev.yaw_deg + s.gz * t,
        heading_deg: prev.heading_deg,
    };
    Ok((
        FilterState {
            attitude,
            alpha,
            tau_s: state.tau_s,
            last_dt_s: t,
        },
        kind,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settled {
    pub attitude: Attitude,
    /// Roll and pitch moved less than 0.01° over the last 50 updates.
    pub settled: bool,
    pub gyro_only_updates: usize,
}

/// Runs the filter from a zero state over the bias-corrected stream and
/// reports the final attitude.
pub fn settle_tilt(
    stream: &[ImuSample],
    bias: &DriftBias,
    tau_s: f64,
) -> Result<Settled, ImuError> {
    if stream.is_empty() {
        return Err(ImuError::Empty);
    }
    let mut state = FilterState::new(tau_s)?;
    let mut history = Vec::with_capacity(stream.len());
    let mut gyro_only = 0;
    for s in stream {
        if state.update(&bias.apply(s))? == UpdateKind::GyroOnly {
            gyro_only += 1;
        }
        history.push((state.attitude.roll_deg, state.attitude.pitch_deg));
    }

    let last = state.attitude;
    let settled = history.len() > SETTLE_WINDOW
        && history[history.len() - SETTLE_WINDOW - 1..]
            .iter()
            .all(|&(r, p)| {
                (r - last.roll_deg).abs() < SETTLE_THRESHOLD_DEG
                    && (p - last.pitch_deg).abs() < SETTLE_THRESHOLD_DEG
            });
    Ok(Settled {
        attitude: last,
        settled,
        gyro_only_updates: gyro_only,
    })
}

pub const IMU_CSV_HEADER: &str = "dt_s,gx,gy,gz,ax,ay,az";

pub fn write_imu_csv(samples: &[ImuSample]) -> String {
    let mut out = String::with_capacity(samples.len() * 64);
    out.push_str(IMU_CSV_HEADER);
    out.push('\n');
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.dt_s, s.gx, s.gy, s.gz, s.ax, s.ay, s.az
        );
    }
    out
}

/// Reads `dt_s,gx,gy,gz,ax,ay,az` rows; a leading header row is skipped.
pub fn read_imu_csv(text: &str) -> Result<Vec<ImuSample>, ImuError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || (idx == 0 && line == IMU_CSV_HEADER) {
            continue;
        }
        let fields: Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let fields = fields.map_err(|e| ImuError::Csv {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let [dt_s, gx, gy, gz, ax, ay, az] = fields[..] else {
            return Err(ImuError::Csv {
                line: idx + 1,
                msg: format!("expected 7 fields, got {}", fields.len()),
            });
        };
        if !(dt_s > 0.0) {
            return Err(ImuError::Csv {
                line: idx + 1,
                msg: format!("dt_s must be > 0, got {dt_s}"),
            });
        }
        out.push(ImuSample {
            dt_s,
            gx,
            gy,
            gz,
            ax,
            ay,
            az,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn level(dt: f64) -> ImuSample {
        ImuSample::stationary(dt, [0.0, 0.0, 1.0])
    }

    #[test]
    fn alpha_values() {
        assert!((compute_alpha(0.1, 0.025).unwrap() - 0.8).abs() < 1e-15);
        assert!((compute_alpha(0.1, 0.1).unwrap() - 0.5).abs() < 1e-15);
        // 10 / 10.01
        assert!((compute_alpha(10.0, 0.01).unwrap() - 0.999_000_999_000_999).abs() < 1e-12);
        assert_eq!(compute_alpha(0.0, 0.1), Err(ImuError::BadTau(0.0)));
        assert_eq!(compute_alpha(0.1, -1.0), Err(ImuError::BadDt(-1.0)));
    }

    #[test]
    fn drift_calibration() {
        let mut s = level(0.01);
        s.gx = 0.5;
        let b = calibrate_drift(&[s; 10]).unwrap();
        assert_eq!(b.gyro, [0.5, 0.0, 0.0]);
        assert_eq!(b.accel, [0.0, 0.0, 0.0]);

        let mut a = level(0.01);
        a.gx = 0.2;
        let mut b2 = level(0.01);
        b2.gx = -0.2;
        assert_eq!(calibrate_drift(&[a, b2]).unwrap().gyro[0], 0.0);

        let mut hi = level(0.01);
        hi.az = 1.02;
        let mut lo = level(0.01);
        lo.az = 0.98;
        assert!(calibrate_drift(&[hi, lo]).unwrap().accel[2].abs() < 1e-15);

        assert_eq!(calibrate_drift(&[]), Err(ImuError::Empty));
    }

    #[test]
    fn level_stationary_stays_zero() {
        let st = FilterState::new(0.1).unwrap();
        let (next, kind) = update_attitude(&st, &level(0.01)).unwrap();
        assert_eq!(kind, UpdateKind::Fused);
        assert_eq!(next.attitude.roll_deg, 0.0);
        assert_eq!(next.attitude.pitch_deg, 0.0);
    }

    #[test]
    fn consistent_roll_is_a_fixed_point() {
        let r = 10f64.to_radians();
        let st = FilterState::with_attitude(
            0.1,
            Attitude {
                roll_deg: 10.0,
                ..Default::default()
            },
        )
        .unwrap();
        let s = ImuSample::stationary(0.01, [0.0, r.sin(), r.cos()]);
        let (next, _) = update_attitude(&st, &s).unwrap();
        assert!((next.attitude.roll_deg - 10.0).abs() < 1e-12);
    }

    #[test]
    fn gyro_term_hand_evaluation() {
        // alpha = 0.1 / 0.2 = 0.5; roll = 0.5 * (0 + 5 * 0.1) + 0.5 * 0
        let st = FilterState::new(0.1).unwrap();
        let mut s = level(0.1);
        s.gx = 5.0;
        let (next, _) = update_attitude(&st, &s).unwrap();
        assert!((next.attitude.roll_deg - 0.25).abs() < 1e-12);
        assert_eq!(next.alpha, 0.5);
        assert_eq!(next.last_dt_s, 0.1);
    }

    #[test]
    fn degenerate_accel_falls_back_to_gyro() {
        let st = FilterState::new(0.1).unwrap();
        let mut s = ImuSample::stationary(0.1, [0.0, 0.0, 0.0]);
        s.gx = 2.0;
        let (next, kind) = update_attitude(&st, &s).unwrap();
        assert_eq!(kind, UpdateKind::GyroOnly);
        assert!((next.attitude.roll_deg - 0.2).abs() < 1e-12);
    }

    #[test]
    fn settle_level_stream() {
        let stream = vec![level(0.01); 1000];
        let s = settle_tilt(&stream, &DriftBias::default(), 0.1).unwrap();
        assert!(s.settled);
        assert!(s.attitude.roll_deg.abs() < 0.01 && s.attitude.pitch_deg.abs() < 0.01);
        assert_eq!(
            settle_tilt(&[], &DriftBias::default(), 0.1),
            Err(ImuError::Empty)
        );
    }

    #[test]
    fn settle_noiseless_roll() {
        let r = 14f64.to_radians();
        let stream = vec![ImuSample::stationary(0.01, [0.0, r.sin(), r.cos()]); 500];
        let s = settle_tilt(&stream, &DriftBias::default(), 0.1).unwrap();
        assert!((s.attitude.roll_deg - 14.0).abs() <= 0.24);
        assert!((s.attitude.roll_deg - 14.0).abs() <= 0.01);
        assert!(s.settled);
    }

    #[test]
    fn yaw_integrates_exactly() {
        let mut st = FilterState::new(0.1).unwrap();
        let mut s = level(0.01);
        s.gz = 3.0;
        for _ in 0..200 {
            st.update(&s).unwrap();
        }
        assert!((st.attitude.yaw_deg - 200.0 * 3.0 * 0.01).abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip() {
        let samples = vec![
            ImuSample {
                dt_s: 0.01,
                gx: 0.1,
                gy: -0.2,
                gz: 0.3,
                ax: 0.01,
                ay: 0.2,
                az: 0.97,
            },
            level(0.02),
        ];
        let text = write_imu_csv(&samples);
        assert_eq!(read_imu_csv(&text).unwrap(), samples);
        assert!(matches!(
            read_imu_csv("0.01,1,2\n"),
            Err(ImuError::Csv { line: 1, .. })
        ));
        assert!(matches!(
            read_imu_csv("0,0,0,0,0,0,1\n"),
            Err(ImuError::Csv { .. })
        ));
    }

    proptest! {
        #[test]
        fn alpha_in_unit_interval_and_monotone(tau in 1e-3f64..100.0, dt in 1e-4f64..1.0, k in 1.01f64..10.0) {
            let a = compute_alpha(tau, dt).unwrap();
            prop_assert!(a > 0.0 && a < 1.0);
            prop_assert!(compute_alpha(tau * k, dt).unwrap() > a);
            prop_assert!(compute_alpha(tau, dt * k).unwrap() < a);
        }

        #[test]
        fn converges_to_accel_angles(roll in -60f64..60.0, pitch in -60f64..60.0) {
            let (r, p) = (roll.to_radians(), pitch.to_radians());
            let a = [-p.sin(), r.sin() * p.cos(), r.cos() * p.cos()];
            let s = ImuSample::stationary(0.01, a);
            let mut st = FilterState::new(0.1).unwrap();
            let mut prev_err = f64::INFINITY;
            for _ in 0..400 {
                st.update(&s).unwrap();
                let err = (st.attitude.roll_deg - roll).abs().max((st.attitude.pitch_deg - pitch).abs());
                prop_assert!(err <= prev_err + 1e-9);
                prev_err = err;
            }
            prop_assert!(prev_err < 1e-6);
        }

        #[test]
        fn geometric_rate_is_alpha(roll in 1f64..40.0) {
            let r = roll.to_radians();
            let s = ImuSample::stationary(0.01, [0.0, r.sin(), r.cos()]);
            let mut st = FilterState::new(0.1).unwrap();
            st.update(&s).unwrap();
            let e1 = roll - st.attitude.roll_deg;
            st.update(&s).unwrap();
            let e2 = roll - st.attitude.roll_deg;
            prop_assert!((e2 / e1 - st.alpha).abs() < 1e-9);
        }

        #[test]
        fn concatenation_invariance(
            a in prop::collection::vec((-5f64..5.0, -0.3f64..0.3, 0.8f64..1.1), 1..60),
            b in prop::collection::vec((-5f64..5.0, -0.3f64..0.3, 0.8f64..1.1), 1..60),
        ) {
            let mk = |v: &[(f64, f64, f64)]| -> Vec<ImuSample> {
                v.iter().map(|&(g, ay, az)| ImuSample { dt_s: 0.01, gx: g, gy: -g, gz: g, ax: 0.05, ay, az }).collect()
            };
            let (sa, sb) = (mk(&a), mk(&b));
            let bias = DriftBias { gyro: [0.1, 0.2, -0.1], accel: [0.0, 0.01, 0.0] };
            let whole: Vec<ImuSample> = sa.iter().chain(sb.iter()).copied().collect();
            let full = settle_tilt(&whole, &bias, 0.1).unwrap();

            let mut st = FilterState::new(0.1).unwrap();
            for s in &sa { st.update(&bias.apply(s)).unwrap(); }
            for s in &sb { st.update(&bias.apply(s)).unwrap(); }
            prop_assert_eq!(full.attitude, st.attitude);
        }
    }
}
