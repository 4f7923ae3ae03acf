//! Deterministic virtual rig: scene raycasting, turntable motor, IMU and
//! compass models, and the capture workflow (settle tilt, then capture REP
//! sweeps per position and advance the motor).

mod capture;
mod scene;

pub use capture::{
    motor_advance, run_capture, run_capture_with, sensor_origin, simulate_sweep,
    simulate_sweep_returns, substream, CaptureError, CaptureRecord, ImuModel, MotorState, RigPose,
    CAPTURE_START_US, MOTOR_MOVE_US, SWEEP_PERIOD_US,
};
pub use scene::{
    parse_scene, raycast, GroundPlane, Hit, Primitive, Scene, SceneError,
    DEFAULT_GROUND_REFLECTIVITY,
};
