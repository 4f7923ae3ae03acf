//! Software twin of a low-cost stationary terrestrial LiDAR scanner: a
//! 16-beam sensor mounted on its side on a stepper turntable, with IMU tilt
//! correction, cloud assembly and vegetation-structure analytics.

pub mod cloud;
pub mod eco;
pub mod imu;
pub mod model;
pub mod packet;
pub mod sim;

pub use model::*;
