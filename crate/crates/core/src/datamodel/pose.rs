use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Two poses closer than this (planar, meters) are the same place.
pub const SAME_PLACE_THRESHOLD_M: f64 = 20.0;

/// Vehicle pose in the map frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    /// Microseconds.
    pub timestamp: u64,
}

impl Pose {
    /// Angles are wrapped into `(-pi, pi]`.
    pub fn new(x: f64, y: f64, z: f64, yaw: f64, pitch: f64, roll: f64, timestamp: u64) -> Self {
        Self {
            x,
            y,
            z,
            yaw: normalize_angle(yaw),
            pitch: normalize_angle(pitch),
            roll: normalize_angle(roll),
            timestamp,
        }
    }

    pub fn planar(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            ..Self::default()
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.yaw, self.pitch, self.roll]
    }

    pub fn from_array(a: [f64; 6], timestamp: u64) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5], timestamp)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Planar (x, y) Euclidean distance in meters.
pub fn place_distance(a: &Pose, b: &Pose) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Strictly closer than `threshold` meters.
pub fn is_same_place(a: &Pose, b: &Pose, threshold: f64) -> bool {
    place_distance(a, b) < threshold
}
