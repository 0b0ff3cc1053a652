//! Linear motion model and the time-axis partitioning used to label index
//! entries.

use crate::error::{Error, Result};
use crate::geom::Point;
use crate::UserId;

/// A user's last reported linear motion state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovingObject {
    pub uid: UserId,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    /// Time of the last update.
    pub t_u: f64,
}

impl MovingObject {
    pub fn new(uid: UserId, x: f64, y: f64, vx: f64, vy: f64, t_u: f64) -> Self {
        Self { uid, x, y, vx, vy, t_u }
    }

    /// Position extrapolated (forward or backward) to time `t`.
    pub fn position_at(&self, t: f64) -> Point {
        let dt = t - self.t_u;
        Point::new(self.x + self.vx * dt, self.y + self.vy * dt)
    }
}

/// Free-function form of [`MovingObject::position_at`].
pub fn position_at(obj: &MovingObject, t: f64) -> Point {
    obj.position_at(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePartitionConfig {
    /// Maximum update interval.
    pub delta_t_mu: f64,
    /// Sub-partitions within `delta_t_mu`.
    pub n: u32,
}

impl Default for TimePartitionConfig {
    fn default() -> Self {
        Self { delta_t_mu: 120.0, n: 2 }
    }
}

impl TimePartitionConfig {
    pub fn new(delta_t_mu: f64, n: u32) -> Self {
        assert!(delta_t_mu > 0.0 && n >= 1, "invalid time partitioning");
        Self { delta_t_mu, n }
    }

    /// Spacing of the label grid.
    pub fn step(&self) -> f64 {
        self.delta_t_mu / self.n as f64
    }

    /// Number of distinct partition ids (`n + 1`).
    pub fn partitions(&self) -> u32 {
        self.n + 1
    }

    /// Smallest label-grid timestamp that is `>= t_u + step`.
    pub fn label_timestamp(&self, t_u: f64) -> f64 {
        let step = self.step();
        let q = t_u / step + 1.0;
        let mut k = q.ceil();
        // absorb representation noise so exact grid hits map to themselves
        if (q - q.round()).abs() < 1e-9 {
            k = q.round();
        }
        k * step
    }

    pub fn is_label(&self, t: f64) -> bool {
        let q = t / self.step();
        (q - q.round()).abs() < 1e-9 && q.round() >= 1.0
    }

    /// Partition id of a label timestamp: `(t_lab / step - 1) mod (n + 1)`.
    pub fn index_partition(&self, t_lab: f64) -> Result<u32> {
        if !self.is_label(t_lab) {
            return Err(Error::NotALabel(t_lab));
        }
        let k = (t_lab / self.step()).round() as u64;
        Ok(((k - 1) % self.partitions() as u64) as u32)
    }
}

pub fn label_timestamp(t_u: f64, cfg: &TimePartitionConfig) -> f64 {
    cfg.label_timestamp(t_u)
}

pub fn index_partition(t_lab: f64, cfg: &TimePartitionConfig) -> Result<u32> {
    cfg.index_partition(t_lab)
}
