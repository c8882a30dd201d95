//! Constant-velocity Kalman filter on (cx, cy, aspect, h).
//!
//! The transition, process noise, measurement noise, and initial
//! covariance are all block-diagonal per coordinate, so the 8-state filter
//! decomposes into four independent position+velocity filters with 2x2
//! covariances. Position and velocity noise scale with the box height.

use crate::mask::Box2D;
use serde::{Deserialize, Serialize};

/// Noise scalars of the motion model. Position-like standard deviations
/// are `weight * h`; the aspect ratio uses fixed absolute deviations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanNoise {
    pub process_pos_weight: f64,
    pub process_vel_weight: f64,
    pub measure_pos_weight: f64,
    pub init_pos_factor: f64,
    pub init_vel_factor: f64,
    pub aspect_process_std: f64,
    pub aspect_vel_process_std: f64,
    pub aspect_measure_std: f64,
}

impl Default for KalmanNoise {
    fn default() -> Self {
        Self {
            process_pos_weight: 1.0 / 20.0,
            process_vel_weight: 1.0 / 160.0,
            measure_pos_weight: 1.0 / 20.0,
            init_pos_factor: 2.0,
            init_vel_factor: 10.0,
            aspect_process_std: 1e-2,
            aspect_vel_process_std: 1e-5,
            aspect_measure_std: 1e-1,
        }
    }
}

/// One coordinate's (value, velocity) state with its 2x2 covariance.
#[derive(Debug, Clone, Copy)]
struct Channel {
    value: f64,
    velocity: f64,
    // covariance [[p00, p01], [p01, p11]]
    p00: f64,
    p01: f64,
    p11: f64,
}

impl Channel {
    fn new(value: f64, pos_std: f64, vel_std: f64) -> Self {
        Self {
            value,
            velocity: 0.0,
            p00: pos_std * pos_std,
            p01: 0.0,
            p11: vel_std * vel_std,
        }
    }

    /// Time update: value += velocity, covariance through F = [[1,1],[0,1]].
    fn predict(&mut self, q_pos: f64, q_vel: f64) {
        self.value += self.velocity;
        let p00 = self.p00 + 2.0 * self.p01 + self.p11 + q_pos * q_pos;
        let p01 = self.p01 + self.p11;
        let p11 = self.p11 + q_vel * q_vel;
        self.p00 = p00;
        self.p01 = p01;
        self.p11 = p11;
    }

    fn update(&mut self, z: f64, r_std: f64) {
        let s = self.p00 + r_std * r_std;
        let k0 = self.p00 / s;
        let k1 = self.p01 / s;
        let residual = z - self.value;
        self.value += k0 * residual;
        self.velocity += k1 * residual;
        let p00 = (1.0 - k0) * self.p00;
        let p01 = (1.0 - k0) * self.p01;
        let p11 = self.p11 - k1 * self.p01;
        self.p00 = p00;
        self.p01 = p01;
        self.p11 = p11;
    }
}

/// Box-motion filter tracking center, aspect ratio (w/h), and height.
#[derive(Debug, Clone)]
pub struct BoxKalman {
    cx: Channel,
    cy: Channel,
    aspect: Channel,
    h: Channel,
    noise: KalmanNoise,
}

fn to_cxyah(b: &Box2D) -> (f64, f64, f64, f64) {
    let (cx, cy) = b.center();
    let h = b.h.max(1e-6);
    (cx, cy, b.w / h, h)
}

fn from_cxyah(cx: f64, cy: f64, aspect: f64, h: f64) -> Box2D {
    let h = h.max(1e-6);
    let w = (aspect * h).max(1e-6);
    Box2D::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

impl BoxKalman {
    pub fn new(initial: &Box2D, noise: KalmanNoise) -> Self {
        let (cx, cy, aspect, h) = to_cxyah(initial);
        let pos_std = noise.init_pos_factor * noise.process_pos_weight * h;
        let vel_std = noise.init_vel_factor * noise.process_vel_weight * h;
        Self {
            cx: Channel::new(cx, pos_std, vel_std),
            cy: Channel::new(cy, pos_std, vel_std),
            aspect: Channel::new(aspect, noise.aspect_process_std, noise.aspect_vel_process_std),
            h: Channel::new(h, pos_std, vel_std),
            noise,
        }
    }

    /// Advance one frame and return the predicted box.
    pub fn predict(&mut self) -> Box2D {
        let h = self.h.value.max(1e-6);
        let q_pos = self.noise.process_pos_weight * h;
        let q_vel = self.noise.process_vel_weight * h;
        self.cx.predict(q_pos, q_vel);
        self.cy.predict(q_pos, q_vel);
        self.aspect
            .predict(self.noise.aspect_process_std, self.noise.aspect_vel_process_std);
        self.h.predict(q_pos, q_vel);
        self.current_box()
    }

    /// Measurement update from an observed box.
    pub fn update(&mut self, observed: &Box2D) {
        let (cx, cy, aspect, h) = to_cxyah(observed);
        let r_pos = self.noise.measure_pos_weight * self.h.value.max(1e-6);
        self.cx.update(cx, r_pos);
        self.cy.update(cy, r_pos);
        self.aspect.update(aspect, self.noise.aspect_measure_std);
        self.h.update(h, r_pos);
    }

    pub fn current_box(&self) -> Box2D {
        from_cxyah(self.cx.value, self.cy.value, self.aspect.value, self.h.value)
    }

    #[cfg(test)]
    pub(crate) fn set_velocity(&mut self, vx: f64, vy: f64) {
        self.cx.velocity = vx;
        self.cy.velocity = vy;
    }
}
