use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub position: Vector2<f64>,
    /// Heading on arrival; the camera turns in place to it.
    pub yaw: f64,
    pub rotate_in_place: bool,
}

/// Piecewise path: at each waypoint the camera turns in place toward the
/// next one, then drives straight to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Waypoint>,
    /// Meters per second.
    pub speed: f64,
    /// Radians per second.
    pub turn_rate: f64,
    pub height: f64,
    /// Seconds spent still at the first waypoint before moving.
    pub start_dwell: f64,
    /// Seconds between frames.
    pub dt: f64,
    /// Per-session jitter of waypoint positions (meters) and headings (radians).
    pub jitter_position: f64,
    pub jitter_yaw: f64,
}

impl Default for TrajectorySpec {
    /// Rectangle inset 1.5 m in a 7 × 5.5 m room, starting and ending in
    /// front of the picture on the y = 0 wall.
    fn default() -> Self {
        let wp = |x: f64, y: f64, yaw: f64| Waypoint {
            position: Vector2::new(x, y),
            yaw,
            rotate_in_place: true,
        };
        Self {
            waypoints: vec![
                wp(1.5, 1.5, -FRAC_PI_2),
                wp(5.5, 1.5, 0.0),
                wp(5.5, 4.0, FRAC_PI_2),
                wp(1.5, 4.0, PI),
                wp(1.5, 1.5, -FRAC_PI_2),
            ],
            speed: 0.4,
            turn_rate: 45f64.to_radians(),
            height: 1.2,
            start_dwell: 5.0,
            dt: 1.0,
            jitter_position: 0.05,
            jitter_yaw: 2f64.to_radians(),
        }
    }
}

/// World-from-camera pose of a camera at `(x, y, height)` with heading
/// `yaw`: optical axis along the heading, image y pointing down.
pub fn camera_pose(position: Vector2<f64>, height: f64, yaw: f64) -> Pose {
    #[rustfmt::skip]
    let body_from_cam = Matrix3::new(
        0.0, 0.0, 1.0,
        -1.0, 0.0, 0.0,
        0.0, -1.0, 0.0,
    );
    let (s, c) = yaw.sin_cos();
    let world_from_body = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    Pose::new(world_from_body * body_from_cam, Vector3::new(position.x, position.y, height))
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

#[derive(Clone, Copy)]
enum Segment {
    Turn { at: Vector2<f64>, from: f64, delta: f64 },
    Drive { from: Vector2<f64>, to: Vector2<f64>, yaw: f64 },
}

impl TrajectorySpec {
    /// A copy with waypoint positions and headings perturbed.
    pub fn jittered(&self, rng: &mut ChaCha8Rng) -> TrajectorySpec {
        let mut out = self.clone();
        for w in &mut out.waypoints {
            if self.jitter_position > 0.0 {
                w.position += Vector2::new(
                    rng.random_range(-self.jitter_position..self.jitter_position),
                    rng.random_range(-self.jitter_position..self.jitter_position),
                );
            }
            if self.jitter_yaw > 0.0 {
                w.yaw += rng.random_range(-self.jitter_yaw..self.jitter_yaw);
            }
        }
        out
    }

    fn segments(&self) -> Vec<(Segment, f64)> {
        let mut segs = Vec::new();
        let Some(first) = self.waypoints.first() else {
            return segs;
        };
        let mut yaw = first.yaw;
        if self.start_dwell > 0.0 {
            segs.push((
                Segment::Turn {
                    at: first.position,
                    from: yaw,
                    delta: 0.0,
                },
                self.start_dwell,
            ));
        }
        let turn = |segs: &mut Vec<(Segment, f64)>, at: Vector2<f64>, yaw: &mut f64, target: f64| {
            let delta = wrap(target - *yaw);
            if delta.abs() > 1e-12 {
                segs.push((Segment::Turn { at, from: *yaw, delta }, delta.abs() / self.turn_rate));
            }
            *yaw = target;
        };
        for pair in self.waypoints.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let d = b.position - a.position;
            if d.norm() > 1e-9 {
                let heading = d.y.atan2(d.x);
                turn(&mut segs, a.position, &mut yaw, heading);
                segs.push((
                    Segment::Drive {
                        from: a.position,
                        to: b.position,
                        yaw,
                    },
                    d.norm() / self.speed,
                ));
            }
        }
        if let Some(last) = self.waypoints.last() {
            turn(&mut segs, last.position, &mut yaw, last.yaw);
        }
        segs
    }

    /// Total traversal time in seconds.
    pub fn duration(&self) -> f64 {
        self.segments().iter().map(|s| s.1).sum()
    }

    /// Ground-truth camera poses every `dt` seconds, ending exactly at the
    /// final waypoint.
    pub fn sample(&self) -> Vec<Pose> {
        let segs = self.segments();
        let total: f64 = segs.iter().map(|s| s.1).sum();
        let at = |t: f64| -> (Vector2<f64>, f64) {
            let mut rem = t;
            for (seg, dur) in &segs {
                if rem <= *dur || std::ptr::eq(seg, &segs.last().unwrap().0) {
                    let f = if *dur > 0.0 { (rem / dur).clamp(0.0, 1.0) } else { 1.0 };
                    return match *seg {
                        Segment::Turn { at, from, delta } => (at, from + f * delta),
                        Segment::Drive { from, to, yaw } => (from + (to - from) * f, yaw),
                    };
                }
                rem -= dur;
            }
            let w = self.waypoints.last().expect("non-empty trajectory");
            (w.position, w.yaw)
        };
        let mut times: Vec<f64> = Vec::new();
        let mut t = 0.0;
        while t < total - 1e-9 {
            times.push(t);
            t += self.dt;
        }
        times.push(total);
        times
            .into_iter()
            .map(|t| {
                let (p, yaw) = at(t);
                camera_pose(p, self.height, yaw)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_loop_starts_and_ends_at_the_picture() {
        let spec = TrajectorySpec::default();
        let poses = spec.sample();
        assert!(poses.len() >= 45 && poses.len() <= 51, "{}", poses.len());
        // The camera holds still in front of the picture first.
        assert!(poses[0].max_abs_diff(&poses[spec.start_dwell as usize]) < 1e-12);
        let first = poses.first().unwrap();
        let last = poses.last().unwrap();
        assert!(first.max_abs_diff(last) < 1e-9);
        // Optical axis points at the y = 0 wall.
        let fwd = first.rotation.column(2);
        assert!((fwd - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
        for p in &poses {
            assert!(p.is_valid(1e-9));
        }
    }

    #[test]
    fn steps_respect_speed_limits() {
        let spec = TrajectorySpec::default();
        let poses = spec.sample();
        for w in poses.windows(2) {
            let d = w[0].between(&w[1]);
            assert!(d.translation_norm() <= spec.speed * spec.dt + 1e-9);
            assert!(d.rotation_angle() <= spec.turn_rate * spec.dt + 1e-9);
        }
    }
}
