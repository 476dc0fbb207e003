//! Deterministic synthetic apartment: wall landmarks with illumination
//! dependent descriptors, a sunset illumination schedule with an
//! auto-exposure effect, a waypoint trajectory and drifting odometry.

mod family;
mod render;
mod trajectory;

pub use family::{FamilyModel, FamilyPreset};
pub use render::{render_frame, RenderConfig};
pub use trajectory::{camera_pose, TrajectorySpec, Waypoint};

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureFrame;
use crate::geom::{CameraIntrinsics, Pose};

pub const WORLD_SCHEMA: &str = "msslam.world/1";
pub const SESSION_SCHEMA: &str = "msslam.session/1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid world parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    WindowLit,
    Interior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSpec {
    pub position: Vector3<f64>,
    pub region: Region,
    /// Part of the highly textured picture at the start/end of every run.
    pub picture: bool,
    /// Illumination interval in which the landmark can be detected.
    pub visibility_band: (f64, f64),
    /// Detector response before per-frame jitter.
    pub strength: f64,
    /// Multiplier on the family's illumination sensitivity.
    pub gain: f64,
    /// Illumination level at which re-detection is most reliable.
    pub reference_level: f64,
    /// Seeds the per-family descriptor model of this landmark.
    pub appearance_seed: u64,
    /// Depth at which the detector's scale matches the landmark; it is only
    /// detected within a factor `scale_band` of this depth.
    pub scale_depth: f64,
    /// Landmarks of one repetitive-texture class share their appearance.
    pub texture_class: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    /// Room extents along x, y, z in meters; the window is the x = max wall.
    pub room: [f64; 3],
    pub landmark_count: usize,
    pub window_fraction: f64,
    /// Fraction of interior landmarks forming the picture.
    pub picture_fraction: f64,
    pub gain_sigma: f64,
    pub window_gain: f64,
    pub picture_gain: f64,
    /// Depth ratio around a landmark's scale depth within which it is detected.
    pub scale_band: f64,
    /// Range of landmark scale depths in meters (log-uniform).
    pub scale_depth_range: (f64, f64),
    /// Fraction of non-picture landmarks with a repetitive texture.
    pub repetitive_fraction: f64,
    /// Number of distinct repetitive textures.
    pub repetitive_classes: u32,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            room: [7.0, 5.5, 2.6],
            landmark_count: 3000,
            window_fraction: 0.3,
            picture_fraction: 0.04,
            gain_sigma: 0.6,
            window_gain: 1.5,
            picture_gain: 0.5,
            scale_band: 1.6,
            scale_depth_range: (0.8, 5.0),
            repetitive_fraction: 0.2,
            repetitive_classes: 30,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidParams(m.to_string()));
        if self.landmark_count == 0 {
            return bad("landmark_count must be positive");
        }
        if self.room.iter().any(|&r| !(r > 1.0) || !r.is_finite()) {
            return bad("room extents must exceed 1 m");
        }
        if !(0.0..=1.0).contains(&self.window_fraction)
            || !(0.0..=1.0).contains(&self.picture_fraction)
            || !(0.0..=1.0).contains(&self.repetitive_fraction)
        {
            return bad("fractions must lie in [0, 1]");
        }
        if !(self.scale_band >= 1.0) || !(self.scale_depth_range.0 > 0.0) || !(self.scale_depth_range.1 >= self.scale_depth_range.0) {
            return bad("scale band must be at least 1 and depths positive");
        }
        if !(self.gain_sigma >= 0.0) || !(self.window_gain >= 0.0) || !(self.picture_gain >= 0.0) {
            return bad("gains must be non-negative");
        }
        Ok(())
    }
}

/// Sunset illumination: a logistic fall-off of the global level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IlluminationSchedule {
    /// Time of half illumination, seconds since midnight.
    pub center_s: f64,
    /// Logistic width in seconds.
    pub width_s: f64,
    /// Above this global level, facing the window triggers auto-exposure.
    pub auto_exposure_level: f64,
    /// Detection multiplier of interior landmarks under auto-exposure.
    pub window_gain: f64,
}

impl Default for IlluminationSchedule {
    fn default() -> Self {
        Self {
            center_s: clock(18, 10),
            width_s: 20.0 * 60.0,
            auto_exposure_level: 0.5,
            window_gain: 0.0,
        }
    }
}

impl IlluminationSchedule {
    /// Global level in [0, 1]; 1 is full daylight. Non-increasing in time.
    pub fn global_level(&self, t: f64) -> f64 {
        1.0 / (1.0 + ((t - self.center_s) / self.width_s).exp())
    }
}

/// Seconds since midnight.
pub fn clock(hours: u32, minutes: u32) -> f64 {
    (hours * 3600 + minutes * 60) as f64
}

/// Start times of the six mapping sessions.
pub fn mapping_times() -> [f64; 6] {
    [clock(16, 46), clock(17, 27), clock(17, 54), clock(18, 27), clock(18, 56), clock(19, 35)]
}

/// Start times of the six localization sessions A..F.
pub fn localization_times() -> [f64; 6] {
    [clock(16, 51), clock(17, 31), clock(17, 58), clock(18, 30), clock(18, 59), clock(19, 42)]
}

/// Parses a start time given as `HH:MM`, a mapping session `1`..`6` or a
/// localization session `A`..`F`.
pub fn parse_start_time(s: &str) -> Option<f64> {
    if let Some((h, m)) = s.split_once(':') {
        let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
        return (h < 24 && m < 60).then(|| clock(h, m));
    }
    match s.as_bytes() {
        [c @ b'1'..=b'6'] => Some(mapping_times()[(c - b'1') as usize]),
        [c @ b'A'..=b'F'] => Some(localization_times()[(c - b'A') as usize]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub schema: String,
    pub seed: u64,
    pub params: WorldParams,
    pub schedule: IlluminationSchedule,
    pub camera: CameraIntrinsics,
    pub landmarks: Vec<LandmarkSpec>,
}

impl World {
    pub fn window_lit_count(&self) -> usize {
        self.landmarks.iter().filter(|l| l.region == Region::WindowLit).count()
    }
}

/// Uniform point on a wall rectangle, pulled up to 0.4 m into the room.
fn wall_point(rng: &mut ChaCha8Rng, room: &[f64; 3], wall: usize, span: (f64, f64), z: (f64, f64)) -> Vector3<f64> {
    let s = rng.random_range(span.0..span.1);
    let z = rng.random_range(z.0..z.1);
    let inset = rng.random_range(0.0..0.4);
    match wall {
        0 => Vector3::new(s, inset, z),           // y = 0
        1 => Vector3::new(room[0] - inset, s, z), // x = max (window wall)
        2 => Vector3::new(s, room[1] - inset, z), // y = max
        _ => Vector3::new(inset, s, z),           // x = 0
    }
}

pub fn generate_world(seed: u64, params: &WorldParams) -> Result<World, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_3A11);
    let room = params.room;
    let n_window = (params.landmark_count as f64 * params.window_fraction).round() as usize;
    let n_interior = params.landmark_count - n_window;
    let n_picture = (n_interior as f64 * params.picture_fraction).round() as usize;
    // The window-lit zone is the window wall plus 1.5 m strips of the side
    // walls next to it.
    let strip = 1.5f64.min(room[0] / 2.0);
    let gain = LogNormal::new(0.0, params.gain_sigma.max(1e-12)).unwrap();
    let z = (0.2, room[2] - 0.2);
    let mut landmarks = Vec::with_capacity(params.landmark_count);
    for i in 0..params.landmark_count {
        let (region, picture) = if i < n_window {
            (Region::WindowLit, false)
        } else {
            (Region::Interior, i - n_window < n_picture)
        };
        let position = match (region, picture) {
            (_, true) => {
                let x0 = 1.5f64.min(room[0] / 2.0);
                Vector3::new(rng.random_range(x0 - 0.6..x0 + 0.6), rng.random_range(0.0..0.1), rng.random_range(0.8..1.6))
            }
            (Region::WindowLit, _) => {
                let areas = [strip, room[1], strip];
                let total: f64 = areas.iter().sum();
                let pick = rng.random_range(0.0..total);
                if pick < areas[0] {
                    wall_point(&mut rng, &room, 0, (room[0] - strip, room[0]), z)
                } else if pick < areas[0] + areas[1] {
                    wall_point(&mut rng, &room, 1, (0.0, room[1]), z)
                } else {
                    wall_point(&mut rng, &room, 2, (room[0] - strip, room[0]), z)
                }
            }
            (Region::Interior, _) => {
                let areas = [room[0] - strip, room[1], room[0] - strip];
                let total: f64 = areas.iter().sum();
                let pick = rng.random_range(0.0..total);
                if pick < areas[0] {
                    wall_point(&mut rng, &room, 0, (0.0, room[0] - strip), z)
                } else if pick < areas[0] + areas[1] {
                    wall_point(&mut rng, &room, 3, (0.0, room[1]), z)
                } else {
                    wall_point(&mut rng, &room, 2, (0.0, room[0] - strip), z)
                }
            }
        };
        let mut g = gain.sample(&mut rng);
        if region == Region::WindowLit {
            g *= params.window_gain;
        }
        if picture {
            g *= params.picture_gain;
        }
        landmarks.push(LandmarkSpec {
            position,
            region,
            picture,
            visibility_band: match region {
                Region::WindowLit => (0.15, 1.0),
                Region::Interior => (0.0, 1.0),
            },
            strength: if picture { rng.random_range(1.0..2.0) } else { rng.random_range(0.2..1.0) },
            gain: g,
            reference_level: rng.random_range(0.0..1.0),
            appearance_seed: rng.random(),
            texture_class: (!picture
                && params.repetitive_classes > 0
                && rng.random_bool(params.repetitive_fraction))
            .then(|| rng.random_range(0..params.repetitive_classes)),
            scale_depth: if picture {
                1.5
            } else {
                let (lo, hi) = params.scale_depth_range;
                (rng.random_range(lo.ln()..=hi.ln())).exp()
            },
        });
    }
    // A repetitive texture looks the same wherever it appears, so its
    // members also share their illumination response.
    let mut class_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E57_C1A5);
    let classes: Vec<(f64, f64)> = (0..params.repetitive_classes)
        .map(|_| (gain.sample(&mut class_rng), class_rng.random_range(0.0..1.0)))
        .collect();
    for l in &mut landmarks {
        if let Some(c) = l.texture_class {
            (l.gain, l.reference_level) = classes[c as usize];
        }
    }
    Ok(World {
        schema: WORLD_SCHEMA.to_string(),
        seed,
        params: *params,
        schedule: IlluminationSchedule::default(),
        camera: CameraIntrinsics::default(),
        landmarks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryNoise {
    /// Per-step rotation noise, radians.
    pub sigma_rot: f64,
    /// Per-step translation noise, meters.
    pub sigma_trans: f64,
}

impl Default for OdometryNoise {
    fn default() -> Self {
        Self {
            sigma_rot: 0.002,
            sigma_trans: 0.005,
        }
    }
}

impl OdometryNoise {
    pub fn zero() -> Self {
        Self {
            sigma_rot: 0.0,
            sigma_trans: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFrame {
    pub timestamp: f64,
    /// Session-local odometry; the first frame is the identity.
    pub odom_pose: Pose,
    pub gt_pose: Pose,
    pub frame: FeatureFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub schema: String,
    pub label: String,
    pub start_time: f64,
    pub odometry_noise: OdometryNoise,
    pub frames: Vec<SessionFrame>,
}

/// Composes ground truth increments with per-step noise; the first odometry
/// pose is the identity, so every session lives in its own frame.
pub fn drift_odometry(gt: &[Pose], noise: &OdometryNoise, rng: &mut ChaCha8Rng) -> Vec<Pose> {
    let nr = Normal::new(0.0, noise.sigma_rot.max(0.0)).unwrap();
    let nt = Normal::new(0.0, noise.sigma_trans.max(0.0)).unwrap();
    let mut out = Vec::with_capacity(gt.len());
    let mut odom = Pose::identity();
    for (i, p) in gt.iter().enumerate() {
        if i > 0 {
            let rel = gt[i - 1].between(p);
            let step = if noise.sigma_rot > 0.0 || noise.sigma_trans > 0.0 {
                let d = Vector6::new(
                    nr.sample(rng),
                    nr.sample(rng),
                    nr.sample(rng),
                    nt.sample(rng),
                    nt.sample(rng),
                    nt.sample(rng),
                );
                rel.compose(&Pose::exp(&d))
            } else {
                rel
            };
            odom = odom.compose(&step).normalized();
        }
        out.push(odom);
    }
    out
}

/// Simulates one traversal starting at `start_time` (seconds since
/// midnight), one frame per second.
pub fn simulate_session(
    world: &World,
    model: &FamilyModel,
    traj: &TrajectorySpec,
    start_time: f64,
    noise: &OdometryNoise,
    render: &RenderConfig,
    seed: u64,
    label: impl Into<String>,
) -> SessionRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = traj.jittered(&mut rng).sample();
    let odom = drift_odometry(&gt, noise, &mut rng);
    let frames = gt
        .iter()
        .zip(odom)
        .enumerate()
        .map(|(i, (g, o))| {
            let t = start_time + i as f64;
            SessionFrame {
                timestamp: t,
                odom_pose: o,
                gt_pose: *g,
                frame: render_frame(world, model, g, t, i as u64, render, &mut rng),
            }
        })
        .collect();
    SessionRecord {
        schema: SESSION_SCHEMA.to_string(),
        label: label.into(),
        start_time,
        odometry_noise: *noise,
        frames,
    }
}
