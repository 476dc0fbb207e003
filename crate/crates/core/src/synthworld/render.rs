use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FamilyModel, Region, World};
use crate::features::{FeatureFrame, Keypoint};
use crate::geom::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub max_features: usize,
    pub pixel_noise: f64,
    /// Landmarks farther than this are not detected.
    pub max_range: f64,
    /// Depth readings beyond this are reported as unknown (0).
    pub max_depth: f64,
    /// Depth noise standard deviation per squared meter of depth.
    pub depth_noise: f64,
    /// Per-frame probability that a visible landmark is detected.
    pub detection_probability: f64,
    /// Cosine of the angle to the window normal under which the camera
    /// counts as facing the window.
    pub facing_cos: f64,
    /// Detector response halves at this depth (meters).
    pub response_falloff: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            max_features: 120,
            pixel_noise: 0.3,
            max_range: 7.5,
            max_depth: 4.5,
            depth_noise: 0.001,
            detection_probability: 0.9,
            facing_cos: 0.6,
            response_falloff: 1.5,
        }
    }
}

/// Observes the world from camera pose `gt` (world from camera) at time `t`.
pub fn render_frame(
    world: &World,
    model: &FamilyModel,
    gt: &Pose,
    t: f64,
    frame_id: u64,
    cfg: &RenderConfig,
    rng: &mut ChaCha8Rng,
) -> FeatureFrame {
    let k = &world.camera;
    let level = world.schedule.global_level(t);
    let forward = gt.rotation.column(2);
    let auto_exposure = level > world.schedule.auto_exposure_level && forward.x > cfg.facing_cos;
    let to_cam = gt.inverse();
    let pix = Normal::new(0.0, cfg.pixel_noise.max(0.0)).unwrap();

    let mut candidates: Vec<(f64, usize, Vector2<f64>, f64)> = Vec::new();
    for (l, spec) in world.landmarks.iter().enumerate() {
        let pc = to_cam.transform_point(&spec.position);
        if pc.z < 0.2 || pc.norm() > cfg.max_range {
            continue;
        }
        let Ok(u) = k.project(&pc) else { continue };
        if u.x < 2.0 || u.y < 2.0 || u.x > k.width as f64 - 2.0 || u.y > k.height as f64 - 2.0 {
            continue;
        }
        let band = world.params.scale_band;
        if pc.z < spec.scale_depth / band || pc.z > spec.scale_depth * band {
            continue;
        }
        if level < spec.visibility_band.0 || level > spec.visibility_band.1 {
            continue;
        }
        if auto_exposure && spec.region == Region::Interior && world.schedule.window_gain <= 0.0 {
            continue;
        }
        if !model.redetected(world, l, level) {
            continue;
        }
        // Draws happen for every in-view landmark so the stream does not
        // depend on which ones survive.
        let detect = rng.random_bool(cfg.detection_probability.clamp(0.0, 1.0));
        let jitter: f64 = rng.random_range(0.8..1.2);
        if !detect {
            continue;
        }
        let response = spec.strength * jitter / (1.0 + (pc.z / cfg.response_falloff.max(1e-6)).powi(2));
        candidates.push((response, l, u, pc.z));
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    candidates.truncate(cfg.max_features);
    // Spatial order keeps frames independent of response ties downstream.
    candidates.sort_by_key(|c| c.1);

    let mut frame = FeatureFrame::new(frame_id, t, model.family());
    for (_, l, u, z) in candidates {
        let noisy = u + Vector2::new(pix.sample(rng), pix.sample(rng));
        let noisy = Vector2::new(
            noisy.x.clamp(0.0, k.width as f64 - 1e-6),
            noisy.y.clamp(0.0, k.height as f64 - 1e-6),
        );
        let depth = if z <= cfg.max_depth {
            let dn = Normal::new(0.0, cfg.depth_noise * z * z).unwrap();
            (z + dn.sample(rng)).max(0.05)
        } else {
            0.0
        };
        let d = model.descriptor(world, l, level, Some(rng));
        frame.push(Keypoint::new(noisy, depth), d);
    }
    frame
}
