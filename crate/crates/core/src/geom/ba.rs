use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};

use super::pnp::{levenberg_marquardt, NormalEquations};
use super::{skew, CameraIntrinsics, GeomError, Pose};
use crate::features::{FeatureFrame, Match};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaConfig {
    pub max_iterations: usize,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self { max_iterations: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaResult {
    /// Refined camera-b-from-camera-a transform.
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

/// One matched feature seen in both frames. Either side may lack depth.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PairObservation {
    pub point_a: Option<Vector3<f64>>,
    pub pixel_a: Vector2<f64>,
    pub point_b: Option<Vector3<f64>>,
    pub pixel_b: Vector2<f64>,
}

pub(crate) fn observations(a: &FeatureFrame, b: &FeatureFrame, matches: &[Match], k: &CameraIntrinsics) -> Vec<PairObservation> {
    matches
        .iter()
        .map(|m| {
            let ka = &a.keypoints[m.index_a];
            let kb = &b.keypoints[m.index_b];
            PairObservation {
                point_a: k.back_project(&ka.pixel, ka.depth).ok(),
                pixel_a: ka.pixel,
                point_b: k.back_project(&kb.pixel, kb.depth).ok(),
                pixel_b: kb.pixel,
            }
        })
        .collect()
}

fn accumulate(
    pose: &Pose,
    obs: &[PairObservation],
    k: &CameraIntrinsics,
    mut sink: impl FnMut(Vector2<f64>, Option<nalgebra::Matrix2x6<f64>>),
    with_jacobian: bool,
) -> Option<()> {
    let rt = pose.rotation.transpose();
    for o in obs {
        if let Some(pa) = o.point_a {
            let pc = pose.transform_point(&pa);
            if pc.z <= 1e-9 {
                return None;
            }
            let r = k.project(&pc).ok()? - o.pixel_b;
            let j = with_jacobian.then(|| {
                let mut dp = nalgebra::Matrix3x6::zeros();
                dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-pose.rotation * skew(&pa)));
                dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&pose.rotation);
                k.projection_jacobian(&pc) * dp
            });
            sink(r, j);
        }
        if let Some(pb) = o.point_b {
            let q = rt * (pb - pose.translation);
            if q.z <= 1e-9 {
                return None;
            }
            let r = k.project(&q).ok()? - o.pixel_a;
            let j = with_jacobian.then(|| {
                let mut dq = nalgebra::Matrix3x6::zeros();
                dq.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&q));
                dq.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
                k.projection_jacobian(&q) * dq
            });
            sink(r, j);
        }
    }
    Some(())
}

pub(crate) fn observation_cost(pose: &Pose, obs: &[PairObservation], k: &CameraIntrinsics) -> Option<f64> {
    let mut c = 0.0;
    accumulate(pose, obs, k, |r, _| c += r.norm_squared(), false)?;
    Some(c)
}

fn normal_equations(pose: &Pose, obs: &[PairObservation], k: &CameraIntrinsics) -> Option<NormalEquations> {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let mut cost = 0.0;
    accumulate(
        pose,
        obs,
        k,
        |r, j| {
            let j = j.expect("jacobian requested");
            h += j.transpose() * j;
            g += j.transpose() * r;
            cost += r.norm_squared();
        },
        true,
    )?;
    Some(NormalEquations { h, g, cost })
}

/// Total squared reprojection error of both frames under `pose` (camera b from a).
/// Points come from each frame's own depth and stay fixed.
pub fn pair_cost(a: &FeatureFrame, b: &FeatureFrame, matches: &[Match], k: &CameraIntrinsics, pose: &Pose) -> Option<f64> {
    observation_cost(pose, &observations(a, b, matches, k), k)
}

pub fn pair_cost_gradient(
    a: &FeatureFrame,
    b: &FeatureFrame,
    matches: &[Match],
    k: &CameraIntrinsics,
    pose: &Pose,
) -> Option<Vector6<f64>> {
    normal_equations(pose, &observations(a, b, matches, k), k).map(|ne| 2.0 * ne.g)
}

/// Pose-only two-frame refinement. Observations that are not in front of
/// both cameras under `initial` are dropped before optimizing.
pub fn bundle_adjust_pair(
    a: &FeatureFrame,
    b: &FeatureFrame,
    matches: &[Match],
    k: &CameraIntrinsics,
    initial: &Pose,
    cfg: &BaConfig,
) -> Result<BaResult, GeomError> {
    let obs: Vec<PairObservation> = observations(a, b, matches, k)
        .into_iter()
        .filter(|o| observation_cost(initial, std::slice::from_ref(o), k).is_some())
        .collect();
    if obs.is_empty() {
        return Ok(BaResult {
            pose: *initial,
            initial_cost: 0.0,
            final_cost: 0.0,
            iterations: 0,
        });
    }
    let out = levenberg_marquardt(
        *initial,
        |p| normal_equations(p, &obs, k),
        |p| observation_cost(p, &obs, k),
        cfg.max_iterations,
    )
    .ok_or(GeomError::DivergedOptimization)?;
    if out.diverged {
        return Err(GeomError::DivergedOptimization);
    }
    let pose = out.pose.normalized();
    // Re-orthonormalization must not undo the descent.
    let (pose, final_cost) = match observation_cost(&pose, &obs, k) {
        Some(c) if c <= out.cost => (pose, c),
        _ => (out.pose, out.cost),
    };
    Ok(BaResult {
        pose,
        initial_cost: out.initial_cost,
        final_cost,
        iterations: out.iterations,
    })
}
