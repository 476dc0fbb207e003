//! Two-step transform estimation between a query frame and a map frame:
//! global NNDR matching + PnP, then window-guided matching + PnP refit and
//! pose-only pair refinement.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{guided_match, nndr_match, FamilyId, FeatureFrame, Match};
use crate::geom::{
    bundle_adjust_pair, solve_pnp_ransac, BaConfig, CameraIntrinsics, Correspondence, GeomError, Pose, RansacConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Global NNDR matching and the first PnP.
    Step1,
    /// Window-guided matching and the PnP refit.
    Step2,
    /// Final pair refinement and inlier check.
    Refine,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Step1 => "step1",
            Stage::Step2 => "step2",
            Stage::Refine => "refine",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("descriptor family mismatch: {0} vs {1}")]
    FamilyMismatch(FamilyId, FamilyId),
    #[error("registration rejected at {stage}: {inliers} inliers")]
    RejectedLowInliers { stage: Stage, inliers: usize },
}

impl RegistrationError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            RegistrationError::RejectedLowInliers { stage, .. } => Some(*stage),
            RegistrationError::FamilyMismatch(..) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationConfig {
    pub nndr_ratio: f64,
    pub window_px: f64,
    pub min_inliers: usize,
    pub ransac: RansacConfig,
    pub ba: BaConfig,
    /// Run step 2 from the supplied prior when step 1 fails.
    pub allow_prior_guess: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            nndr_ratio: 0.8,
            window_px: 20.0,
            min_inliers: 20,
            ransac: RansacConfig::default(),
            ba: BaConfig::default(),
            allow_prior_guess: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    /// Pose of the query camera in the target camera frame.
    pub transform: Pose,
    pub inlier_count: usize,
    pub step1_inliers: usize,
    pub step2_matches: usize,
    /// RMS reprojection error of the final inliers, in pixels.
    pub rmse: f64,
    /// Target/query index pairs of the final inliers.
    pub inlier_matches: Vec<Match>,
}

fn correspondences(target: &FeatureFrame, query: &FeatureFrame, matches: &[Match], k: &CameraIntrinsics) -> (Vec<Correspondence>, Vec<Match>) {
    matches
        .iter()
        .filter_map(|m| {
            target
                .point3(m.index_a, k)
                .map(|p| (Correspondence::new(p, query.keypoints[m.index_b].pixel), *m))
        })
        .unzip()
}

fn reject(stage: Stage, inliers: usize) -> RegistrationError {
    RegistrationError::RejectedLowInliers { stage, inliers }
}

/// Estimates the pose of `query` relative to `target` (whose keypoints carry
/// depth). `prior` is an optional guess of that pose.
pub fn estimate_transform(
    query: &FeatureFrame,
    target: &FeatureFrame,
    k: &CameraIntrinsics,
    cfg: &RegistrationConfig,
    prior: Option<&Pose>,
) -> Result<Registration, RegistrationError> {
    if query.family != target.family {
        return Err(RegistrationError::FamilyMismatch(target.family, query.family));
    }
    let ransac = RansacConfig {
        min_inliers: cfg.min_inliers,
        ..cfg.ransac
    };
    // The PnP solver works with camera-query-from-target.
    let guess = prior.map(|p| p.inverse());

    // Step 1: global matching + PnP.
    let global = nndr_match(target, query, cfg.nndr_ratio).expect("family and ratio checked");
    let (corrs, global) = correspondences(target, query, &global, k);
    let step1 = solve_pnp_ransac(&corrs, k, &ransac, guess.as_ref());
    let (pose1, step1_inliers): (Pose, Vec<Match>) = match step1 {
        Ok(sol) => (
            sol.pose,
            global.iter().zip(&sol.inliers).filter(|(_, &ok)| ok).map(|(m, _)| *m).collect(),
        ),
        Err(e) => match (cfg.allow_prior_guess, guess) {
            (true, Some(g)) => (g, Vec::new()),
            _ => {
                let best = match e {
                    GeomError::NoConsensus { best, .. } => best,
                    _ => corrs.len(),
                };
                return Err(reject(Stage::Step1, best));
            }
        },
    };

    // Step 2: guided matching around the step-1 estimate, keeping step-1
    // inliers that do not conflict with a guided match.
    let mut matches = guided_match(target, query, &pose1, k, cfg.window_px, cfg.nndr_ratio);
    let mut used_a = vec![false; target.len()];
    let mut used_b = vec![false; query.len()];
    for m in &matches {
        used_a[m.index_a] = true;
        used_b[m.index_b] = true;
    }
    for m in &step1_inliers {
        if !used_a[m.index_a] && !used_b[m.index_b] {
            used_a[m.index_a] = true;
            used_b[m.index_b] = true;
            matches.push(*m);
        }
    }
    matches.sort_by_key(|m| (m.index_a, m.index_b));
    let step2_matches = matches.len();
    let (corrs2, matches) = correspondences(target, query, &matches, k);
    let sol2 = solve_pnp_ransac(&corrs2, k, &ransac, Some(&pose1)).map_err(|e| match e {
        GeomError::NoConsensus { best, .. } => reject(Stage::Step2, best),
        _ => reject(Stage::Step2, corrs2.len()),
    })?;
    let inlier_matches: Vec<Match> = matches
        .iter()
        .zip(&sol2.inliers)
        .filter(|(_, &ok)| ok)
        .map(|(m, _)| *m)
        .collect();

    // Pair refinement on the refit inliers.
    let refined = bundle_adjust_pair(target, query, &inlier_matches, k, &sol2.pose, &cfg.ba)
        .map(|r| r.pose)
        .unwrap_or(sol2.pose);
    let inlier_corrs: Vec<Correspondence> = correspondences(target, query, &inlier_matches, k).0;
    let thr2 = cfg.ransac.reprojection_threshold_px.powi(2);
    let mut final_matches = Vec::new();
    let mut sq = 0.0;
    for (c, m) in inlier_corrs.iter().zip(&inlier_matches) {
        let e2 = match k.project(&refined.transform_point(&c.point3)) {
            Ok(u) => (u - c.pixel).norm_squared(),
            Err(_) => f64::INFINITY,
        };
        if e2 < thr2 {
            sq += e2;
            final_matches.push(*m);
        }
    }
    let n = final_matches.len();
    if n < cfg.min_inliers {
        return Err(reject(Stage::Refine, n));
    }
    Ok(Registration {
        transform: refined.inverse(),
        inlier_count: n,
        step1_inliers: step1_inliers.len(),
        step2_matches,
        rmse: (sq / n as f64).sqrt(),
        inlier_matches: final_matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::tests::random_real;
    use crate::features::{Descriptor, Keypoint};
    use nalgebra::{Vector2, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Target observes landmarks in its own frame; the query sits at
    /// `query_in_target` and sees a subset of them with pixel noise.
    fn pair(query_in_target: &Pose, noise: f64, rng: &mut ChaCha8Rng) -> (FeatureFrame, FeatureFrame) {
        let k = CameraIntrinsics::default();
        let fam = FamilyId::Surf;
        let normal = Normal::new(0.0, noise.max(1e-12)).unwrap();
        let mut target = FeatureFrame::new(0, 0.0, fam);
        let mut query = FeatureFrame::new(1, 1.0, fam);
        let to_query = query_in_target.inverse();
        while target.len() < 100 {
            let p = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(2.0..5.0));
            let u = k.project(&p).unwrap();
            if !k.contains(&u) {
                continue;
            }
            let d = random_real(fam, rng);
            target.push(Keypoint::new(u, p.z), d.clone());
            let q = to_query.transform_point(&p);
            if rng.random_bool(0.6) {
                if let Ok(uq) = k.project(&q) {
                    if k.contains(&uq) && q.z > 0.0 {
                        let jitter = Vector2::new(normal.sample(rng), normal.sample(rng));
                        let noisy = Descriptor::real(fam, d.values().iter().map(|x| x + rng.random_range(-0.05..0.05)).collect()).unwrap();
                        query.push(Keypoint::new(uq + jitter, q.z), noisy);
                    }
                }
            }
        }
        for _ in 0..30 {
            let u = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            query.push(Keypoint::new(u, 3.0), random_real(fam, rng));
        }
        (target, query)
    }

    #[test]
    fn self_registration_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (target, _) = pair(&Pose::identity(), 0.0, &mut rng);
        let reg = estimate_transform(&target, &target, &CameraIntrinsics::default(), &RegistrationConfig::default(), None).unwrap();
        assert!(reg.transform.max_abs_diff(&Pose::identity()) < 1e-9);
        assert_eq!(reg.inlier_count, target.len());
    }

    #[test]
    fn recovers_planted_motion_with_guided_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = Pose::from_axis_angle(Vector3::new(0.2, 1.0, 0.0), 0.15, Vector3::new(0.3, -0.05, 0.2));
        for _ in 0..5 {
            let (target, query) = pair(&truth, 0.5, &mut rng);
            let reg = estimate_transform(&query, &target, &CameraIntrinsics::default(), &RegistrationConfig::default(), None).unwrap();
            let d = reg.transform.between(&truth);
            assert!(d.translation_norm() < 1e-2 && d.rotation_angle() < 1e-2);
            assert!(reg.step2_matches >= reg.step1_inliers);
            assert!(reg.rmse < 2.0);
        }
    }

    #[test]
    fn unrelated_query_is_rejected_at_step1() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (target, _) = pair(&Pose::identity(), 0.0, &mut rng);
        let mut query = FeatureFrame::new(5, 0.0, FamilyId::Surf);
        for _ in 0..100 {
            query.push(Keypoint::new(Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)), 2.0), random_real(FamilyId::Surf, &mut rng));
        }
        let err = estimate_transform(&query, &target, &CameraIntrinsics::default(), &RegistrationConfig::default(), None).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Step1));
    }

    #[test]
    fn deterministic_and_family_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = Pose::from_yaw(0.1, Vector3::new(0.1, 0.0, 0.1));
        let (target, query) = pair(&truth, 0.5, &mut rng);
        let cfg = RegistrationConfig::default();
        let a = estimate_transform(&query, &target, &CameraIntrinsics::default(), &cfg, None).unwrap();
        let b = estimate_transform(&query, &target, &CameraIntrinsics::default(), &cfg, None).unwrap();
        assert_eq!(a, b);
        let other = FeatureFrame::new(9, 0.0, FamilyId::Sift);
        assert!(matches!(
            estimate_transform(&other, &target, &CameraIntrinsics::default(), &cfg, None),
            Err(RegistrationError::FamilyMismatch(..))
        ));
    }
}
