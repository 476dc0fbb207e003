use nalgebra::{Matrix2x6, Matrix6, SymmetricEigen, Vector2, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{skew, CameraIntrinsics, Correspondence, GeomError, Pose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub min_correspondences: usize,
    pub min_inliers: usize,
    pub reprojection_threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub sample_size: usize,
    /// Gauss-Newton iterations spent on each minimal sample.
    pub sample_iterations: usize,
    pub refine_iterations: usize,
    /// Minimal samples whose normal equations exceed this condition number are resampled.
    pub max_condition: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            min_correspondences: 6,
            min_inliers: 20,
            reprojection_threshold_px: 2.0,
            max_iterations: 100,
            confidence: 0.999,
            sample_size: 6,
            sample_iterations: 12,
            refine_iterations: 20,
            max_condition: 1e8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpSolution {
    /// Camera-from-reference transform.
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// RMS reprojection error over the inliers, in pixels.
    pub rmse: f64,
}

/// Damped Gauss-Newton state shared by the pose-only refiners.
pub(crate) struct NormalEquations {
    pub h: Matrix6<f64>,
    pub g: Vector6<f64>,
    pub cost: f64,
}

pub(crate) struct LmOutcome {
    pub pose: Pose,
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub diverged: bool,
    pub last_h: Matrix6<f64>,
}

pub(crate) fn levenberg_marquardt<B, C>(initial: Pose, build: B, cost: C, max_iterations: usize) -> Option<LmOutcome>
where
    B: Fn(&Pose) -> Option<NormalEquations>,
    C: Fn(&Pose) -> Option<f64>,
{
    let mut x = initial;
    let mut ne = build(&x)?;
    let initial_cost = ne.cost;
    let mut lambda = 1e-3;
    let mut consecutive_fail = 0;
    let mut accepted = 0;
    let mut iterations = 0;
    let mut diverged = false;
    while iterations < max_iterations && ne.cost > 1e-24 {
        iterations += 1;
        let mut damped = ne.h;
        for i in 0..6 {
            damped[(i, i)] += lambda * ne.h[(i, i)].max(1e-9);
        }
        let step = damped.cholesky().map(|c| c.solve(&(-ne.g)));
        let candidate = step.map(|d| x.retract(&d)).and_then(|p| cost(&p).map(|c| (p, c)));
        match candidate {
            Some((p, c)) if c <= ne.cost => {
                let rel = (ne.cost - c) / ne.cost.max(1e-300);
                x = p;
                accepted += 1;
                consecutive_fail = 0;
                lambda = (lambda / 10.0).max(1e-12);
                ne = build(&x)?;
                if rel < 1e-9 {
                    break;
                }
            }
            _ => {
                consecutive_fail += 1;
                lambda *= 10.0;
                if consecutive_fail >= 5 {
                    // A stalled descent at a stationary point is convergence,
                    // anything else is a genuine divergence.
                    let gnorm = ne.g.norm();
                    diverged = accepted == 0 && gnorm > 1e-6 * (1.0 + ne.cost);
                    break;
                }
            }
        }
    }
    Some(LmOutcome {
        pose: x,
        cost: ne.cost,
        initial_cost,
        iterations,
        diverged,
        last_h: ne.h,
    })
}

/// Reprojection residual and its Jacobian with respect to a right
/// perturbation of the camera-from-reference pose.
fn residual_and_jacobian(
    pose: &Pose,
    c: &Correspondence,
    k: &CameraIntrinsics,
) -> Option<(Vector2<f64>, Matrix2x6<f64>)> {
    let pc = pose.transform_point(&c.point3);
    if pc.z <= 1e-9 {
        return None;
    }
    let proj = k.project(&pc).ok()?;
    let jp = k.projection_jacobian(&pc);
    let mut dp = nalgebra::Matrix3x6::zeros();
    dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-pose.rotation * skew(&c.point3)));
    dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&pose.rotation);
    Some((proj - c.pixel, jp * dp))
}

fn reprojection_error(pose: &Pose, c: &Correspondence, k: &CameraIntrinsics) -> Option<f64> {
    let pc = pose.transform_point(&c.point3);
    if pc.z <= 1e-9 {
        return None;
    }
    k.project(&pc).ok().map(|p| (p - c.pixel).norm())
}

/// Sum of squared reprojection errors; `None` when a point falls behind the camera.
pub fn reprojection_cost(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics) -> Option<f64> {
    let mut total = 0.0;
    for c in corrs {
        let e = reprojection_error(pose, c, k)?;
        total += e * e;
    }
    Some(total)
}

/// Analytic gradient of [`reprojection_cost`] with respect to a right perturbation.
pub fn reprojection_cost_gradient(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics) -> Option<Vector6<f64>> {
    normal_equations(pose, corrs, k).map(|ne| 2.0 * ne.g)
}

fn normal_equations(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics) -> Option<NormalEquations> {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let mut cost = 0.0;
    for c in corrs {
        let (r, j) = residual_and_jacobian(pose, c, k)?;
        h += j.transpose() * j;
        g += j.transpose() * r;
        cost += r.norm_squared();
    }
    Some(NormalEquations { h, g, cost })
}

/// Nonlinear least-squares pose refinement over all given correspondences.
pub fn refine_pose(
    initial: &Pose,
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    max_iterations: usize,
) -> Result<(Pose, f64), GeomError> {
    let out = levenberg_marquardt(
        *initial,
        |p| normal_equations(p, corrs, k),
        |p| reprojection_cost(p, corrs, k),
        max_iterations,
    )
    .ok_or(GeomError::DivergedOptimization)?;
    if out.diverged {
        return Err(GeomError::DivergedOptimization);
    }
    Ok((out.pose.normalized(), out.cost))
}

fn condition_number(h: &Matrix6<f64>) -> f64 {
    let eig = SymmetricEigen::new(*h);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn score(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics, threshold: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = vec![false; corrs.len()];
    let mut count = 0;
    let mut sq = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        if let Some(e) = reprojection_error(pose, c, k) {
            if e < threshold {
                mask[i] = true;
                count += 1;
                sq += e * e;
            }
        }
    }
    (mask, count, sq)
}

fn select(corrs: &[Correspondence], mask: &[bool]) -> Vec<Correspondence> {
    corrs.iter().zip(mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect()
}

/// RANSAC over minimal samples solved by damped Gauss-Newton from `guess`
/// (identity when absent), followed by refinement on the consensus set.
///
/// Returns the camera-from-reference pose that maps each `point3` onto its `pixel`.
pub fn solve_pnp_ransac(
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
    guess: Option<&Pose>,
) -> Result<PnpSolution, GeomError> {
    let min_corr = cfg.min_correspondences.max(cfg.sample_size);
    if corrs.len() < min_corr {
        return Err(GeomError::TooFewCorrespondences {
            got: corrs.len(),
            min: min_corr,
        });
    }
    // Consensus is out of reach; skip the sampling.
    if corrs.len() < cfg.min_inliers {
        return Err(GeomError::NoConsensus {
            best: 0,
            min: cfg.min_inliers,
        });
    }
    let start = guess.copied().unwrap_or_else(Pose::identity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let thr = cfg.reprojection_threshold_px;
    let mut best: Option<(Pose, Vec<bool>, usize, f64)> = None;
    let mut needed = cfg.max_iterations;
    let mut it = 0;
    // The guess itself is evaluated as a free hypothesis.
    if guess.is_some() {
        let (mask, count, sq) = score(&start, corrs, k, thr);
        best = Some((start, mask, count, sq));
    }
    while it < needed.min(cfg.max_iterations) {
        it += 1;
        let idx = sample(&mut rng, corrs.len(), cfg.sample_size);
        let minimal: Vec<Correspondence> = idx.iter().map(|i| corrs[i]).collect();
        let Some(out) = levenberg_marquardt(
            start,
            |p| normal_equations(p, &minimal, k),
            |p| reprojection_cost(p, &minimal, k),
            cfg.sample_iterations,
        ) else {
            continue;
        };
        if condition_number(&out.last_h) > cfg.max_condition {
            continue;
        }
        let (mask, count, sq) = score(&out.pose, corrs, k, thr);
        let better = match &best {
            None => true,
            Some((_, _, bc, bsq)) => count > *bc || (count == *bc && sq < *bsq),
        };
        if better {
            best = Some((out.pose, mask, count, sq));
            let w = count as f64 / corrs.len() as f64;
            if w >= 1.0 {
                needed = it;
            } else if w > 0.0 {
                let denom = (1.0 - w.powi(cfg.sample_size as i32)).ln();
                let n = ((1.0 - cfg.confidence).ln() / denom).ceil();
                if n.is_finite() {
                    needed = (n as usize).max(1);
                }
            }
        }
    }
    let Some((pose, mask, count, _)) = best else {
        return Err(GeomError::NoConsensus {
            best: 0,
            min: cfg.min_inliers,
        });
    };
    if count < cfg.min_inliers.max(cfg.sample_size) {
        return Err(GeomError::NoConsensus {
            best: count,
            min: cfg.min_inliers,
        });
    }

    let mut pose = pose;
    let mut mask = mask;
    for _ in 0..2 {
        let subset = select(corrs, &mask);
        match refine_pose(&pose, &subset, k, cfg.refine_iterations) {
            Ok((p, _)) => pose = p,
            Err(_) => break,
        }
        let (m, _, _) = score(&pose, corrs, k, thr);
        if m == mask {
            break;
        }
        mask = m;
    }
    let (mask, count, sq) = score(&pose, corrs, k, thr);
    if count < cfg.min_inliers.max(cfg.sample_size) {
        return Err(GeomError::NoConsensus {
            best: count,
            min: cfg.min_inliers,
        });
    }
    Ok(PnpSolution {
        pose,
        inliers: mask,
        inlier_count: count,
        rmse: (sq / count as f64).sqrt(),
    })
}
