use std::collections::VecDeque;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use super::skyline::{reverse_cuthill_mckee, Skyline};
use super::{GraphError, Link, MultiSessionMap, NodeId};
use crate::geom::{skew, Pose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeConfig {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub initial_lambda: f64,
    /// Huber threshold on the whitened link error; `None` disables the kernel.
    pub huber_delta: Option<f64>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            relative_tolerance: 1e-9,
            initial_lambda: 1e-3,
            huber_delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub optimized_nodes: usize,
}

/// Residual `log(T⁻¹ · X_from⁻¹ · X_to)` of one link.
pub fn link_residual(link: &Link, from: &Pose, to: &Pose) -> Vector6<f64> {
    link.transform.inverse().compose(&from.between(to)).log()
}

fn robust_cost(r: &Vector6<f64>, info: &Matrix6<f64>, huber: Option<f64>) -> (f64, f64) {
    let e2 = (r.transpose() * info * r)[(0, 0)].max(0.0);
    match huber {
        Some(d) if e2 > d * d => {
            let e = e2.sqrt();
            (2.0 * d * e - d * d, d / e)
        }
        _ => (e2, 1.0),
    }
}

fn cost_of(links: &[&Link], poses: &[Pose], huber: Option<f64>) -> f64 {
    links
        .iter()
        .map(|l| {
            let r = link_residual(l, &poses[l.from.0 as usize], &poses[l.to.0 as usize]);
            robust_cost(&r, &l.information, huber).0
        })
        .sum()
}

/// Sum of squared whitened residuals over every link of the map.
pub fn total_cost(map: &MultiSessionMap) -> f64 {
    let poses: Vec<Pose> = map.nodes.iter().map(|n| n.opt_pose).collect();
    let links: Vec<&Link> = map.links.iter().collect();
    cost_of(&links, &poses, None)
}

fn reachable(map: &MultiSessionMap, anchor: NodeId) -> Vec<bool> {
    let adj = map.adjacency();
    let mut seen = vec![false; map.nodes.len()];
    seen[anchor.0 as usize] = true;
    let mut queue = VecDeque::from([anchor]);
    while let Some(v) = queue.pop_front() {
        for &u in &adj[v.0 as usize] {
            if !seen[u.0 as usize] {
                seen[u.0 as usize] = true;
                queue.push_back(u);
            }
        }
    }
    seen
}

/// Inverse right Jacobian of SO(3) at `phi`.
fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-8 {
        return Matrix3::identity() + 0.5 * k;
    }
    let c = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + c * k * k
}

/// Jacobians of a link residual w.r.t. right perturbations of both endpoint
/// poses.
pub(crate) fn link_jacobians(link: &Link, from: &Pose, to: &Pose) -> (Matrix6<f64>, Matrix6<f64>) {
    let rt_t = link.transform.rotation.transpose();
    let r_e = rt_t * from.rotation.transpose() * to.rotation;
    let phi = Pose::new(r_e, Vector3::zeros()).log().fixed_rows::<3>(0).into_owned();
    let jinv = so3_right_jacobian_inv(&phi);
    let a = from.rotation.transpose() * (to.translation - from.translation);

    let mut jf = Matrix6::zeros();
    jf.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-jinv * to.rotation.transpose() * from.rotation));
    jf.fixed_view_mut::<3, 3>(3, 0).copy_from(&(rt_t * skew(&a)));
    jf.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-rt_t));

    let mut jt = Matrix6::zeros();
    jt.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    jt.fixed_view_mut::<3, 3>(3, 3).copy_from(&r_e);
    (jf, jt)
}

/// Damped Gauss-Newton over every node reachable from the anchor, which is
/// held fixed. Unreachable nodes are left untouched and reported through
/// `GraphError::DisconnectedGraph` after the reachable part is optimized.
pub fn optimize(map: &mut MultiSessionMap, cfg: &OptimizeConfig) -> Result<OptimizeReport, GraphError> {
    let anchor = map.anchor().ok_or(GraphError::EmptyMap)?;
    let seen = reachable(map, anchor);
    let n = map.nodes.len();

    // Variable index per node (None for the anchor and unreachable nodes).
    let mut var: Vec<Option<usize>> = vec![None; n];
    let mut var_nodes = Vec::new();
    for i in 0..n {
        if seen[i] && i != anchor.0 as usize {
            var[i] = Some(var_nodes.len());
            var_nodes.push(i);
        }
    }
    let links: Vec<&Link> = map
        .links
        .iter()
        .filter(|l| seen[l.from.0 as usize] && seen[l.to.0 as usize])
        .collect();

    let mut poses: Vec<Pose> = map.nodes.iter().map(|nd| nd.opt_pose).collect();
    let initial_cost = cost_of(&links, &poses, cfg.huber_delta);
    let mut report = OptimizeReport {
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
        cost_history: vec![initial_cost],
        optimized_nodes: var_nodes.len(),
    };

    let m = var_nodes.len();
    if m > 0 && !links.is_empty() {
        let mut adj = vec![Vec::new(); m];
        for l in &links {
            if let (Some(a), Some(b)) = (var[l.from.0 as usize], var[l.to.0 as usize]) {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let perm = reverse_cuthill_mckee(&adj);
        let mut pos = vec![0; m];
        for (new, &old) in perm.iter().enumerate() {
            pos[old] = new;
        }
        let mut first_block: Vec<usize> = (0..m).collect();
        for a in 0..m {
            for &b in &adj[a] {
                let (pa, pb) = (pos[a], pos[b]);
                if pb < pa {
                    first_block[pa] = first_block[pa].min(pb);
                }
            }
        }
        let first: Vec<usize> = (0..6 * m).map(|i| 6 * first_block[i / 6]).collect();
        let block = |node: usize| var[node].map(|v| pos[v]);

        let mut cost = initial_cost;
        let mut lambda = cfg.initial_lambda;
        let mut consecutive_failures = 0;
        for _ in 0..cfg.max_iterations {
            report.iterations += 1;
            let mut h = Skyline::new(first.clone());
            let mut g = vec![0.0; 6 * m];
            for l in &links {
                let (f, t) = (l.from.0 as usize, l.to.0 as usize);
                let r = link_residual(l, &poses[f], &poses[t]);
                let (_, w) = robust_cost(&r, &l.information, cfg.huber_delta);
                let (jf, jt) = link_jacobians(l, &poses[f], &poses[t]);
                let omega = l.information * w;
                let blocks = [(block(f), jf), (block(t), jt)];
                for (bi, ji) in &blocks {
                    let Some(bi) = *bi else { continue };
                    let gi = ji.transpose() * omega * r;
                    for k in 0..6 {
                        g[6 * bi + k] += gi[k];
                    }
                    for (bj, jj) in &blocks {
                        let Some(bj) = *bj else { continue };
                        if bj > bi {
                            continue;
                        }
                        let hij = ji.transpose() * omega * jj;
                        for a in 0..6 {
                            for b in 0..6 {
                                let (row, col) = (6 * bi + a, 6 * bj + b);
                                if col <= row {
                                    h.add(row, col, hij[(a, b)]);
                                }
                            }
                        }
                    }
                }
            }
            let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if gnorm < 1e-12 {
                break;
            }
            let diag: Vec<f64> = (0..6 * m).map(|i| h.get(i, i)).collect();
            let mut damped = h;
            for (i, d) in diag.iter().enumerate() {
                damped.add(i, i, lambda * d.max(1e-12) + 1e-12);
            }
            let step_ok = damped.factor();
            let mut accepted = false;
            if step_ok {
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                let delta = damped.solve(&neg);
                let mut trial = poses.clone();
                for &node in &var_nodes {
                    let b = block(node).unwrap();
                    let d = Vector6::from_fn(|k, _| delta[6 * b + k]);
                    trial[node] = poses[node].retract(&d).normalized();
                }
                let new_cost = cost_of(&links, &trial, cfg.huber_delta);
                if new_cost.is_finite() && new_cost <= cost {
                    let rel = (cost - new_cost) / cost.max(1e-300);
                    poses = trial;
                    cost = new_cost;
                    report.cost_history.push(cost);
                    lambda = (lambda / 10.0).max(1e-12);
                    consecutive_failures = 0;
                    accepted = true;
                    if rel < cfg.relative_tolerance {
                        break;
                    }
                }
            }
            if !accepted {
                lambda *= 10.0;
                consecutive_failures += 1;
                if consecutive_failures >= 10 {
                    break;
                }
            }
        }
        report.final_cost = cost;
        for &node in &var_nodes {
            map.nodes[node].opt_pose = poses[node];
        }
    }

    let unreached: Vec<NodeId> = (0..n).filter(|&i| !seen[i]).map(|i| NodeId(i as u32)).collect();
    if unreached.is_empty() {
        Ok(report)
    } else {
        Err(GraphError::DisconnectedGraph { unreached, report })
    }
}
