//! Discrete Bayes filter over loop-closure hypotheses plus a "new location"
//! event.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::NodeId;
use crate::vocabulary::LikelihoodVector;

#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub p_new: f64,
    pub p_loop: BTreeMap<NodeId, f64>,
}

impl Default for Belief {
    fn default() -> Self {
        Self {
            p_new: 1.0,
            p_loop: BTreeMap::new(),
        }
    }
}

impl Belief {
    pub fn total(&self) -> f64 {
        self.p_new + self.p_loop.values().sum::<f64>()
    }

    pub fn get(&self, node: NodeId) -> f64 {
        self.p_loop.get(&node).copied().unwrap_or(0.0)
    }

    /// Node with the largest posterior, ties to the lower id.
    pub fn argmax(&self) -> Option<(NodeId, f64)> {
        self.p_loop
            .iter()
            .fold(None, |best: Option<(NodeId, f64)>, (&n, &p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((n, p)),
            })
    }

    /// Moves the belief onto `node` after an accepted localization: the node
    /// receives `mass`, everything else is scaled to share the remainder.
    pub fn recenter(&mut self, node: NodeId, mass: f64) {
        let mass = mass.clamp(0.0, 1.0);
        let rest = self.total() - self.get(node);
        let scale = if rest > 0.0 { (1.0 - mass) / rest } else { 0.0 };
        self.p_new *= scale;
        for p in self.p_loop.values_mut() {
            *p *= scale;
        }
        self.p_loop.insert(node, mass);
        if rest <= 0.0 {
            self.p_new = 1.0 - mass;
        }
    }

    fn normalize(&mut self) {
        let s = self.total();
        if s > 0.0 && s.is_finite() {
            self.p_new /= s;
            for p in self.p_loop.values_mut() {
                *p /= s;
            }
        } else {
            *self = Belief::default();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionModel {
    /// Belief is carried over unchanged.
    Identity,
    /// A node keeps `stay` of its mass, spread equally over itself and its
    /// graph neighbors; the rest leaks to the new-location event. The
    /// new-location event keeps `stay` and seeds the nodes uniformly with the
    /// rest.
    Diffusion { stay: f64 },
}

impl Default for TransitionModel {
    fn default() -> Self {
        TransitionModel::Diffusion { stay: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesConfig {
    pub transition: TransitionModel,
    pub threshold: f64,
}

impl Default for BayesConfig {
    fn default() -> Self {
        Self {
            transition: TransitionModel::default(),
            threshold: 0.15,
        }
    }
}

/// Normalized likelihoods for the eligible nodes and the new-location event.
///
/// `L(i) = 1 + max(0, (s_i − μ)/σ)` with μ, σ the mean and standard
/// deviation of the nonzero scores, and `L(new) = max(1, 1 + μ/σ)`. Without
/// any nonzero score `L(new) = 2`; with a degenerate spread every value is 1.
pub fn normalize_likelihood(lik: &LikelihoodVector, nodes: &[NodeId]) -> (f64, Vec<f64>) {
    let nonzero: Vec<f64> = nodes.iter().map(|&n| lik.get(n)).filter(|&s| s > 0.0).collect();
    if nonzero.is_empty() {
        return (2.0, vec![1.0; nodes.len()]);
    }
    let mean = nonzero.iter().sum::<f64>() / nonzero.len() as f64;
    let var = nonzero.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / nonzero.len() as f64;
    let std = var.sqrt();
    if std <= 1e-12 * mean.max(1e-300) {
        return (1.0, vec![1.0; nodes.len()]);
    }
    let l = nodes.iter().map(|&n| 1.0 + ((lik.get(n) - mean) / std).max(0.0)).collect();
    (((mean / std) + 1.0).max(1.0), l)
}

/// One predict-update step over the eligible `nodes` (sorted, unique).
/// Nodes not yet in the belief receive an equal share of the new-location
/// mass; belief entries outside `nodes` are dropped. `neighbors(n)` lists the
/// graph neighbors of `n`.
pub fn bayes_update<'a, F>(
    belief: &Belief,
    lik: &LikelihoodVector,
    nodes: &[NodeId],
    neighbors: F,
    cfg: &BayesConfig,
) -> Belief
where
    F: Fn(NodeId) -> &'a [NodeId],
{
    // Prior over the eligible set.
    let fresh: Vec<NodeId> = nodes.iter().copied().filter(|n| !belief.p_loop.contains_key(n)).collect();
    let share = belief.p_new / (fresh.len() + 1) as f64;
    let mut prior = Belief {
        p_new: share,
        p_loop: nodes.iter().map(|&n| (n, belief.p_loop.get(&n).copied().unwrap_or(share))).collect(),
    };
    prior.normalize();

    let predicted = match cfg.transition {
        TransitionModel::Identity => prior,
        TransitionModel::Diffusion { stay } => {
            let mut out = Belief {
                p_new: prior.p_new * if nodes.is_empty() { 1.0 } else { stay },
                p_loop: nodes.iter().map(|&n| (n, 0.0)).collect(),
            };
            if !nodes.is_empty() {
                let seed = prior.p_new * (1.0 - stay) / nodes.len() as f64;
                for p in out.p_loop.values_mut() {
                    *p += seed;
                }
            }
            for (&j, &m) in &prior.p_loop {
                let targets: Vec<NodeId> = std::iter::once(j)
                    .chain(neighbors(j).iter().copied().filter(|n| *n != j && out.p_loop.contains_key(n)))
                    .collect();
                let part = m * stay / targets.len() as f64;
                for t in targets {
                    *out.p_loop.get_mut(&t).unwrap() += part;
                }
                out.p_new += m * (1.0 - stay);
            }
            out
        }
    };

    let (l_new, l) = normalize_likelihood(lik, nodes);
    let mut post = Belief {
        p_new: predicted.p_new * l_new,
        p_loop: nodes
            .iter()
            .zip(&l)
            .map(|(&n, &li)| (n, predicted.p_loop[&n] * li))
            .collect(),
    };
    post.normalize();
    post
}

/// Returns the most likely node when its posterior, pooled with its graph
/// neighbors', reaches `threshold`.
pub fn check_hypothesis<'a, F>(belief: &Belief, threshold: f64, neighbors: F) -> Option<NodeId>
where
    F: Fn(NodeId) -> &'a [NodeId],
{
    let (best, p) = belief.argmax()?;
    let pooled = p + neighbors(best).iter().filter(|n| **n != best).map(|n| belief.get(*n)).sum::<f64>();
    (pooled >= threshold).then_some(best)
}
