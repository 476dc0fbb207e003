//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero when
//! any criterion fails.
//!
//! `MSSLAM_ACCEPTANCE_SEEDS=n` shortens the experiment criteria (5-10) to
//! `n` seeds for local iteration; such runs are reported as partial and
//! never count as a pass; `0` skips them.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use msslam::bayes::{bayes_update, Belief, BayesConfig, TransitionModel};
use msslam::eval::{run_experiment, ExperimentConfig, ExperimentResults, TimelineRow, BASELINE_ID, QUERY_IDS};
use msslam::features::{descriptor_distance, nndr_match, Descriptor, FamilyId, FeatureFrame, Keypoint, Match};
use msslam::geom::{
    bundle_adjust_pair, pair_cost, pair_cost_gradient, reprojection_cost, reprojection_cost_gradient, solve_pnp_ransac,
    BaConfig, CameraIntrinsics, Correspondence, Pose, RansacConfig,
};
use msslam::graph::{diagonal_information, Link, LinkKind, MapNode, MultiSessionMap, NodeId, OptimizeConfig, SessionId};
use msslam::io::map_hash;
use msslam::slam::{detect_proximity, localize_session, map_session, SlamConfig};
use msslam::synthworld::FamilyPreset;
use msslam::vocabulary::{Indexing, LikelihoodVector, SearchBackend, Vocabulary, WordId};

const SEEDS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn k() -> CameraIntrinsics {
    CameraIntrinsics::default()
}

fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
    Pose::exp(&Vector6::from_fn(|i, _| {
        if i < 3 {
            rng.random_range(-rot..rot)
        } else {
            rng.random_range(-trans..trans)
        }
    }))
}

/// Larger of the rotation angle and the translation distance between two poses.
fn pose_error(a: &Pose, b: &Pose) -> f64 {
    a.between(b).rotation_angle().max((a.translation - b.translation).norm())
}

fn relative_error(a: &Vector6<f64>, b: &Vector6<f64>) -> f64 {
    (a - b).norm() / a.norm().max(1e-12)
}

fn central_difference(x: &Pose, f: impl Fn(&Pose) -> f64) -> Vector6<f64> {
    let h = 1e-6;
    Vector6::from_fn(|i, _| {
        let mut e = Vector6::zeros();
        e[i] = h;
        (f(&x.retract(&e)) - f(&x.retract(&-e))) / (2.0 * h)
    })
}

/// Points in front of the reference camera that `pose` also projects into the image.
fn planted(n: usize, pose: &Pose, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Correspondence> {
    let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    let mut out = Vec::new();
    while out.len() < n {
        let p = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0));
        let Ok(mut px) = k().project(&pose.transform_point(&p)) else {
            continue;
        };
        if !k().contains(&px) {
            continue;
        }
        if sigma > 0.0 {
            px += Vector2::new(noise.sample(rng), noise.sample(rng));
        }
        out.push(Correspondence::new(p, px));
    }
    out
}

/// Two frames observing the same points, b = pose · a, with identity matches.
fn planted_pair(pose: &Pose, n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> (FeatureFrame, FeatureFrame, Vec<Match>) {
    let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    let mut fa = FeatureFrame::new(0, 0.0, FamilyId::Surf);
    let mut fb = FeatureFrame::new(1, 1.0, FamilyId::Surf);
    let mut matches = Vec::new();
    while matches.len() < n {
        let p = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(2.0..6.0));
        let pb = pose.transform_point(&p);
        let (Ok(ua), Ok(ub)) = (k().project(&p), k().project(&pb)) else {
            continue;
        };
        if !k().contains(&ua) || !k().contains(&ub) {
            continue;
        }
        let mut jitter = |u: Vector2<f64>| {
            if sigma > 0.0 {
                u + Vector2::new(noise.sample(rng), noise.sample(rng))
            } else {
                u
            }
        };
        let (ja, jb) = (jitter(ua), jitter(ub));
        fa.push(Keypoint::new(ja, p.z), Descriptor::zeros(FamilyId::Surf));
        fb.push(Keypoint::new(jb, pb.z), Descriptor::zeros(FamilyId::Surf));
        let i = matches.len();
        matches.push(Match {
            index_a: i,
            index_b: i,
            distance: 0.0,
        });
    }
    (fa, fb, matches)
}

fn geometry_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut worst_clean: f64 = 0.0;
    let mut worst_noisy: f64 = 0.0;
    for trial in 0..25 {
        let truth = random_pose(&mut rng, 0.4, 0.3);
        let cfg = RansacConfig {
            seed: trial,
            ..RansacConfig::default()
        };
        let clean = planted(50, &truth, 0.0, &mut rng);
        worst_clean = match solve_pnp_ransac(&clean, &k(), &cfg, None) {
            Ok(s) => worst_clean.max(pose_error(&truth, &s.pose)),
            Err(_) => f64::INFINITY,
        };

        let mut noisy = planted(60, &truth, 0.5, &mut rng);
        for c in noisy.iter_mut().take(18) {
            c.pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        worst_noisy = match solve_pnp_ransac(&noisy, &k(), &cfg, None) {
            Ok(s) => worst_noisy.max(pose_error(&truth, &s.pose)),
            Err(_) => f64::INFINITY,
        };
    }

    let mut ba_increases = 0;
    let mut worst_grad: f64 = 0.0;
    for _ in 0..100 {
        let truth = random_pose(&mut rng, 0.3, 0.3);
        let (a, b, m) = planted_pair(&truth, 30, 0.7, &mut rng);
        let start = truth.retract(&Vector6::from_fn(|_, _| rng.random_range(-0.04..0.04)));
        let before = pair_cost(&a, &b, &m, &k(), &start).unwrap();
        match bundle_adjust_pair(&a, &b, &m, &k(), &start, &BaConfig::default()) {
            Ok(res) if pair_cost(&a, &b, &m, &k(), &res.pose).unwrap() <= before => {}
            _ => ba_increases += 1,
        }

        let x = truth.retract(&Vector6::from_fn(|_, _| rng.random_range(-0.05..0.05)));
        let g = pair_cost_gradient(&a, &b, &m, &k(), &x).unwrap();
        let fd = central_difference(&x, |p| pair_cost(&a, &b, &m, &k(), p).unwrap());
        worst_grad = worst_grad.max(relative_error(&g, &fd));

        let corrs = planted(30, &truth, 1.0, &mut rng);
        let g = reprojection_cost_gradient(&x, &corrs, &k()).unwrap();
        let fd = central_difference(&x, |p| reprojection_cost(p, &corrs, &k()).unwrap());
        worst_grad = worst_grad.max(relative_error(&g, &fd));
    }

    outcome(
        worst_clean <= 1e-6 && worst_noisy <= 5e-3 && ba_increases == 0 && worst_grad <= 1e-5,
        format!(
            "PnP noiseless err {worst_clean:.2e} (<= 1e-6), noisy+30% outliers err {worst_noisy:.2e} (<= 5e-3); \
             BA increases {ba_increases}/100; worst gradient rel err {worst_grad:.2e} (<= 1e-5)"
        ),
    )
}

fn random_descriptor(family: FamilyId, rng: &mut ChaCha8Rng) -> Descriptor {
    let values: Vec<f32> = (0..family.dimension())
        .map(|_| {
            if family.is_binary() {
                rng.random_range(0..2) as f32
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect();
    Descriptor::from_values(family, &values).unwrap()
}

/// A perturbed copy: a few flipped bits or small additive noise.
fn perturbed(d: &Descriptor, rng: &mut ChaCha8Rng) -> Descriptor {
    let mut v = d.values();
    if d.family().is_binary() {
        for _ in 0..rng.random_range(0..4) {
            let i = rng.random_range(0..v.len());
            v[i] = 1.0 - v[i];
        }
    } else {
        for x in &mut v {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    Descriptor::from_values(d.family(), &v).unwrap()
}

fn frame_of(family: FamilyId, descs: Vec<Descriptor>) -> FeatureFrame {
    let mut f = FeatureFrame::new(0, 0.0, family);
    for (i, d) in descs.into_iter().enumerate() {
        f.push(Keypoint::new(Vector2::new(i as f64, 0.0), 1.0), d);
    }
    f
}

/// NNDR matching straight from its definition, on a full distance table.
fn oracle_nndr(a: &FeatureFrame, b: &FeatureFrame, ratio: f64) -> Vec<(usize, usize, f64)> {
    if b.len() < 2 {
        return Vec::new();
    }
    let dist: Vec<Vec<f64>> = a
        .descriptors
        .iter()
        .map(|x| b.descriptors.iter().map(|y| descriptor_distance(x, y).unwrap()).collect())
        .collect();
    let nearest: Vec<(usize, f64, bool)> = dist
        .iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&x, &y| row[x].total_cmp(&row[y]).then(x.cmp(&y)));
            let (j1, j2) = (order[0], order[1]);
            (j1, row[j1], row[j1] < ratio * row[j2])
        })
        .collect();
    let mut out = Vec::new();
    for j in 0..b.len() {
        let claimant = (0..a.len())
            .filter(|&i| nearest[i].0 == j)
            .min_by(|&x, &y| nearest[x].1.total_cmp(&nearest[y].1).then(x.cmp(&y)));
        if let Some(i) = claimant.filter(|&i| nearest[i].2) {
            out.push((i, j, nearest[i].1));
        }
    }
    out.sort_by_key(|m| m.0);
    out
}

/// Incremental vocabulary from its definition: a descriptor joins its
/// nearest word when the ratio test passes and founds a new word otherwise.
#[derive(Default)]
struct OracleVocabulary {
    prototypes: Vec<Descriptor>,
    postings: Vec<BTreeMap<u32, u32>>,
}

impl OracleVocabulary {
    fn nearest(&self, d: &Descriptor, ratio: f64) -> Option<u32> {
        if self.prototypes.len() < 2 {
            return None;
        }
        let dist: Vec<f64> = self.prototypes.iter().map(|p| descriptor_distance(d, p).unwrap()).collect();
        let mut order: Vec<usize> = (0..dist.len()).collect();
        order.sort_by(|&x, &y| dist[x].total_cmp(&dist[y]).then(x.cmp(&y)));
        (dist[order[0]] < ratio * dist[order[1]]).then_some(order[0] as u32)
    }

    fn index(&mut self, node: u32, frame: &FeatureFrame, ratio: f64) -> Vec<Option<WordId>> {
        let mut ids = Vec::new();
        for d in &frame.descriptors {
            let w = match self.nearest(d, ratio) {
                Some(w) => w,
                None => {
                    self.prototypes.push(d.clone());
                    self.postings.push(BTreeMap::new());
                    (self.prototypes.len() - 1) as u32
                }
            };
            ids.push(Some(WordId(w)));
        }
        for id in ids.iter().flatten() {
            *self.postings[id.0 as usize].entry(node).or_default() += 1;
        }
        ids
    }

    fn query(&self, frame: &FeatureFrame, ratio: f64) -> Vec<Option<WordId>> {
        frame.descriptors.iter().map(|d| self.nearest(d, ratio).map(WordId)).collect()
    }
}

fn node_at(id: u32, x: f64, y: f64) -> MapNode {
    let p = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(x, y, 0.0));
    MapNode {
        id: NodeId(id),
        session: SessionId(0),
        timestamp: id as f64,
        odom_pose: p,
        opt_pose: p,
        frame: FeatureFrame::new(id as u64, id as f64, FamilyId::Surf),
    }
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let ratios = [0.6, 0.7, 0.8, 0.9];

    let mut nndr_bad = 0;
    let mut nndr_matches = 0;
    let instances = 120;
    for t in 0..instances {
        let family = FamilyId::ALL[t % 8];
        let (na, nb) = if t % 10 == 0 {
            (500, 500)
        } else {
            (rng.random_range(1..=200), rng.random_range(1..=200))
        };
        let a: Vec<Descriptor> = (0..na).map(|_| random_descriptor(family, &mut rng)).collect();
        let mut b: Vec<Descriptor> = (0..nb).map(|_| random_descriptor(family, &mut rng)).collect();
        for _ in 0..nb / 3 {
            let (i, j) = (rng.random_range(0..na), rng.random_range(0..nb));
            b[j] = perturbed(&a[i], &mut rng);
        }
        let (fa, fb) = (frame_of(family, a), frame_of(family, b));
        let ratio = ratios[t % ratios.len()];
        let got: Vec<(usize, usize, f64)> = nndr_match(&fa, &fb, ratio)
            .unwrap()
            .iter()
            .map(|m| (m.index_a, m.index_b, m.distance))
            .collect();
        let want = oracle_nndr(&fa, &fb, ratio);
        nndr_matches += want.len();
        if got != want {
            nndr_bad += 1;
        }
    }

    let mut quant_bad = 0;
    for t in 0..instances {
        let family = FamilyId::ALL[t % 8];
        let ratio = ratios[t % ratios.len()];
        let pool: Vec<Descriptor> = (0..rng.random_range(5..60)).map(|_| random_descriptor(family, &mut rng)).collect();
        let draw = |rng: &mut ChaCha8Rng, n: usize| -> FeatureFrame {
            let descs = (0..n)
                .map(|_| {
                    let p = &pool[rng.random_range(0..pool.len())];
                    if rng.random_bool(0.3) {
                        p.clone()
                    } else {
                        perturbed(p, rng)
                    }
                })
                .collect();
            frame_of(family, descs)
        };
        let mut vocab = Vocabulary::new(family, SearchBackend::Exact);
        let mut oracle = OracleVocabulary::default();
        let mut ok = true;
        for node in 0..rng.random_range(1..5u32) {
            let n = rng.random_range(1..100);
            let mut frame = draw(&mut rng, n);
            vocab.quantize_frame(&mut frame, ratio, Indexing::Map(NodeId(node))).unwrap();
            ok &= frame.word_ids == oracle.index(node, &frame, ratio);
        }
        ok &= vocab.len() == oracle.prototypes.len();
        for (w, (p, post)) in vocab.words().iter().zip(oracle.prototypes.iter().zip(&oracle.postings)) {
            let want: Vec<(NodeId, u32)> = post.iter().map(|(&n, &c)| (NodeId(n), c)).collect();
            ok &= w.prototype == *p && w.postings == want;
        }
        let n = rng.random_range(1..100);
        let mut query = draw(&mut rng, n);
        let before = vocab.clone();
        vocab.quantize_frame(&mut query, ratio, Indexing::Query).unwrap();
        ok &= query.word_ids == oracle.query(&query, ratio) && vocab == before;
        if !ok {
            quant_bad += 1;
        }
    }

    let mut prox_bad = 0;
    for _ in 0..instances {
        let n = rng.random_range(1..=50u32);
        let nodes: Vec<MapNode> = (0..n)
            .map(|i| node_at(i, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        let mut scores = BTreeMap::new();
        for node in &nodes {
            if rng.random_bool(0.8) {
                // Coarse scores force ties.
                scores.insert(node.id, rng.random_range(0..4) as f64 * 0.25);
            }
        }
        let lik = LikelihoodVector { scores };
        let eligible: BTreeSet<NodeId> = nodes.iter().filter(|_| rng.random_bool(0.8)).map(|n| n.id).collect();
        let here = random_pose(&mut rng, 0.5, 0.5);
        let radius = rng.random_range(0.3..2.5);
        let got = detect_proximity(&nodes, &here, &lik, radius, 3, |n| eligible.contains(&n.id));
        let dist = |n: &MapNode| (n.opt_pose.translation - here.translation).norm();
        let mut want: Vec<&MapNode> = nodes.iter().filter(|n| eligible.contains(&n.id) && dist(n) <= radius).collect();
        want.sort_by(|x, y| {
            lik.get(y.id)
                .total_cmp(&lik.get(x.id))
                .then(dist(x).total_cmp(&dist(y)))
                .then(x.id.cmp(&y.id))
        });
        let want: Vec<NodeId> = want.iter().take(3).map(|n| n.id).collect();
        if got != want {
            prox_bad += 1;
        }
    }

    outcome(
        nndr_bad == 0 && quant_bad == 0 && prox_bad == 0,
        format!(
            "mismatches: nndr {nndr_bad}/{instances} ({nndr_matches} oracle matches), quantization {quant_bad}/{instances}, \
             proximity top-3 {prox_bad}/{instances}"
        ),
    )
}

/// Poses around a 2.5 m square, five per side.
fn square(n: usize) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let side = i / 5;
            let along = (i % 5) as f64 * 0.5;
            let yaw = side as f64 * std::f64::consts::FRAC_PI_2;
            let corner = [(0.0, 0.0), (2.5, 0.0), (2.5, 2.5), (0.0, 2.5)][side % 4];
            let dir = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
            Pose::from_yaw(yaw, Vector3::new(corner.0, corner.1, 0.0) + dir * along)
        })
        .collect()
}

fn graph_optimization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut worst: f64 = 0.0;
    let mut non_monotone = 0;
    let mut anchor_moved = 0;
    let fixtures = 10;
    for _ in 0..fixtures {
        // Session 1 is recorded in a frame offset by a known transform; one
        // exact closure ties it to session 0.
        let offset = random_pose(&mut rng, 1.0, 3.0);
        let gt = square(20);
        let mut map = MultiSessionMap::new(k(), FamilyId::Surf, SearchBackend::default());
        let mut truth = Vec::new();
        for si in 0..2 {
            let s = map.add_session(format!("s{si}"));
            let mut prev: Option<NodeId> = None;
            for (i, p) in gt.iter().enumerate() {
                let odom = if si == 0 { *p } else { offset.inverse().compose(p) };
                let id = map.add_node(s, i as f64, odom, FeatureFrame::new(i as u64, i as f64, FamilyId::Surf)).unwrap();
                truth.push(*p);
                if let Some(pr) = prev {
                    let transform = map.node(pr).unwrap().odom_pose.between(&odom);
                    map.add_link(Link {
                        from: pr,
                        to: id,
                        kind: LinkKind::Odometry,
                        transform,
                        information: diagonal_information(0.002, 0.005),
                    })
                    .unwrap();
                }
                prev = Some(id);
            }
        }
        let (a, b) = (rng.random_range(0..20usize), rng.random_range(20..40usize));
        map.add_link(Link {
            from: NodeId(a as u32),
            to: NodeId(b as u32),
            kind: LinkKind::LoopClosure,
            transform: truth[a].between(&truth[b]),
            information: diagonal_information(0.01, 0.02),
        })
        .unwrap();
        let anchor = map.nodes[0].opt_pose;
        let report = map.optimize(&OptimizeConfig::default()).unwrap();
        if map.nodes[0].opt_pose != anchor {
            anchor_moved += 1;
        }
        if report.cost_history.windows(2).any(|w| w[1] > w[0]) {
            non_monotone += 1;
        }
        for (n, t) in map.nodes.iter().zip(&truth) {
            worst = worst.max(n.opt_pose.max_abs_diff(t));
        }
    }
    outcome(
        worst <= 1e-6 && non_monotone == 0 && anchor_moved == 0,
        format!(
            "{fixtures} fixtures: worst pose error {worst:.2e} (<= 1e-6), non-monotone {non_monotone}, anchor moved {anchor_moved}"
        ),
    )
}

fn chain_neighbors(n: u32) -> Vec<Vec<NodeId>> {
    (0..n)
        .map(|i| {
            let mut v = Vec::new();
            if i > 0 {
                v.push(NodeId(i - 1));
            }
            if i + 1 < n {
                v.push(NodeId(i + 1));
            }
            v
        })
        .collect()
}

fn bayes_filter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let cfg = BayesConfig::default();

    // Normalization under random growth, likelihoods and relocalizations.
    let adj = chain_neighbors(400);
    let mut belief = Belief::default();
    let mut worst_norm: f64 = 0.0;
    let mut n = 1u32;
    for step in 0..10_000 {
        if n < 400 && rng.random_bool(0.05) {
            n += 1;
        }
        let nodes: Vec<NodeId> = (0..n).map(NodeId).collect();
        let mut scores = BTreeMap::new();
        for &id in &nodes {
            if rng.random_bool(0.3) {
                scores.insert(id, rng.random_range(0.0..2.0));
            }
        }
        belief = bayes_update(&belief, &LikelihoodVector { scores }, &nodes, |x| adj[x.0 as usize].as_slice(), &cfg);
        if step % 97 == 0 {
            belief.recenter(NodeId(rng.random_range(0..n)), 0.5);
        }
        worst_norm = worst_norm.max((belief.total() - 1.0).abs());
    }

    // Repeated peaked evidence: the peak's posterior grows monotonically.
    let n = 30;
    let adj = chain_neighbors(n);
    let nodes: Vec<NodeId> = (0..n).map(NodeId).collect();
    let peak = NodeId(12);
    let mut scores: BTreeMap<NodeId, f64> = nodes.iter().map(|&id| (id, 0.1)).collect();
    scores.insert(peak, 1.0);
    let lik = LikelihoodVector { scores };
    let mut monotone = true;
    let mut final_peak = 0.0;
    for transition in [TransitionModel::Identity, TransitionModel::default()] {
        let cfg = BayesConfig { transition, ..cfg };
        let mut b = Belief::default();
        let mut last = 0.0;
        for _ in 0..50 {
            b = bayes_update(&b, &lik, &nodes, |x| adj[x.0 as usize].as_slice(), &cfg);
            let p = b.get(peak);
            monotone &= p >= last;
            last = p;
        }
        final_peak = last;
    }

    // A flat likelihood leaves a uniform belief unchanged.
    let uniform = Belief {
        p_new: 1.0 / (n + 1) as f64,
        p_loop: nodes.iter().map(|&id| (id, 1.0 / (n + 1) as f64)).collect(),
    };
    let flat = LikelihoodVector {
        scores: nodes.iter().map(|&id| (id, 0.7)).collect(),
    };
    let identity = BayesConfig {
        transition: TransitionModel::Identity,
        ..cfg
    };
    let out = bayes_update(&uniform, &flat, &nodes, |x| adj[x.0 as usize].as_slice(), &identity);
    let drift = nodes
        .iter()
        .map(|&id| (out.get(id) - uniform.get(id)).abs())
        .fold((out.p_new - uniform.p_new).abs(), f64::max);

    outcome(
        worst_norm <= 1e-9 && monotone && drift <= 1e-12,
        format!(
            "normalization err {worst_norm:.1e} over 1e4 updates (<= 1e-9); peaked posterior monotone: {monotone} \
             (final {final_peak:.3}); uniform fixed-point drift {drift:.1e}"
        ),
    )
}

/// Localization percentage of one (map, query, family, seed) cell.
fn pct(r: &ExperimentResults, map: &str, query: &str, family: FamilyId, seed: u64) -> f64 {
    r.summary(map, query, family, seed)
        .unwrap_or_else(|| panic!("missing cell {map}/{query}/{family}/{seed}"))
        .localization_pct
}

fn map_pct(r: &ExperimentResults, map: &str, family: FamilyId, seed: u64) -> f64 {
    QUERY_IDS.iter().map(|q| pct(r, map, q, family, seed)).sum::<f64>() / QUERY_IDS.len() as f64
}

fn mean_jump<'a>(rows: impl Iterator<Item = &'a TimelineRow>) -> f64 {
    let j: Vec<f64> = rows.filter_map(|r| r.jump_mm).collect();
    j.iter().sum::<f64>() / j.len().max(1) as f64
}

fn all_sessions_id() -> String {
    (1..=6).map(|i| i.to_string()).collect::<Vec<_>>().join("+")
}

fn diagonal_dominance(single: &ExperimentResults, seeds: &[u64], elapsed: Duration) -> Outcome {
    let mut lines = Vec::new();
    let mut pass = elapsed < Duration::from_secs(600);
    for family in FamilyId::ALL {
        if FamilyPreset::for_family(family).sensitivity_scale <= 0.0 {
            continue;
        }
        let margins: Vec<f64> = seeds
            .iter()
            .map(|&seed| {
                let (mut diag, mut off) = (0.0, 0.0);
                for m in 0..6 {
                    for (q, qid) in QUERY_IDS.iter().enumerate() {
                        let p = pct(single, &(m + 1).to_string(), qid, family, seed);
                        if m == q {
                            diag += p / 6.0;
                        } else {
                            off += p / 30.0;
                        }
                    }
                }
                diag - off
            })
            .collect();
        let ok = margins.iter().filter(|&&m| m >= 10.0).count();
        let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
        pass &= ok * 10 >= seeds.len() * 9;
        lines.push(format!("{family} {ok}/{} (min {min:.1})", seeds.len()));
    }
    outcome(
        pass,
        format!("seeds with margin >= 10 pp: {}; single matrix {:.0} s (< 600 s)", lines.join(", "), elapsed.as_secs_f64()),
    )
}

fn multi_session_gain(single: &ExperimentResults, multi: &ExperimentResults, seeds: &[u64]) -> Outcome {
    let all = all_sessions_id();
    let mut pass = true;
    let mut lines = Vec::new();
    for family in FamilyId::ALL {
        let ok = seeds
            .iter()
            .filter(|&&seed| {
                let merged = map_pct(multi, &all, family, seed);
                let best = (1..=6).map(|m| map_pct(single, &m.to_string(), family, seed)).fold(f64::MIN, f64::max);
                merged >= best - 1.0 && merged >= map_pct(multi, "1+6", family, seed) - 1.0
            })
            .count();
        let code = family.code();
        let merged_jump = mean_jump(multi.timelines.iter().filter(|r| r.family == code && r.map_id == all));
        let single_jump = mean_jump(single.timelines.iter().filter(|r| r.family == code && r.map_id == BASELINE_ID));
        let jump_ok = merged_jump <= single_jump * 1.2;
        pass &= ok * 10 >= seeds.len() * 9 && jump_ok;
        lines.push(format!("{family} {ok}/{} jump {merged_jump:.1}/{single_jump:.1} mm", seeds.len()));
    }
    outcome(pass, format!("seeds where all-sessions >= best single and >= 1+6 (-1 pp), mean jump all/matched: {}", lines.join(", ")))
}

fn sensitivity_ordering(single: &ExperimentResults, seeds: &[u64]) -> Outcome {
    let binary: Vec<FamilyId> = FamilyId::ALL.into_iter().filter(|f| f.is_binary()).collect();
    let ok = seeds
        .iter()
        .filter(|&&seed| {
            let sp = pct(single, "1", "F", FamilyId::SuperPoint, seed);
            binary.iter().all(|&f| sp > pct(single, "1", "F", f, seed))
        })
        .count();
    let mean = |f: FamilyId| seeds.iter().map(|&s| pct(single, "1", "F", f, s)).sum::<f64>() / seeds.len() as f64;
    let others: Vec<String> = binary.iter().map(|&f| format!("{f} {:.1}", mean(f))).collect();
    outcome(
        ok * 10 >= seeds.len() * 9,
        format!(
            "SP above every binary family on map 1 / query F in {ok}/{} seeds; mean pct SP {:.1}, {}",
            seeds.len(),
            mean(FamilyId::SuperPoint),
            others.join(", ")
        ),
    )
}

fn consecutive_chaining(multi: &ExperimentResults, seeds: &[u64]) -> Outcome {
    let families = [FamilyId::Surf, FamilyId::Sift, FamilyId::Kaze, FamilyId::Daisy, FamilyId::SuperPoint];
    let mut pass = true;
    let mut lines = Vec::new();
    for family in families {
        let rows: Vec<_> = multi.chain.iter().filter(|r| r.family == family.code()).collect();
        let ok = rows
            .iter()
            .filter(|r| r.aligned && r.anchor_frame.is_some_and(|a| (a + 1) as f64 <= 0.1 * r.frames as f64))
            .count();
        let expected = seeds.len() * 5;
        let gap = rows.iter().map(|r| r.max_gap).max().unwrap_or(0);
        let mean_gap = rows.iter().map(|r| r.max_gap as f64).sum::<f64>() / rows.len().max(1) as f64;
        pass &= ok == expected && rows.len() == expected;
        lines.push(format!("{family} {ok}/{expected} (max gap {gap}, mean {mean_gap:.1})"));
    }
    let others: Vec<String> = FamilyId::ALL
        .into_iter()
        .filter(|f| !families.contains(f))
        .map(|f| {
            let rows: Vec<_> = multi.chain.iter().filter(|r| r.family == f.code()).collect();
            let gap = rows.iter().map(|r| r.max_gap).max().unwrap_or(0);
            format!("{f} max gap {gap}")
        })
        .collect();
    outcome(
        pass,
        format!("sessions anchored within first 10%: {}; reported only: {}", lines.join(", "), others.join(", ")),
    )
}

fn read_only_localization(seeds: &[u64]) -> Outcome {
    let cfg = ExperimentConfig::default();
    let mut checked = 0;
    let mut changed = 0;
    for family in FamilyId::ALL {
        let data = msslam::eval::simulate_seed(&cfg, family, seeds[0]).unwrap();
        let mut map = MultiSessionMap::new(data.world.camera, family, SearchBackend::default());
        for (i, rec) in data.mapping.iter().enumerate() {
            map_session(&mut map, rec, &SlamConfig::default()).unwrap();
            if i == 0 || i + 1 == data.mapping.len() {
                let before = map_hash(&map);
                for q in &data.queries {
                    localize_session(&map, q, &SlamConfig::default()).unwrap();
                }
                checked += 1;
                if map_hash(&map) != before {
                    changed += 1;
                }
            }
        }
    }
    outcome(changed == 0, format!("{changed}/{checked} maps changed hash after localizing six sessions"))
}

fn csv_bytes(r: &ExperimentResults) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    r.write_csvs(dir.path()).unwrap();
    std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn experiment(seeds: &[u64], single: bool) -> ExperimentConfig {
    ExperimentConfig {
        seeds: seeds.to_vec(),
        families: FamilyId::ALL.to_vec(),
        single_matrix: single,
        multi_session: !single,
        ..Default::default()
    }
}

fn main() -> ExitCode {
    let seeds_n: u64 = std::env::var("MSSLAM_ACCEPTANCE_SEEDS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(SEEDS);
    let partial = seeds_n < SEEDS;
    let seeds: Vec<u64> = (1..=seeds_n).collect();
    let mut failures = 0;
    let mut report = |id: u32, name: &str, start: Instant, o: Outcome, budget: Option<u64>| {
        let secs = start.elapsed().as_secs_f64();
        let in_budget = budget.is_none_or(|b| secs < b as f64);
        let pass = o.pass && in_budget && !(partial && id >= 5);
        if !pass {
            failures += 1;
        }
        let status = match (pass, partial && id >= 5) {
            (true, _) => "PASS",
            (false, true) => "PARTIAL",
            (false, false) => "FAIL",
        };
        let budget = budget.map(|b| format!(", budget {b} s")).unwrap_or_default();
        println!("criterion {id:>2} [{status}] {name}: {} ({secs:.1} s{budget})", o.detail);
    };

    let t = Instant::now();
    report(1, "geometry suite", t, geometry_suite(), Some(30));
    let t = Instant::now();
    report(2, "oracle equivalence", t, oracle_equivalence(), Some(60));
    let t = Instant::now();
    report(3, "graph optimization", t, graph_optimization(), Some(10));
    let t = Instant::now();
    report(4, "bayes filter", t, bayes_filter(), None);

    if seeds.is_empty() {
        println!("note: experiment criteria 5-10 skipped");
        return if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE };
    }
    if partial {
        println!("note: {seeds_n} of {SEEDS} seeds; experiment criteria are partial");
    }
    let t = Instant::now();
    let single = run_experiment(&experiment(&seeds, true)).unwrap();
    let single_time = t.elapsed();
    let t = Instant::now();
    let multi = run_experiment(&experiment(&seeds, false)).unwrap();
    let multi_time = t.elapsed();

    report(5, "diagonal dominance", Instant::now() - single_time, diagonal_dominance(&single, &seeds, single_time), None);
    let t = Instant::now();
    report(6, "multi-session gain", t - multi_time, multi_session_gain(&single, &multi, &seeds), None);
    report(7, "sensitivity ordering", Instant::now(), sensitivity_ordering(&single, &seeds), None);
    report(8, "consecutive-session chaining", Instant::now(), consecutive_chaining(&multi, &seeds), None);
    let t = Instant::now();
    report(9, "read-only localization", t, read_only_localization(&seeds), None);

    let t = Instant::now();
    let again_single = run_experiment(&experiment(&seeds, true)).unwrap();
    let again_multi = run_experiment(&experiment(&seeds, false)).unwrap();
    let (a, b) = (csv_bytes(&single), csv_bytes(&again_single));
    let (c, d) = (csv_bytes(&multi), csv_bytes(&again_multi));
    let same = a == b && c == d;
    let bytes: usize = a.values().chain(c.values()).map(Vec::len).sum();
    report(
        10,
        "determinism",
        t,
        outcome(same, format!("second full run byte-identical: {same} ({} files, {bytes} bytes)", a.len() + c.len())),
        None,
    );

    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria not passed");
        ExitCode::FAILURE
    }
}
