//! Multi-session SLAM engine: mapping sessions appended to a shared map and
//! read-only localization against it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayes::{bayes_update, check_hypothesis, Belief, BayesConfig};
use crate::features::{FamilyId, FeatureFrame};
use crate::geom::Pose;
use crate::graph::{
    diagonal_information, GraphError, Link, LinkKind, MapNode, MultiSessionMap, NodeId, OptimizeConfig, SessionId,
};
use crate::registration::{estimate_transform, Registration, RegistrationConfig, Stage};
use crate::synthworld::SessionRecord;
use crate::vocabulary::{Indexing, LikelihoodVector, VocabularyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlamError {
    #[error("frame family {frame} differs from map family {map}")]
    FamilyMismatch { map: FamilyId, frame: FamilyId },
    #[error("map has no aligned nodes to localize against")]
    EmptyMap,
    #[error("session {0:?} never closed a loop with an earlier session")]
    AnchorNotFound(SessionId),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Vocabulary(#[from] VocabularyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    Mapping,
    Localization,
}

/// When the pose graph is re-optimized during mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizeSchedule {
    /// After every accepted loop closure and every session alignment, and at
    /// session end.
    EveryLoopClosure,
    /// Only at session end (and on alignment).
    SessionEnd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlamConfig {
    pub registration: RegistrationConfig,
    pub bayes: BayesConfig,
    pub optimize: OptimizeConfig,
    pub schedule: OptimizeSchedule,
    /// NNDR ratio used for word quantization.
    pub quantize_ratio: f64,
    /// Proximity search radius in meters.
    pub proximity_radius: f64,
    pub proximity_candidates: usize,
    /// Most recent nodes of the current session excluded from closures.
    pub stm_size: usize,
    /// Consecutive failures after which the localizer counts as lost.
    pub lost_after: usize,
    /// Radius growth per meter travelled since the last fix while lost.
    pub lost_drift_per_meter: f64,
    pub odometry_sigma_rot: f64,
    pub odometry_sigma_trans: f64,
    /// Loop-link standard deviations at exactly `min_inliers` inliers; the
    /// information scales linearly with the inlier count.
    pub loop_sigma_rot: f64,
    pub loop_sigma_trans: f64,
    /// Belief mass put on the matched node after a localization.
    pub recenter_mass: f64,
    /// Localization assumes the run starts at the map origin, so proximity
    /// search is available before the first fix.
    pub start_at_origin: bool,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            bayes: BayesConfig::default(),
            optimize: OptimizeConfig::default(),
            schedule: OptimizeSchedule::EveryLoopClosure,
            quantize_ratio: 0.8,
            proximity_radius: 1.0,
            proximity_candidates: 3,
            stm_size: 10,
            lost_after: 10,
            lost_drift_per_meter: 0.1,
            odometry_sigma_rot: 0.002,
            odometry_sigma_trans: 0.005,
            loop_sigma_rot: 0.01,
            loop_sigma_trans: 0.01,
            recenter_mass: 0.5,
            start_at_origin: true,
        }
    }
}

/// Result of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Outcome {
    LoopClosure(NodeId),
    Proximity(NodeId),
    /// `None` when no candidate was available; otherwise the furthest
    /// registration stage reached by any candidate.
    Failed(Option<Stage>),
}

impl Outcome {
    pub fn matched(&self) -> Option<NodeId> {
        match self {
            Outcome::LoopClosure(n) | Outcome::Proximity(n) => Some(*n),
            Outcome::Failed(_) => None,
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.matched().is_some()
    }

    pub fn label(&self) -> &'static str {
        match self {
            Outcome::LoopClosure(_) => "loop_closure",
            Outcome::Proximity(_) => "proximity",
            Outcome::Failed(_) => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationEvent {
    pub frame_index: usize,
    pub timestamp: f64,
    pub outcome: Outcome,
    pub matched_session: Option<SessionId>,
    /// Corrected pose relative to the odometry-predicted one.
    pub correction: Pose,
    /// Length of the correction in millimeters; `None` for the first fix,
    /// which has no prediction to jump from.
    pub jump_mm: Option<f64>,
    pub inliers: usize,
    /// Final inliers as a percentage of the query's features.
    pub inlier_pct: f64,
    /// Global pose estimate after this frame, once localized.
    pub pose: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingEvent {
    pub frame_index: usize,
    pub timestamp: f64,
    pub node: NodeId,
    pub outcome: Outcome,
    pub matched_session: Option<SessionId>,
    /// The accepted link joins this session to an earlier one.
    pub inter_session: bool,
    pub inliers: usize,
    /// This frame's link aligned the session into the global frame.
    pub aligned_here: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionSummary {
    pub session: SessionId,
    pub label: String,
    pub frames: usize,
    pub aligned: bool,
    /// Frame index of the first inter-session link, if any.
    pub anchor_frame: Option<usize>,
    pub inter_session_frames: usize,
    /// Longest run of frames without an inter-session link.
    pub max_gap: usize,
    pub loop_closures: usize,
    pub proximity_links: usize,
    pub events: Vec<MappingEvent>,
}

/// Up to `max` eligible nodes within `radius` of `pose`, ordered by
/// likelihood (descending), then distance, then id.
pub fn detect_proximity<F>(
    nodes: &[MapNode],
    pose: &Pose,
    lik: &LikelihoodVector,
    radius: f64,
    max: usize,
    eligible: F,
) -> Vec<NodeId>
where
    F: Fn(&MapNode) -> bool,
{
    let mut cands: Vec<(f64, f64, NodeId)> = nodes
        .iter()
        .filter(|n| eligible(n))
        .map(|n| ((n.opt_pose.translation - pose.translation).norm(), n))
        .filter(|(d, _)| *d <= radius)
        .map(|(d, n)| (lik.get(n.id), d, n.id))
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands.into_iter().take(max).map(|c| c.2).collect()
}

/// Global pose implied by an accepted registration against `matched`,
/// the correction relative to `predicted` and its length in millimeters.
pub fn apply_localization(matched: &Pose, transform: &Pose, predicted: Option<&Pose>) -> (Pose, Pose, Option<f64>) {
    let corrected = matched.compose(transform).normalized();
    match predicted {
        Some(p) => {
            let correction = p.between(&corrected);
            let jump = (corrected.translation - p.translation).norm() * 1000.0;
            (corrected, correction, Some(jump))
        }
        None => (corrected, Pose::identity(), None),
    }
}

/// One input frame of a session.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub timestamp: f64,
    pub odom_pose: Pose,
    pub frame: FeatureFrame,
}

pub fn session_inputs(record: &SessionRecord) -> Vec<FrameInput> {
    record
        .frames
        .iter()
        .map(|f| FrameInput {
            timestamp: f.timestamp,
            odom_pose: f.odom_pose,
            frame: f.frame.clone(),
        })
        .collect()
}

/// Replays the nodes of every session of `map` as mapping inputs.
pub fn map_inputs(map: &MultiSessionMap) -> Vec<(String, Vec<FrameInput>)> {
    map.sessions
        .iter()
        .map(|s| {
            let frames = map
                .session_nodes(s.id)
                .map(|n| {
                    let mut frame = n.frame.clone();
                    frame.word_ids = vec![None; frame.len()];
                    FrameInput {
                        timestamp: n.timestamp,
                        odom_pose: n.odom_pose,
                        frame,
                    }
                })
                .collect();
            (s.label.clone(), frames)
        })
        .collect()
}

fn loop_information(cfg: &SlamConfig, inliers: usize) -> nalgebra::Matrix6<f64> {
    let scale = inliers as f64 / cfg.registration.min_inliers.max(1) as f64;
    diagonal_information(cfg.loop_sigma_rot, cfg.loop_sigma_trans) * scale.max(1e-3)
}

/// Tries candidates in order; the first accepted registration wins.
/// Returns the winner or the furthest failing stage.
fn register_candidates(
    map: &MultiSessionMap,
    query: &FeatureFrame,
    candidates: &[NodeId],
    prior_from: Option<&Pose>,
    cfg: &SlamConfig,
) -> Result<(NodeId, Registration), Option<Stage>> {
    let mut furthest: Option<Stage> = None;
    for &c in candidates {
        let target = &map.nodes[c.0 as usize];
        let prior = prior_from.map(|p| target.opt_pose.between(p));
        match estimate_transform(query, &target.frame, &map.camera, &cfg.registration, prior.as_ref()) {
            Ok(reg) => return Ok((c, reg)),
            Err(e) => furthest = furthest.max(e.stage()),
        }
    }
    Err(furthest)
}

fn inlier_pct(reg: &Registration, frame: &FeatureFrame) -> f64 {
    if frame.is_empty() {
        0.0
    } else {
        100.0 * reg.inlier_count as f64 / frame.len() as f64
    }
}

/// Node adjacency over the map's links: the odometry chain drives the
/// Bayes transition, every link kind drives hypothesis pooling.
fn link_adjacency(map: &MultiSessionMap, odometry_only: bool) -> Vec<Vec<NodeId>> {
    let mut adj = vec![Vec::new(); map.nodes.len()];
    for l in map.links.iter().filter(|l| !odometry_only || l.kind == LinkKind::Odometry) {
        adj[l.from.0 as usize].push(l.to);
        adj[l.to.0 as usize].push(l.from);
    }
    for a in &mut adj {
        a.sort();
        a.dedup();
    }
    adj
}

fn likelihood_or_empty(r: Result<LikelihoodVector, VocabularyError>) -> Result<LikelihoodVector, SlamError> {
    match r {
        Ok(l) => Ok(l),
        Err(VocabularyError::EmptyVocabulary) => Ok(LikelihoodVector::default()),
        Err(e) => Err(e.into()),
    }
}

/// Mapping engine: appends one session to `map`.
pub struct Mapper<'a> {
    map: &'a mut MultiSessionMap,
    cfg: SlamConfig,
    session: SessionId,
    belief: Belief,
    chain: Vec<Vec<NodeId>>,
    graph: Vec<Vec<NodeId>>,
    session_nodes: Vec<NodeId>,
    events: Vec<MappingEvent>,
}

impl<'a> Mapper<'a> {
    /// Opens a new session on `map` (possibly empty).
    pub fn start_session(map: &'a mut MultiSessionMap, label: impl Into<String>, cfg: SlamConfig) -> Self {
        let session = map.add_session(label);
        let chain = link_adjacency(map, true);
        let graph = link_adjacency(map, false);
        Self {
            map,
            cfg,
            session,
            belief: Belief::default(),
            chain,
            graph,
            session_nodes: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn session(&self) -> SessionId {
        self.session
    }

    pub fn belief(&self) -> &Belief {
        &self.belief
    }

    pub fn events(&self) -> &[MappingEvent] {
        &self.events
    }

    fn aligned(&self) -> bool {
        self.map.sessions[self.session.0 as usize].aligned
    }

    fn in_stm(&self, node: NodeId) -> bool {
        let n = self.session_nodes.len();
        self.session_nodes[n.saturating_sub(self.cfg.stm_size.max(1))..].contains(&node)
    }

    /// Closure targets: own earlier nodes outside short-term memory and,
    /// for other sessions, only aligned ones.
    fn closure_eligible(&self, n: &MapNode) -> bool {
        if n.session == self.session {
            !self.in_stm(n.id)
        } else {
            self.map.sessions[n.session.0 as usize].aligned
        }
    }

    /// Proximity additionally requires a shared coordinate frame; before
    /// alignment, `start_at_origin` assumes the session's odometry frame
    /// coincides with the global one.
    fn proximity_eligible(&self, n: &MapNode) -> bool {
        self.closure_eligible(n) && (n.session == self.session || self.aligned() || self.cfg.start_at_origin)
    }

    pub fn process_frame(&mut self, input: FrameInput) -> Result<MappingEvent, SlamError> {
        let FrameInput {
            timestamp,
            odom_pose,
            mut frame,
        } = input;
        if frame.family != self.map.family {
            return Err(SlamError::FamilyMismatch {
                map: self.map.family,
                frame: frame.family,
            });
        }
        let frame_index = self.session_nodes.len();
        let id = NodeId(self.map.nodes.len() as u32);
        self.map
            .vocabulary
            .quantize_frame(&mut frame, self.cfg.quantize_ratio, Indexing::Map(id))?;
        let prev = self.session_nodes.last().copied();
        let node = self.map.add_node(self.session, timestamp, odom_pose, frame)?;
        debug_assert_eq!(node, id);
        self.chain.push(Vec::new());
        self.graph.push(Vec::new());
        if let Some(p) = prev {
            let transform = self.map.nodes[p.0 as usize].odom_pose.between(&odom_pose);
            self.map.add_link(Link {
                from: p,
                to: node,
                kind: LinkKind::Odometry,
                transform,
                information: diagonal_information(self.cfg.odometry_sigma_rot, self.cfg.odometry_sigma_trans),
            })?;
            for adj in [&mut self.chain, &mut self.graph] {
                adj[p.0 as usize].push(node);
                adj[node.0 as usize].push(p);
            }
        }
        self.session_nodes.push(node);

        let mut lik = likelihood_or_empty(self.map.vocabulary.compute_likelihood(&self.map.nodes[id.0 as usize].frame))?;
        lik.retain(|n| n != node);

        let current = self.map.nodes[id.0 as usize].opt_pose;
        let query = self.map.nodes[id.0 as usize].frame.clone();

        // Proximity first.
        let prox = detect_proximity(
            &self.map.nodes,
            &current,
            &lik,
            self.cfg.proximity_radius,
            self.cfg.proximity_candidates,
            |n| self.proximity_eligible(n),
        );
        let mut furthest = None;
        let mut accepted: Option<(NodeId, Registration, LinkKind)> = None;
        if !prox.is_empty() {
            match register_candidates(self.map, &query, &prox, Some(&current), &self.cfg) {
                Ok((c, reg)) => accepted = Some((c, reg, LinkKind::Proximity)),
                Err(s) => furthest = s,
            }
        }
        if accepted.is_none() {
            let eligible: Vec<NodeId> = self
                .map
                .nodes
                .iter()
                .filter(|n| n.id != node && self.closure_eligible(n))
                .map(|n| n.id)
                .collect();
            let (chain, graph) = (&self.chain, &self.graph);
            self.belief = bayes_update(&self.belief, &lik, &eligible, |n| chain[n.0 as usize].as_slice(), &self.cfg.bayes);
            if let Some(c) = check_hypothesis(&self.belief, self.cfg.bayes.threshold, |n| graph[n.0 as usize].as_slice()) {
                match register_candidates(self.map, &query, &[c], None, &self.cfg) {
                    Ok((c, reg)) => accepted = Some((c, reg, LinkKind::LoopClosure)),
                    Err(s) => furthest = furthest.max(s),
                }
            }
        }

        let mut event = MappingEvent {
            frame_index,
            timestamp,
            node,
            outcome: Outcome::Failed(furthest),
            matched_session: None,
            inter_session: false,
            inliers: 0,
            aligned_here: false,
        };
        if let Some((target, reg, kind)) = accepted {
            let target_session = self.map.nodes[target.0 as usize].session;
            let inter = target_session != self.session;
            self.map.add_link(Link {
                from: target,
                to: node,
                kind,
                transform: reg.transform,
                information: loop_information(&self.cfg, reg.inlier_count),
            })?;
            self.graph[target.0 as usize].push(node);
            self.graph[node.0 as usize].push(target);
            event.outcome = match kind {
                LinkKind::Proximity => Outcome::Proximity(target),
                _ => Outcome::LoopClosure(target),
            };
            event.matched_session = Some(target_session);
            event.inter_session = inter;
            event.inliers = reg.inlier_count;
            let mut optimize = kind == LinkKind::LoopClosure && self.cfg.schedule == OptimizeSchedule::EveryLoopClosure;
            if inter && !self.aligned() {
                // Rigidly move the session so the new link holds, then let
                // the optimizer spread the residual.
                let desired = self.map.nodes[target.0 as usize].opt_pose.compose(&reg.transform);
                let offset = desired.compose(&current.inverse());
                self.map.transform_session(self.session, &offset);
                self.map.sessions[self.session.0 as usize].aligned = true;
                event.aligned_here = true;
                optimize = true;
            }
            if optimize {
                self.run_optimizer()?;
            }
            if kind == LinkKind::LoopClosure {
                self.belief.recenter(target, self.cfg.recenter_mass);
            }
        }
        self.events.push(event.clone());
        Ok(event)
    }

    fn run_optimizer(&mut self) -> Result<(), SlamError> {
        match self.map.optimize(&self.cfg.optimize) {
            Ok(_) | Err(GraphError::DisconnectedGraph { .. }) | Err(GraphError::EmptyMap) => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn summary(&self) -> SessionSummary {
        let mut gap = 0;
        let mut max_gap = 0;
        for e in &self.events {
            if e.inter_session {
                gap = 0;
            } else {
                gap += 1;
                max_gap = max_gap.max(gap);
            }
        }
        SessionSummary {
            session: self.session,
            label: self.map.sessions[self.session.0 as usize].label.clone(),
            frames: self.events.len(),
            aligned: self.aligned(),
            anchor_frame: self.events.iter().find(|e| e.inter_session).map(|e| e.frame_index),
            inter_session_frames: self.events.iter().filter(|e| e.inter_session).count(),
            max_gap,
            loop_closures: self
                .events
                .iter()
                .filter(|e| matches!(e.outcome, Outcome::LoopClosure(_)))
                .count(),
            proximity_links: self.events.iter().filter(|e| matches!(e.outcome, Outcome::Proximity(_))).count(),
            events: self.events.clone(),
        }
    }

    /// Final optimization. Fails with `AnchorNotFound` when an earlier
    /// session exists but none was ever linked; the session then stays in
    /// the map flagged unaligned.
    pub fn finish_session(mut self) -> Result<SessionSummary, SlamError> {
        self.run_optimizer()?;
        // A finished map searches exactly like one reloaded from disk.
        self.map.vocabulary.rebuild_index();
        if !self.aligned() {
            return Err(SlamError::AnchorNotFound(self.session));
        }
        Ok(self.summary())
    }
}

/// Maps a sequence of frames as one new session. An `AnchorNotFound`
/// outcome is reported through the summary's `aligned` flag.
pub fn map_frames(
    map: &mut MultiSessionMap,
    label: &str,
    frames: Vec<FrameInput>,
    cfg: &SlamConfig,
) -> Result<SessionSummary, SlamError> {
    let mut mapper = Mapper::start_session(map, label, *cfg);
    for f in frames {
        mapper.process_frame(f)?;
    }
    let summary = mapper.summary();
    match mapper.finish_session() {
        Ok(s) => Ok(s),
        Err(SlamError::AnchorNotFound(_)) => Ok(summary),
        Err(e) => Err(e),
    }
}

pub fn map_session(map: &mut MultiSessionMap, record: &SessionRecord, cfg: &SlamConfig) -> Result<SessionSummary, SlamError> {
    map_frames(map, &record.label, session_inputs(record), cfg)
}

/// Builds one multi-session map by re-mapping every session of `maps`, in
/// order, onto an accumulated map, then optimizing.
pub fn merge_maps(
    maps: &[MultiSessionMap],
    cfg: &SlamConfig,
) -> Result<(MultiSessionMap, Vec<SessionSummary>), SlamError> {
    let first = maps.first().ok_or(SlamError::EmptyMap)?;
    let mut merged = MultiSessionMap::new(first.camera, first.family, first.vocabulary.backend());
    let mut summaries = Vec::new();
    for m in maps {
        if m.family != first.family {
            return Err(SlamError::FamilyMismatch {
                map: first.family,
                frame: m.family,
            });
        }
        for (label, frames) in map_inputs(m) {
            summaries.push(map_frames(&mut merged, &label, frames, cfg)?);
        }
    }
    match merged.optimize(&cfg.optimize) {
        Ok(_) | Err(GraphError::DisconnectedGraph { .. }) | Err(GraphError::EmptyMap) => {}
        Err(e) => return Err(e.into()),
    }
    Ok((merged, summaries))
}

#[derive(Debug, Clone, Copy)]
struct Fix {
    pose: Pose,
    odom: Pose,
    /// Coordinate frame of the matched node (see `frame_of`).
    frame: u32,
    /// Assumed start pose rather than an accepted registration.
    assumed: bool,
}

/// Read-only localization against a map. Unaligned sessions stay usable
/// in their own coordinate frame; proximity search and jumps only relate
/// poses within the frame of the last fix.
pub struct Localizer<'a> {
    map: &'a MultiSessionMap,
    cfg: SlamConfig,
    chain: Vec<Vec<NodeId>>,
    graph: Vec<Vec<NodeId>>,
    eligible: Vec<NodeId>,
    belief: Belief,
    fix: Option<Fix>,
    failures: usize,
    frames: usize,
}

impl<'a> Localizer<'a> {
    pub fn new(map: &'a MultiSessionMap, cfg: SlamConfig) -> Result<Self, SlamError> {
        let eligible: Vec<NodeId> = map.nodes.iter().map(|n| n.id).collect();
        if eligible.is_empty() {
            return Err(SlamError::EmptyMap);
        }
        Ok(Self {
            map,
            cfg,
            chain: link_adjacency(map, true),
            graph: link_adjacency(map, false),
            eligible,
            belief: Belief::default(),
            fix: None,
            failures: 0,
            frames: 0,
        })
    }

    pub fn mode(&self) -> EngineMode {
        EngineMode::Localization
    }

    pub fn belief(&self) -> &Belief {
        &self.belief
    }

    /// Current global pose estimate: last fix dead-reckoned by odometry.
    pub fn predict(&self, odom_pose: &Pose) -> Option<Pose> {
        self.fix.map(|f| f.pose.compose(&f.odom.between(odom_pose)).normalized())
    }

    pub fn process_frame(&mut self, input: FrameInput) -> Result<LocalizationEvent, SlamError> {
        let FrameInput {
            timestamp,
            odom_pose,
            mut frame,
        } = input;
        if frame.family != self.map.family {
            return Err(SlamError::FamilyMismatch {
                map: self.map.family,
                frame: frame.family,
            });
        }
        let frame_index = self.frames;
        self.frames += 1;
        if frame_index == 0 && self.cfg.start_at_origin {
            if let Some(anchor) = self.map.anchor() {
                self.fix = Some(Fix {
                    pose: self.map.nodes[anchor.0 as usize].opt_pose,
                    odom: odom_pose,
                    frame: self.map.frame_of(anchor).unwrap_or(0),
                    assumed: true,
                });
            }
        }
        self.map.vocabulary.quantize_query(&mut frame, self.cfg.quantize_ratio)?;
        let lik = likelihood_or_empty(self.map.vocabulary.compute_likelihood(&frame))?;
        let map = self.map;

        let predicted = self.predict(&odom_pose);
        let mut furthest = None;
        let mut accepted: Option<(NodeId, Registration, bool)> = None;
        if let (Some(pred), Some(fix)) = (predicted, self.fix) {
            let mut radius = self.cfg.proximity_radius;
            if self.failures >= self.cfg.lost_after {
                radius += self.cfg.lost_drift_per_meter * (pred.translation - fix.pose.translation).norm();
            }
            let prox = detect_proximity(&map.nodes, &pred, &lik, radius, self.cfg.proximity_candidates, |n| {
                map.frame_of(n.id) == Some(fix.frame)
            });
            if !prox.is_empty() {
                match register_candidates(map, &frame, &prox, Some(&pred), &self.cfg) {
                    Ok((c, reg)) => accepted = Some((c, reg, true)),
                    Err(s) => furthest = s,
                }
            }
        }
        if accepted.is_none() {
            let (chain, graph) = (&self.chain, &self.graph);
            self.belief = bayes_update(&self.belief, &lik, &self.eligible, |n| chain[n.0 as usize].as_slice(), &self.cfg.bayes);
            if let Some(c) = check_hypothesis(&self.belief, self.cfg.bayes.threshold, |n| graph[n.0 as usize].as_slice()) {
                match register_candidates(map, &frame, &[c], None, &self.cfg) {
                    Ok((c, reg)) => accepted = Some((c, reg, false)),
                    Err(s) => furthest = furthest.max(s),
                }
            }
        }

        let Some((node, reg, proximity)) = accepted else {
            self.failures += 1;
            return Ok(LocalizationEvent {
                frame_index,
                timestamp,
                outcome: Outcome::Failed(furthest),
                matched_session: None,
                correction: Pose::identity(),
                jump_mm: None,
                inliers: 0,
                inlier_pct: 0.0,
                pose: predicted,
            });
        };
        let target = &map.nodes[node.0 as usize];
        let frame_id = map.frame_of(node).unwrap_or(0);
        let same_frame = self.fix.is_some_and(|f| f.frame == frame_id && !f.assumed);
        let predicted = predicted.filter(|_| same_frame);
        let (corrected, correction, jump_mm) = apply_localization(&target.opt_pose, &reg.transform, predicted.as_ref());
        self.fix = Some(Fix {
            pose: corrected,
            odom: odom_pose,
            frame: frame_id,
            assumed: false,
        });
        self.failures = 0;
        self.belief.recenter(node, self.cfg.recenter_mass);
        Ok(LocalizationEvent {
            frame_index,
            timestamp,
            outcome: if proximity {
                Outcome::Proximity(node)
            } else {
                Outcome::LoopClosure(node)
            },
            matched_session: Some(target.session),
            correction,
            jump_mm,
            inliers: reg.inlier_count,
            inlier_pct: inlier_pct(&reg, &frame),
            pose: Some(corrected),
        })
    }
}

pub fn localize_frames(
    map: &MultiSessionMap,
    frames: Vec<FrameInput>,
    cfg: &SlamConfig,
) -> Result<Vec<LocalizationEvent>, SlamError> {
    let mut loc = Localizer::new(map, *cfg)?;
    frames.into_iter().map(|f| loc.process_frame(f)).collect()
}

pub fn localize_session(
    map: &MultiSessionMap,
    record: &SessionRecord,
    cfg: &SlamConfig,
) -> Result<Vec<LocalizationEvent>, SlamError> {
    localize_frames(map, session_inputs(record), cfg)
}
