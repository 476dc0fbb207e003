//! Multi-session pose graph: sessions, nodes, links and the map container.

mod optimize;
mod skyline;

pub use optimize::{link_residual, optimize, total_cost, OptimizeConfig, OptimizeReport};

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FamilyId, FeatureFrame};
use crate::geom::{CameraIntrinsics, Pose};
use crate::vocabulary::{SearchBackend, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionId(pub u32);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown session {0:?}")]
    UnknownSession(SessionId),
    #[error("link from node {0} to itself")]
    SelfLoop(NodeId),
    #[error("odometry link {from} -> {to} does not join consecutive nodes of one session")]
    BadOdometryLink { from: NodeId, to: NodeId },
    #[error("information matrix is not positive definite")]
    NonPositiveDefiniteInformation,
    #[error("frame family {frame} differs from map family {map}")]
    FamilyMismatch { map: FamilyId, frame: FamilyId },
    #[error("graph is disconnected from the anchor: {} unreached node(s)", unreached.len())]
    DisconnectedGraph {
        unreached: Vec<NodeId>,
        report: OptimizeReport,
    },
    #[error("map is empty")]
    EmptyMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: SessionId,
    pub label: String,
    /// Whether the session's poses are expressed in the oldest session's frame.
    pub aligned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapNode {
    pub id: NodeId,
    pub session: SessionId,
    pub timestamp: f64,
    /// Session-local odometry pose.
    pub odom_pose: Pose,
    /// Pose in the global (oldest session) frame.
    pub opt_pose: Pose,
    pub frame: FeatureFrame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Odometry,
    LoopClosure,
    Proximity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: LinkKind,
    /// Pose of `to` expressed in `from`'s frame.
    pub transform: Pose,
    /// Information over the `(ω, v)` residual.
    pub information: Matrix6<f64>,
}

/// Returns true when `m` is symmetric and Cholesky-factorizable.
pub fn is_positive_definite(m: &Matrix6<f64>) -> bool {
    let sym = (m - m.transpose()).abs().max() <= 1e-9 * m.abs().max().max(1.0);
    sym && m.iter().all(|x| x.is_finite()) && m.cholesky().is_some()
}

/// Diagonal information from rotation and translation standard deviations.
pub fn diagonal_information(sigma_rot: f64, sigma_trans: f64) -> Matrix6<f64> {
    let r = 1.0 / sigma_rot.max(1e-4).powi(2);
    let t = 1.0 / sigma_trans.max(1e-4).powi(2);
    Matrix6::from_diagonal(&nalgebra::Vector6::new(r, r, r, t, t, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSessionMap {
    pub camera: CameraIntrinsics,
    pub family: FamilyId,
    pub sessions: Vec<Session>,
    pub nodes: Vec<MapNode>,
    pub links: Vec<Link>,
    pub vocabulary: Vocabulary,
}

impl MultiSessionMap {
    pub fn new(camera: CameraIntrinsics, family: FamilyId, backend: SearchBackend) -> Self {
        Self {
            camera,
            family,
            sessions: Vec::new(),
            nodes: Vec::new(),
            links: Vec::new(),
            vocabulary: Vocabulary::new(family, backend),
        }
    }

    /// Opens a new session. The first session defines the global frame and
    /// is aligned by construction.
    pub fn add_session(&mut self, label: impl Into<String>) -> SessionId {
        let id = SessionId(self.sessions.len() as u32);
        self.sessions.push(Session {
            id,
            label: label.into(),
            aligned: self.sessions.is_empty(),
        });
        id
    }

    pub fn session(&self, id: SessionId) -> Result<&Session, GraphError> {
        self.sessions.get(id.0 as usize).ok_or(GraphError::UnknownSession(id))
    }

    pub fn node(&self, id: NodeId) -> Result<&MapNode, GraphError> {
        self.nodes.get(id.0 as usize).ok_or(GraphError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut MapNode, GraphError> {
        self.nodes.get_mut(id.0 as usize).ok_or(GraphError::UnknownNode(id))
    }

    pub fn session_nodes(&self, id: SessionId) -> impl Iterator<Item = &MapNode> + '_ {
        self.nodes.iter().filter(move |n| n.session == id)
    }

    pub fn is_aligned(&self, node: NodeId) -> bool {
        self.node(node)
            .ok()
            .and_then(|n| self.sessions.get(n.session.0 as usize))
            .is_some_and(|s| s.aligned)
    }

    /// Coordinate frame a node lives in: 0 for the global frame of the
    /// aligned sessions, `1 + session` for an unaligned session's own frame.
    pub fn frame_of(&self, node: NodeId) -> Option<u32> {
        let n = self.node(node).ok()?;
        let s = self.sessions.get(n.session.0 as usize)?;
        Some(if s.aligned { 0 } else { 1 + n.session.0 })
    }

    /// First node of the oldest session.
    pub fn anchor(&self) -> Option<NodeId> {
        self.nodes.first().map(|n| n.id)
    }

    /// Appends a node. Its global pose is dead-reckoned from the previous
    /// node of the session, or equals its odometry pose for a session's first
    /// node.
    pub fn add_node(
        &mut self,
        session: SessionId,
        timestamp: f64,
        odom_pose: Pose,
        frame: FeatureFrame,
    ) -> Result<NodeId, GraphError> {
        self.session(session)?;
        if frame.family != self.family {
            return Err(GraphError::FamilyMismatch {
                map: self.family,
                frame: frame.family,
            });
        }
        let opt_pose = match self.nodes.iter().rev().find(|n| n.session == session) {
            Some(prev) => prev.opt_pose.compose(&prev.odom_pose.between(&odom_pose)).normalized(),
            None => odom_pose,
        };
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(MapNode {
            id,
            session,
            timestamp,
            odom_pose,
            opt_pose,
            frame,
        });
        Ok(id)
    }

    pub fn add_link(&mut self, link: Link) -> Result<(), GraphError> {
        let from = self.node(link.from)?;
        let to = self.node(link.to)?;
        if link.from == link.to {
            return Err(GraphError::SelfLoop(link.from));
        }
        if link.kind == LinkKind::Odometry {
            let consecutive = from.session == to.session
                && to.id > from.id
                && !self.nodes[from.id.0 as usize + 1..to.id.0 as usize]
                    .iter()
                    .any(|n| n.session == from.session);
            if !consecutive {
                return Err(GraphError::BadOdometryLink {
                    from: link.from,
                    to: link.to,
                });
            }
        }
        if !is_positive_definite(&link.information) {
            return Err(GraphError::NonPositiveDefiniteInformation);
        }
        self.links.push(link);
        Ok(())
    }

    /// Direct graph neighbors of every node, deduplicated and sorted.
    pub fn adjacency(&self) -> Vec<Vec<NodeId>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for l in &self.links {
            adj[l.from.0 as usize].push(l.to);
            adj[l.to.0 as usize].push(l.from);
        }
        for a in &mut adj {
            a.sort();
            a.dedup();
        }
        adj
    }

    /// Applies a rigid transform to every global pose of a session.
    pub fn transform_session(&mut self, session: SessionId, offset: &Pose) {
        for n in self.nodes.iter_mut().filter(|n| n.session == session) {
            n.opt_pose = offset.compose(&n.opt_pose).normalized();
        }
    }

    pub fn optimize(&mut self, cfg: &OptimizeConfig) -> Result<OptimizeReport, GraphError> {
        optimize(self, cfg)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::Vector3;

    pub fn empty_frame(id: u64) -> FeatureFrame {
        FeatureFrame::new(id, id as f64, FamilyId::Surf)
    }

    pub fn map() -> MultiSessionMap {
        MultiSessionMap::new(CameraIntrinsics::default(), FamilyId::Surf, SearchBackend::Exact)
    }

    #[test]
    fn first_node_takes_odometry_pose() {
        let mut m = map();
        let s = m.add_session("a");
        let p = Pose::from_yaw(0.3, Vector3::new(1.0, 2.0, 0.0));
        let id = m.add_node(s, 0.0, p, empty_frame(0)).unwrap();
        assert_eq!(m.node(id).unwrap().opt_pose, p);
        assert!(m.sessions[0].aligned);
    }

    #[test]
    fn frames_follow_alignment() {
        let mut m = map();
        let a = m.add_session("a");
        let b = m.add_session("b");
        let na = m.add_node(a, 0.0, Pose::identity(), empty_frame(0)).unwrap();
        let nb = m.add_node(b, 1.0, Pose::identity(), empty_frame(1)).unwrap();
        assert_eq!(m.frame_of(na), Some(0));
        assert_eq!(m.frame_of(nb), Some(2));
        assert_eq!(m.frame_of(NodeId(9)), None);
        m.sessions[1].aligned = true;
        assert_eq!(m.frame_of(nb), Some(0));
    }

    #[test]
    fn link_validation() {
        let mut m = map();
        let s = m.add_session("a");
        for i in 0..3 {
            m.add_node(s, i as f64, Pose::identity(), empty_frame(i)).unwrap();
        }
        let info = diagonal_information(0.01, 0.01);
        let link = |from, to, kind| Link {
            from: NodeId(from),
            to: NodeId(to),
            kind,
            transform: Pose::identity(),
            information: info,
        };
        assert_eq!(m.add_link(link(1, 1, LinkKind::LoopClosure)), Err(GraphError::SelfLoop(NodeId(1))));
        assert_eq!(m.add_link(link(0, 7, LinkKind::LoopClosure)), Err(GraphError::UnknownNode(NodeId(7))));
        assert!(matches!(m.add_link(link(0, 2, LinkKind::Odometry)), Err(GraphError::BadOdometryLink { .. })));
        let mut bad = link(0, 2, LinkKind::LoopClosure);
        bad.information[(0, 0)] = -1.0;
        assert_eq!(m.add_link(bad), Err(GraphError::NonPositiveDefiniteInformation));
        m.add_link(link(0, 1, LinkKind::Odometry)).unwrap();
        m.add_link(link(0, 2, LinkKind::LoopClosure)).unwrap();
        assert_eq!(m.adjacency()[0], vec![NodeId(1), NodeId(2)]);
    }

    #[test]
    fn information_floor() {
        let i = diagonal_information(0.0, 1e-9);
        assert_eq!(i[(0, 0)], 1e8);
        assert_eq!(i[(5, 5)], 1e8);
    }
}
