//! KD-tree over real-valued prototypes with an optional cap on the number
//! of points examined per query.

use crate::features::{squared_l2, TwoNearest};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf { start: u32, end: u32 },
    Split { dim: u16, value: f32, left: u32, right: u32 },
}

#[derive(Debug, Clone)]
pub(crate) struct KdTree {
    nodes: Vec<KdNode>,
    perm: Vec<u32>,
    dim: usize,
}

impl KdTree {
    pub fn build<'a>(points: &[&'a [f32]]) -> Self {
        let dim = points.first().map_or(0, |p| p.len());
        let mut tree = KdTree {
            nodes: Vec::new(),
            perm: (0..points.len() as u32).collect(),
            dim,
        };
        if !points.is_empty() {
            let n = points.len();
            tree.build_range(points, 0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    fn build_range(&mut self, points: &[&[f32]], start: usize, end: usize) -> u32 {
        let id = self.nodes.len() as u32;
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf {
                start: start as u32,
                end: end as u32,
            });
            return id;
        }
        let split_dim = self.widest_dim(points, start, end);
        let mid = (start + end) / 2;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a as usize][split_dim].total_cmp(&points[b as usize][split_dim])
        });
        let value = points[self.perm[mid] as usize][split_dim];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build_range(points, start, mid);
        let right = self.build_range(points, mid, end);
        self.nodes[id as usize] = KdNode::Split {
            dim: split_dim as u16,
            value,
            left,
            right,
        };
        id
    }

    /// Dimension of largest spread, estimated on a strided subsample.
    fn widest_dim(&self, points: &[&[f32]], start: usize, end: usize) -> usize {
        let step = ((end - start) / 64).max(1);
        let mut lo = vec![f32::INFINITY; self.dim];
        let mut hi = vec![f32::NEG_INFINITY; self.dim];
        for i in (start..end).step_by(step) {
            let p = points[self.perm[i] as usize];
            for d in 0..self.dim {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (0..self.dim)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    /// Two nearest neighbors by Euclidean distance. `max_checks == 0` searches
    /// exactly; otherwise at most that many points are compared.
    pub fn two_nearest<'p>(
        &self,
        points: &dyn Fn(usize) -> &'p [f32],
        query: &[f32],
        max_checks: usize,
        nn: &mut TwoNearest,
    ) {
        if self.nodes.is_empty() {
            return;
        }
        let mut offsets = vec![0.0f32; self.dim];
        let worst_sq = nn.second.map_or(f32::INFINITY, |(_, d)| d * d);
        let mut state = Search {
            tree: self,
            points,
            query,
            budget: if max_checks == 0 { usize::MAX } else { max_checks },
            nn,
            worst_sq,
        };
        state.visit(0, 0.0, &mut offsets);
    }
}

struct Search<'t, 'p, 'f, 'q, 'n> {
    tree: &'t KdTree,
    points: &'f dyn Fn(usize) -> &'p [f32],
    query: &'q [f32],
    budget: usize,
    nn: &'n mut TwoNearest,
    worst_sq: f32,
}

impl Search<'_, '_, '_, '_, '_> {
    fn visit(&mut self, node: u32, rd: f32, offsets: &mut [f32]) {
        if self.budget == 0 {
            return;
        }
        match self.tree.nodes[node as usize] {
            KdNode::Leaf { start, end } => {
                for &pi in &self.tree.perm[start as usize..end as usize] {
                    if self.budget == 0 {
                        return;
                    }
                    self.budget -= 1;
                    let d = squared_l2((self.points)(pi as usize), self.query).sqrt();
                    self.nn.offer(pi as usize, d);
                }
                if let Some((_, d2)) = self.nn.second {
                    self.worst_sq = d2 * d2;
                }
            }
            KdNode::Split { dim, value, left, right } => {
                let d = dim as usize;
                let diff = self.query[d] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.visit(near, rd, offsets);
                let old = offsets[d];
                let far_rd = rd - old * old + diff * diff;
                // Equal distances must still be explored so ties resolve by index.
                if far_rd <= self.worst_sq * (1.0 + 1e-4) {
                    offsets[d] = diff;
                    self.visit(far, far_rd, offsets);
                    offsets[d] = old;
                }
            }
        }
    }
}
