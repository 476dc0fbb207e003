//! Symmetric positive-definite envelope (skyline) solver with reverse
//! Cuthill-McKee ordering, sized for chain-like pose graphs.

use std::collections::VecDeque;

/// Reverse Cuthill-McKee ordering of a graph given as adjacency lists.
/// Returns `perm` with `perm[new] = old`.
pub(crate) fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let degree = |v: usize| adj[v].len();
    while order.len() < n {
        let start = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (degree(v), v))
            .expect("unvisited vertex");
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree(u), u));
            next.dedup();
            for u in next {
                if !visited[u] {
                    visited[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
    order.reverse();
    order
}

/// Lower envelope of a symmetric matrix: row `i` stores columns
/// `first[i]..=i`.
pub(crate) struct Skyline {
    first: Vec<usize>,
    offset: Vec<usize>,
    values: Vec<f64>,
}

impl Skyline {
    pub fn new(first: Vec<usize>) -> Self {
        let mut offset = Vec::with_capacity(first.len() + 1);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            debug_assert!(f <= i);
            offset.push(total);
            total += i - f + 1;
        }
        offset.push(total);
        Self {
            first,
            offset,
            values: vec![0.0; total],
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Adds `v` at `(i, j)` with `j ≤ i`, inside the envelope.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j <= i && j >= self.first[i]);
        self.values[self.offset[i] + j - self.first[i]] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if j < self.first[i] {
            0.0
        } else {
            self.values[self.offset[i] + j - self.first[i]]
        }
    }

    /// In-place Cholesky `A = L Lᵀ`; the envelope holds no fill outside it.
    /// Returns false if the matrix is not positive definite.
    pub fn factor(&mut self) -> bool {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            for j in fi..=i {
                let fj = self.first[j];
                let lo = fi.max(fj);
                let mut s = self.values[self.offset[i] + j - fi];
                let ri = self.offset[i] + lo - fi;
                let rj = self.offset[j] + lo - fj;
                for k in 0..j - lo {
                    s -= self.values[ri + k] * self.values[rj + k];
                }
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return false;
                    }
                    self.values[self.offset[i] + i - fi] = s.sqrt();
                } else {
                    let d = self.values[self.offset[j] + j - fj];
                    self.values[self.offset[i] + j - fi] = s / d;
                }
            }
        }
        true
    }

    /// Solves `L Lᵀ x = b` after `factor`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = b.to_vec();
        for i in 0..n {
            let fi = self.first[i];
            let mut s = y[i];
            for j in fi..i {
                s -= self.values[self.offset[i] + j - fi] * y[j];
            }
            y[i] = s / self.values[self.offset[i] + i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            y[i] /= self.values[self.offset[i] + i - fi];
            let yi = y[i];
            for j in fi..i {
                y[j] -= self.values[self.offset[i] + j - fi] * yi;
            }
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rcm_is_a_permutation_and_reduces_bandwidth_of_a_shuffled_chain() {
        let n = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut labels: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let mut adj = vec![Vec::new(); n];
        for i in 0..n - 1 {
            adj[labels[i]].push(labels[i + 1]);
            adj[labels[i + 1]].push(labels[i]);
        }
        let perm = reverse_cuthill_mckee(&adj);
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let mut pos = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pos[old] = new;
        }
        let bw = (0..n)
            .flat_map(|v| adj[v].iter().map(move |&u| (v, u)))
            .map(|(v, u)| pos[v].abs_diff(pos[u]))
            .max()
            .unwrap();
        assert_eq!(bw, 1);
    }

    #[test]
    fn solve_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n: usize = 24;
        let first: Vec<usize> = (0..n).map(|i| i.saturating_sub(rng.random_range(0..6usize))).collect();
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in first[i]..i {
                let v = rng.random_range(-1.0..1.0);
                dense[(i, j)] = v;
                dense[(j, i)] = v;
            }
            dense[(i, i)] = 10.0 + rng.random_range(0.0..1.0);
        }
        let mut sky = Skyline::new(first.clone());
        for i in 0..n {
            for j in first[i]..=i {
                sky.add(i, j, dense[(i, j)]);
            }
        }
        assert_eq!(sky.get(3, first[3]), dense[(3, first[3])]);
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(sky.factor());
        let x = sky.solve(&b);
        let oracle = dense.cholesky().unwrap().solve(&DVector::from_vec(b));
        for i in 0..n {
            assert!((x[i] - oracle[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_fails() {
        let mut sky = Skyline::new(vec![0, 0]);
        sky.add(0, 0, 1.0);
        sky.add(1, 0, 2.0);
        sky.add(1, 1, 1.0);
        assert!(!sky.factor());
    }
}
