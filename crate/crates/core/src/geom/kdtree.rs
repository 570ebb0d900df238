//! Exact 3-d tree used to accelerate nearest-neighbor queries.
//!
//! Every query returns the same answer as a brute-force scan ordered by
//! `(squared distance, index)`, including the lower-index tie-break. The
//! pruning test only discards a subtree when its splitting plane is strictly
//! farther than the current worst candidate, so equal-distance points with a
//! lower index are still visited.

use super::sq_dist;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [[f64; 3]]) -> Self {
        let mut tree = KdTree {
            points,
            perm: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let pts = self.points;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = pts[self.perm[mid]][axis];
        // Placeholder, patched once both children exist.
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.perm[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let mut best = 0;
        for a in 1..3 {
            if hi[a] - lo[a] > hi[best] - lo[best] {
                best = a;
            }
        }
        best
    }

    /// Nearest point as `(squared distance, index)`; `None` on an empty tree.
    pub fn nearest(&self, q: &[f64; 3]) -> Option<(f64, usize)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_in(0, q, &mut best);
        Some(best)
    }

    fn nearest_in(&self, node: usize, q: &[f64; 3], best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    let d = sq_dist(q, &self.points[i]);
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, q, best);
                if diff * diff <= best.0 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points sorted ascending by `(squared distance, index)`.
    pub fn knn(&self, q: &[f64; 3], k: usize) -> Vec<(f64, usize)> {
        let mut found: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.knn_in(0, q, k, &mut found);
        }
        found
    }

    fn knn_in(&self, node: usize, q: &[f64; 3], k: usize, found: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    insert_candidate(found, k, (sq_dist(q, &self.points[i]), i));
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_in(near, q, k, found);
                if found.len() < k || diff * diff <= found[found.len() - 1].0 {
                    self.knn_in(far, q, k, found);
                }
            }
        }
    }
}

/// Keeps `found` sorted and bounded to `k` entries.
pub(crate) fn insert_candidate(found: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
    let less = |a: &(f64, usize), b: &(f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
    if found.len() == k {
        if !less(&cand, &found[k - 1]) {
            return;
        }
        found.pop();
    }
    let pos = found.partition_point(|e| less(e, &cand));
    found.insert(pos, cand);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        (0..n).map(|_| [next(), next(), next()]).collect()
    }

    #[test]
    fn nearest_matches_scan() {
        let pts = lcg_points(500, 3);
        let tree = KdTree::build(&pts);
        for q in lcg_points(100, 9) {
            let mut best = (f64::INFINITY, usize::MAX);
            for (i, p) in pts.iter().enumerate() {
                let d = sq_dist(&q, p);
                if d < best.0 {
                    best = (d, i);
                }
            }
            assert_eq!(tree.nearest(&q), Some(best));
        }
    }

    #[test]
    fn duplicate_points_prefer_lower_index() {
        let pts = vec![[1.0, 1.0, 1.0]; 40];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.nearest(&[1.0, 1.0, 1.0]), Some((0.0, 0)));
        let ks: Vec<usize> = tree.knn(&[0.0, 0.0, 0.0], 5).iter().map(|e| e.1).collect();
        assert_eq!(ks, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_tree() {
        let pts: Vec<[f64; 3]> = Vec::new();
        let tree = KdTree::build(&pts);
        assert!(tree.nearest(&[0.0; 3]).is_none());
        assert!(tree.knn(&[0.0; 3], 3).is_empty());
    }
}
