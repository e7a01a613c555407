//! Exact k-d tree over 3D points.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::num::Real;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: T,
        left: usize,
        right: usize,
    },
}

/// Neighbor as `(squared distance, point index)`.
pub type Neighbor<T> = (T, usize);

/// Queries return neighbors ordered by `(squared distance, index)`, which makes
/// results identical to a brute-force scan even with duplicate coordinates.
#[derive(Debug, Clone)]
pub struct KdTree<T> {
    points: Vec<[T; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
}

fn cmp_neighbor<T: Real>(a: &Neighbor<T>, b: &Neighbor<T>) -> Ordering {
    a.0.partial_cmp(&b.0).expect("finite distance").then(a.1.cmp(&b.1))
}

fn dist2<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl<T: Real> KdTree<T> {
    pub fn build(points: Vec<[T; 3]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} position")));
        }
        let mut tree = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.build_node(0, tree.points.len());
        }
        Ok(tree)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut axis = 0;
        let mut widest = T::neg_infinity();
        for a in 0..3 {
            let (lo, hi) = self.order[start..end]
                .iter()
                .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &i| {
                    (lo.min(self.points[i][a]), hi.max(self.points[i][a]))
                });
            if hi - lo > widest {
                widest = hi - lo;
                axis = a;
            }
        }
        let mid = (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .expect("finite")
                .then(a.cmp(&b))
        });
        let value = self.points[self.order[start + mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, start + mid);
        let right = self.build_node(start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> [T; 3] {
        self.points[i]
    }

    /// The `k` nearest points to `query`, skipping index `exclude`.
    pub fn knn(&self, query: &[T; 3], k: usize, exclude: Option<usize>) -> Vec<Neighbor<T>> {
        let mut best: Vec<Neighbor<T>> = Vec::with_capacity(k + 1);
        if k > 0 && !self.points.is_empty() {
            self.knn_node(0, query, k, exclude, &mut best);
        }
        best
    }

    fn knn_node(&self, node: usize, q: &[T; 3], k: usize, exclude: Option<usize>, best: &mut Vec<Neighbor<T>>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let cand = (dist2(q, &self.points[i]), i);
                    if best.len() == k && cmp_neighbor(&cand, &best[k - 1]) != Ordering::Less {
                        continue;
                    }
                    let at = best.partition_point(|b| cmp_neighbor(b, &cand) == Ordering::Less);
                    best.insert(at, cand);
                    best.truncate(k);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < T::zero() { (left, right) } else { (right, left) };
                self.knn_node(near, q, k, exclude, best);
                // an equal-distance point in the far side may still win on index
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.knn_node(far, q, k, exclude, best);
                }
            }
        }
    }

    /// All points with `‖p − query‖ ≤ radius`, the query point included.
    pub fn within(&self, query: &[T; 3], radius: T) -> Vec<Neighbor<T>> {
        let mut out = Vec::new();
        if !self.points.is_empty() {
            self.within_node(0, query, radius * radius, &mut out);
        }
        out.sort_by(cmp_neighbor);
        out
    }

    fn within_node(&self, node: usize, q: &[T; 3], r2: T, out: &mut Vec<Neighbor<T>>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &self.points[i]);
                    if d <= r2 {
                        out.push((d, i));
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
                let (near, far) = if diff < T::zero() { (left, right) } else { (right, left) };
                self.within_node(near, q, r2, out);
                if diff * diff <= r2 {
                    self.within_node(far, q, r2, out);
                }
            }
        }
    }
}

/// Builds the k-NN index over a cloud's xyz positions.
pub fn build_spatial_index<T: Real>(cloud: &crate::model::PointCloud<T>) -> Result<KdTree<T>> {
    KdTree::build(cloud.positions())
}
