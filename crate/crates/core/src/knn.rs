//! Exact k-nearest-neighbor queries over a static point set.
//!
//! Results are ordered by `(distance, index)` so ties resolve the same way
//! on every platform.

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::DMatrix;

use crate::math::sqrt;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    pub fn distance(&self) -> f64 {
        sqrt(self.dist2)
    }
}

#[derive(PartialEq)]
struct Key(f64, usize);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

/// A k-d tree over the rows of a matrix.
pub struct KdTree {
    dim: usize,
    data: Vec<f64>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &DMatrix<f64>) -> Self {
        let (n, dim) = points.shape();
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            for j in 0..dim {
                data.push(points[(i, j)]);
            }
        }
        let mut tree = KdTree {
            dim,
            data,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut best_dim = 0;
        let mut best_spread = -1.0;
        for d in 0..self.dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[start..end] {
                let v = self.data[i * self.dim + d];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                best_dim = d;
            }
        }
        if !(best_spread > 0.0) {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let dim = self.dim;
        let data = &self.data;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            data[a * dim + best_dim]
                .total_cmp(&data[b * dim + best_dim])
                .then(a.cmp(&b))
        });
        let value = self.data[self.order[mid] * dim + best_dim];
        self.nodes.push(Node::Split { dim: best_dim, value, left: 0, right: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { dim: best_dim, value, left, right };
        id
    }

    /// The `k` nearest rows to `query`, skipping the row indices in `exclude`.
    pub fn nearest(&self, query: &[f64], k: usize, exclude: &[usize]) -> Vec<Neighbor> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Key> = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        let mut out: Vec<Neighbor> = heap
            .into_iter()
            .map(|Key(dist2, index)| Neighbor { index, dist2 })
            .collect();
        out.sort_by(|a, b| Key(a.dist2, a.index).cmp(&Key(b.dist2, b.index)));
        out
    }

    fn search(&self, node: usize, q: &[f64], k: usize, exclude: &[usize], heap: &mut BinaryHeap<Key>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if exclude.contains(&i) {
                        continue;
                    }
                    let d2 = crate::math::dist2(self.point(i), q);
                    let key = Key(d2, i);
                    if heap.len() < k {
                        heap.push(key);
                    } else if key < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(key);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                let worst = heap.peek().map_or(f64::INFINITY, |w| w.0);
                if heap.len() < k || diff * diff <= worst {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

/// Mean distance from each row to its nearest other row. When the cloud has
/// more than `max_queries` rows, an evenly strided subset of query rows is
/// used (neighbors are still searched over the whole cloud).
pub fn mean_nearest_neighbor_distance(points: &DMatrix<f64>, max_queries: usize) -> f64 {
    let n = points.nrows();
    if n < 2 {
        return 0.0;
    }
    let tree = KdTree::new(points);
    let queries = n.min(max_queries.max(1));
    let mut total = 0.0;
    for q in 0..queries {
        let i = q * n / queries;
        let nn = tree.nearest(tree.point(i), 1, &[i]);
        total += nn[0].distance();
    }
    total / queries as f64
}

/// Brute-force reference used to check the tree.
pub fn brute_force_nearest(points: &DMatrix<f64>, query: &[f64], k: usize, exclude: &[usize]) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = (0..points.nrows())
        .filter(|i| !exclude.contains(i))
        .map(|i| {
            let row: Vec<f64> = points.row(i).iter().copied().collect();
            Neighbor { index: i, dist2: crate::math::dist2(&row, query) }
        })
        .collect();
    all.sort_by(|a, b| Key(a.dist2, a.index).cmp(&Key(b.dist2, b.index)));
    all.truncate(k);
    all
}
