//! Axis-aligned kd-tree over 3D points.
//!
//! Results are exactly the brute-force answers: neighbors ordered by squared distance,
//! ties broken by ascending point index. Squared distances are always computed as
//! `dx*dx + dy*dy + dz*dz` in that order so every caller sees bit-identical keys.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { lo: usize, hi: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Immutable after construction; safe for concurrent queries.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl SpatialIndex {
    pub fn build(points: Vec<[f64; 3]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            build_node(&points, &mut order, 0, &mut nodes);
        }
        Self { points, order, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// The `k` nearest points to `query`, nearest first. Returns all points if `k >= len`.
    pub fn knn(&self, query: &[f64; 3], k: usize) -> Vec<Neighbor> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search_knn(0, query, k, &mut heap);
        heap.into_sorted_vec()
    }

    fn search_knn(&self, node: usize, q: &[f64; 3], k: usize, heap: &mut BinaryHeap<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { lo, hi } => {
                for &i in &self.order[lo..hi] {
                    let cand = Neighbor { index: i, dist2: dist2(q, &self.points[i]) };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search_knn(near, q, k, heap);
                // `<=` keeps equal-distance candidates with smaller indices reachable.
                if heap.len() < k || diff * diff <= heap.peek().unwrap().dist2 {
                    self.search_knn(far, q, k, heap);
                }
            }
        }
    }

    /// All points with squared distance `<= r2`, nearest first.
    pub fn within(&self, query: &[f64; 3], r2: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !self.points.is_empty() {
            self.search_within(0, query, r2, &mut out);
        }
        out.sort();
        out
    }

    fn search_within(&self, node: usize, q: &[f64; 3], r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { lo, hi } => {
                for &i in &self.order[lo..hi] {
                    let d = dist2(q, &self.points[i]);
                    if d <= r2 {
                        out.push(Neighbor { index: i, dist2: d });
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search_within(near, q, r2, out);
                if diff * diff <= r2 {
                    self.search_within(far, q, r2, out);
                }
            }
        }
    }
}

fn build_node(points: &[[f64; 3]], order: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    let n = order.len();
    if n <= LEAF_SIZE {
        nodes.push(Node::Leaf { lo: offset, hi: offset + n });
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
    if hi[axis] - lo[axis] == 0.0 {
        // All points coincide.
        nodes.push(Node::Leaf { lo: offset, hi: offset + n });
        return id;
    }
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let value = points[order[mid]][axis];
    nodes.push(Node::Leaf { lo: 0, hi: 0 });
    let (left_part, right_part) = order.split_at_mut(mid);
    let left = build_node(points, left_part, offset, nodes);
    let right = build_node(points, right_part, offset + mid, nodes);
    nodes[id] = Node::Split { axis, value, left, right };
    id
}
