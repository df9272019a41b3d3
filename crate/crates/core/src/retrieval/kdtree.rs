use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Median-split KD-tree over row-major points; every node stores one point.
#[derive(Clone, Debug)]
pub(crate) struct KdTree {
    nodes: Vec<Node>,
    root: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Node {
    point: usize,
    dim: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Max-heap entry ordered by `(squared distance, tie key)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Candidate {
    pub d2: f64,
    pub key: u64,
    pub point: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.key.cmp(&other.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KdTree {
    pub fn build(data: &[f64], dim: usize) -> Self {
        let n = if dim == 0 { 0 } else { data.len() / dim };
        let mut idx: Vec<usize> = (0..n).collect();
        let mut tree = KdTree {
            nodes: Vec::with_capacity(n),
            root: None,
        };
        tree.root = tree.build_rec(data, dim, &mut idx);
        tree
    }

    fn build_rec(&mut self, data: &[f64], dim: usize, idx: &mut [usize]) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let coord = |p: usize, d: usize| data[p * dim + d];
        // widest spread, lowest dimension on ties
        let mut split = 0;
        let mut widest = f64::NEG_INFINITY;
        for d in 0..dim {
            let (lo, hi) = idx
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                    (lo.min(coord(p, d)), hi.max(coord(p, d)))
                });
            if hi - lo > widest {
                widest = hi - lo;
                split = d;
            }
        }
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            coord(a, split).total_cmp(&coord(b, split)).then(a.cmp(&b))
        });
        let point = idx[mid];
        let slot = self.nodes.len();
        self.nodes.push(Node {
            point,
            dim: split,
            left: None,
            right: None,
        });
        let (lo, rest) = idx.split_at_mut(mid);
        let left = self.build_rec(data, dim, lo);
        let right = self.build_rec(data, dim, &mut rest[1..]);
        self.nodes[slot].left = left;
        self.nodes[slot].right = right;
        Some(slot)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Exact k nearest points, sorted ascending by `(distance, key)`.
    /// Returns the candidates and the number of visited nodes.
    pub fn knn(
        &self,
        data: &[f64],
        dim: usize,
        keys: &[u64],
        q: &[f64],
        k: usize,
    ) -> (Vec<Candidate>, usize) {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        let mut visits = 0;
        if let Some(r) = self.root {
            self.search(r, data, dim, keys, q, k, &mut heap, &mut visits);
        }
        (heap.into_sorted_vec(), visits)
    }

    #[allow(clippy::too_many_arguments)]
    fn search(
        &self,
        node: usize,
        data: &[f64],
        dim: usize,
        keys: &[u64],
        q: &[f64],
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
        visits: &mut usize,
    ) {
        *visits += 1;
        let n = self.nodes[node];
        let p = &data[n.point * dim..(n.point + 1) * dim];
        let cand = Candidate {
            d2: squared_distance(q, p),
            key: keys[n.point],
            point: n.point,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().expect("k >= 1") {
            heap.pop();
            heap.push(cand);
        }
        let diff = q[n.dim] - p[n.dim];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.search(c, data, dim, keys, q, k, heap, visits);
        }
        if let Some(c) = far {
            // equal bounds are still explored so tie keys can win
            if heap.len() < k || diff * diff <= heap.peek().expect("non-empty").d2 {
                self.search(c, data, dim, keys, q, k, heap, visits);
            }
        }
    }
}
