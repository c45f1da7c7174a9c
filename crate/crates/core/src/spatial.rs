//! Exact radius-count and k-nearest-neighbour queries over a scan.
//!
//! Backed by a k-d tree with axis-aligned bounding boxes per node. Distances
//! are compared squared, `dx*dx + dy*dy + dz*dz`, and the radius boundary is
//! inclusive. Box pruning only relies on the monotonicity of rounded
//! subtraction, so results equal a brute-force scan bit for bit.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{contract, Result};
use crate::geom::PointCloud;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
struct Node {
    lo: [f64; 3],
    hi: [f64; 3],
    start: usize,
    end: usize,
    /// Child node ids; `None` for leaves.
    children: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct NeighborIndex {
    /// Coordinates in tree order.
    coords: Vec<[f64; 3]>,
    /// Original point index for each tree slot.
    order: Vec<usize>,
    /// Tree slot of each original point.
    slot: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist: f64,
}

#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl NeighborIndex {
    pub fn from_cloud(cloud: &PointCloud) -> Self {
        let pts: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.xyz()).collect();
        Self::build(&pts)
    }

    pub fn build(points: &[[f64; 3]]) -> Self {
        let n = points.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::new();
        if n > 0 {
            build_node(points, &mut order, 0, n, &mut nodes);
        }
        let coords: Vec<[f64; 3]> = order.iter().map(|&i| points[i]).collect();
        let mut slot = vec![0; n];
        for (s, &i) in order.iter().enumerate() {
            slot[i] = s;
        }
        Self { coords, order, slot, nodes }
    }

    pub fn point_count(&self) -> usize {
        self.order.len()
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        self.coords[self.slot[i]]
    }

    /// Number of other points within `r` of point `i`.
    pub fn radius_count(&self, i: usize, r: f64) -> Result<usize> {
        check_radius(r)?;
        if i >= self.point_count() {
            return Err(contract(format!("point {i} not in index of {}", self.point_count())));
        }
        Ok(self.count_within(&self.position(i), r * r, Some(self.slot[i])))
    }

    /// Number of indexed points within `r` of an arbitrary position.
    pub fn count_near(&self, q: [f64; 3], r: f64) -> Result<usize> {
        check_radius(r)?;
        Ok(self.count_within(&q, r * r, None))
    }

    fn count_within(&self, q: &[f64; 3], r2: f64, skip_slot: Option<usize>) -> usize {
        if self.nodes.is_empty() {
            return 0;
        }
        let mut count = 0;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if box_min_dist2(q, node) > r2 {
                continue;
            }
            if box_max_dist2(q, node) <= r2 {
                count += node.end - node.start;
                if let Some(s) = skip_slot {
                    if (node.start..node.end).contains(&s) {
                        count -= 1;
                    }
                }
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    stack.push(l);
                    stack.push(r);
                }
                None => {
                    for s in node.start..node.end {
                        if Some(s) != skip_slot && dist2(q, &self.coords[s]) <= r2 {
                            count += 1;
                        }
                    }
                }
            }
        }
        count
    }

    /// The `k` nearest other points of point `i`, ascending by distance, ties
    /// broken by lower index. Fewer than `k` when the cloud is small.
    pub fn knn(&self, i: usize, k: usize) -> Vec<Neighbor> {
        self.knn_impl(&self.position(i), k, Some(i))
    }

    pub fn knn_at(&self, q: [f64; 3], k: usize) -> Vec<Neighbor> {
        self.knn_impl(&q, k, None)
    }

    /// Mean distance from point `i` to its `k` nearest neighbours.
    pub fn mean_knn_distance(&self, i: usize, k: usize) -> Option<f64> {
        let nn = self.knn(i, k);
        (!nn.is_empty()).then(|| nn.iter().map(|n| n.dist).sum::<f64>() / nn.len() as f64)
    }

    fn knn_impl(&self, q: &[f64; 3], k: usize, skip: Option<usize>) -> Vec<Neighbor> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<HeapItem> = BinaryHeap::with_capacity(k + 1);
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if heap.len() == k && box_min_dist2(q, node) > heap.peek().unwrap().0 {
                continue;
            }
            match node.children {
                Some((l, r)) => {
                    // push the far child first so the near one is searched first
                    let (dl, dr) = (box_min_dist2(q, &self.nodes[l]), box_min_dist2(q, &self.nodes[r]));
                    if dl <= dr {
                        stack.push(r);
                        stack.push(l);
                    } else {
                        stack.push(l);
                        stack.push(r);
                    }
                }
                None => {
                    for s in node.start..node.end {
                        let idx = self.order[s];
                        if Some(idx) == skip {
                            continue;
                        }
                        let item = HeapItem(dist2(q, &self.coords[s]), idx);
                        if heap.len() < k {
                            heap.push(item);
                        } else if item < *heap.peek().unwrap() {
                            heap.pop();
                            heap.push(item);
                        }
                    }
                }
            }
        }
        heap.into_sorted_vec()
            .into_iter()
            .map(|HeapItem(d2, index)| Neighbor { index, dist: d2.sqrt() })
            .collect()
    }
}

fn check_radius(r: f64) -> Result<()> {
    if !(r > 0.0) {
        return Err(contract(format!("search radius must be > 0, got {r}")));
    }
    Ok(())
}

fn build_node(points: &[[f64; 3]], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &order[start..end] {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let id = nodes.len();
    nodes.push(Node { lo, hi, start, end, children: None });
    if end - start <= LEAF_SIZE {
        return id;
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .unwrap();
    let mid = (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let l = build_node(points, order, start, start + mid, nodes);
    let r = build_node(points, order, start + mid, end, nodes);
    nodes[id].children = Some((l, r));
    id
}

fn box_min_dist2(q: &[f64; 3], n: &Node) -> f64 {
    let mut d = [0.0; 3];
    for a in 0..3 {
        d[a] = if q[a] < n.lo[a] {
            n.lo[a] - q[a]
        } else if q[a] > n.hi[a] {
            q[a] - n.hi[a]
        } else {
            0.0
        };
    }
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn box_max_dist2(q: &[f64; 3], n: &Node) -> f64 {
    let mut d = [0.0; 3];
    for a in 0..3 {
        d[a] = (q[a] - n.lo[a]).abs().max((q[a] - n.hi[a]).abs());
    }
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}
