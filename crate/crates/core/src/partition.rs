//! Partitioning structures: CART regression trees, k-means over the
//! categorical indicator subspace and an exact k-d tree neighbor index.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedMatrix;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { max_depth: 4, min_samples_split: 2, min_samples_leaf: 1 }
    }
}

impl TreeParams {
    pub fn new(max_depth: usize, min_samples_split: usize, min_samples_leaf: usize) -> Self {
        Self { max_depth, min_samples_split, min_samples_leaf }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { leaf_id: usize, rows: Vec<usize>, value: f64 },
}

/// Axis-aligned binary tree grown greedily on squared error. Rows with
/// `x[feature] <= threshold` go left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    /// node index of each leaf, by leaf id
    leaf_nodes: Vec<usize>,
    n_features: usize,
    depth: usize,
    params: TreeParams,
}

/// Minimal SSE reduction, relative to `max(1, parent SSE)`, for a split.
const MIN_GAIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Best split of `rows` under the tie rules used by tree growth: lowest
/// feature index, then lowest threshold, wins among equal gains.
pub fn best_split(x: &EncodedMatrix, y: &[f64], rows: &[usize], features: &[usize], min_samples_leaf: usize) -> Option<SplitChoice> {
    let n = rows.len();
    if n < 2 * min_samples_leaf.max(1) {
        return None;
    }
    let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
    let parent: f64 = rows.iter().map(|&i| (y[i] - mean).powi(2)).sum();
    let mut best: Option<SplitChoice> = None;
    let mut order: Vec<usize> = rows.to_vec();
    for &f in features {
        order.sort_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)));
        let total: f64 = order.iter().map(|&i| y[i] - mean).sum();
        let total_sq: f64 = order.iter().map(|&i| (y[i] - mean).powi(2)).sum();
        let (mut s, mut sq) = (0.0, 0.0);
        for k in 1..n {
            let prev = order[k - 1];
            let c = y[prev] - mean;
            s += c;
            sq += c * c;
            let (lo, hi) = (x.get(prev, f), x.get(order[k], f));
            if lo >= hi || k < min_samples_leaf || n - k < min_samples_leaf {
                continue;
            }
            let (nl, nr) = (k as f64, (n - k) as f64);
            let sse_l = sq - s * s / nl;
            let sse_r = (total_sq - sq) - (total - s).powi(2) / nr;
            let gain = parent - sse_l - sse_r;
            if best.is_none_or(|b| gain > b.gain) {
                let mut threshold = 0.5 * (lo + hi);
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(SplitChoice { feature: f, threshold, gain });
            }
        }
    }
    best.filter(|b| b.gain > MIN_GAIN * parent.max(1.0))
}

impl RegressionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> TreeParams {
        self.params
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_nodes.len()
    }

    pub fn n_internal(&self) -> usize {
        self.nodes.len() - self.leaf_nodes.len()
    }

    /// Training rows and mean target of a leaf.
    pub fn leaf(&self, leaf_id: usize) -> (&[usize], f64) {
        match &self.nodes[self.leaf_nodes[leaf_id]] {
            Node::Leaf { rows, value, .. } => (rows, *value),
            Node::Split { .. } => unreachable!("leaf_nodes only indexes leaves"),
        }
    }

    pub fn route(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch { expected: self.n_features, got: x.len() });
        }
        Ok(self.route_unchecked(x))
    }

    pub(crate) fn route_unchecked(&self, x: &[f64]) -> usize {
        let mut node = 0;
        loop {
            match &self.nodes[node] {
                Node::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { *left } else { *right };
                }
                Node::Leaf { leaf_id, .. } => return *leaf_id,
            }
        }
    }

    pub fn predict_mean(&self, x: &[f64]) -> Result<f64> {
        let id = self.route(x)?;
        Ok(self.leaf(id).1)
    }
}

/// Grows a CART tree on every row of `x`.
pub fn build_cart(x: &EncodedMatrix, y: &[f64], params: TreeParams) -> Result<RegressionTree> {
    let rows: Vec<usize> = (0..x.n_rows()).collect();
    build_cart_on(x, y, &rows, params, None)
}

/// Per-node feature subsampling for randomized trees.
pub struct FeatureSampler<'a> {
    pub max_features: usize,
    pub rng: &'a mut ChaCha8Rng,
}

/// Grows a CART tree on the (possibly repeated) row indices `rows`.
pub fn build_cart_on(
    x: &EncodedMatrix,
    y: &[f64],
    rows: &[usize],
    params: TreeParams,
    mut sampler: Option<FeatureSampler<'_>>,
) -> Result<RegressionTree> {
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }
    if y.len() != x.n_rows() {
        return Err(Error::DimensionMismatch { expected: x.n_rows(), got: y.len() });
    }
    if params.min_samples_split == 0 || params.min_samples_leaf == 0 {
        return Err(invalid("min_samples_split and min_samples_leaf must be positive"));
    }
    let p = x.n_cols();
    let all_features: Vec<usize> = (0..p).collect();
    let mut tree = RegressionTree { nodes: Vec::new(), leaf_nodes: Vec::new(), n_features: p, depth: 0, params };
    // (node slot, rows, depth)
    let mut stack: Vec<(usize, Vec<usize>, usize)> = vec![(0, rows.to_vec(), 0)];
    tree.nodes.push(Node::Leaf { leaf_id: 0, rows: vec![], value: 0.0 });
    while let Some((slot, node_rows, depth)) = stack.pop() {
        let splittable = depth < params.max_depth && node_rows.len() >= params.min_samples_split;
        let choice = if splittable {
            let features = match sampler.as_mut() {
                Some(s) if s.max_features < p => sample_features(p, s.max_features, s.rng),
                _ => all_features.clone(),
            };
            best_split(x, y, &node_rows, &features, params.min_samples_leaf)
        } else {
            None
        };
        match choice {
            Some(c) => {
                let (l, r): (Vec<usize>, Vec<usize>) = node_rows.iter().partition(|&&i| x.get(i, c.feature) <= c.threshold);
                let left = tree.nodes.len();
                tree.nodes.push(Node::Leaf { leaf_id: 0, rows: vec![], value: 0.0 });
                tree.nodes.push(Node::Leaf { leaf_id: 0, rows: vec![], value: 0.0 });
                tree.nodes[slot] = Node::Split { feature: c.feature, threshold: c.threshold, left, right: left + 1 };
                // right pushed first so the left subtree is expanded first
                stack.push((left + 1, r, depth + 1));
                stack.push((left, l, depth + 1));
            }
            None => {
                let value = node_rows.iter().map(|&i| y[i]).sum::<f64>() / node_rows.len() as f64;
                let leaf_id = tree.leaf_nodes.len();
                tree.leaf_nodes.push(slot);
                tree.nodes[slot] = Node::Leaf { leaf_id, rows: node_rows, value };
                tree.depth = tree.depth.max(depth);
            }
        }
    }
    Ok(tree)
}

fn sample_features(p: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..p).collect();
    for i in 0..k.max(1) {
        let j = rng.random_range(i..p);
        pool.swap(i, j);
    }
    let mut chosen = pool[..k.max(1)].to_vec();
    chosen.sort_unstable();
    chosen
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Nearest centroid, lowest index on ties.
fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPartition {
    centroids: Vec<Vec<f64>>,
    iterations: usize,
    inertia: f64,
}

impl ClusterPartition {
    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Within-cluster sum of squared distances on the training rows.
    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        let width = self.centroids.first().map_or(0, Vec::len);
        if x.len() != width {
            return Err(Error::DimensionMismatch { expected: width, got: x.len() });
        }
        Ok(nearest(&self.centroids, x).0)
    }
}

fn distinct_rows(x: &EncodedMatrix) -> usize {
    x.rows().map(|r| r.iter().map(|v| v.to_bits()).collect::<Vec<u64>>()).collect::<BTreeSet<_>>().len()
}

/// k-means++ seeding (first centroid uniform, then squared-distance
/// weighted draws).
pub fn kmeans_plus_plus(x: &EncodedMatrix, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let n = x.n_rows();
    if k == 0 {
        return Err(invalid("k-means needs k >= 1"));
    }
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let distinct = distinct_rows(x);
    if k > distinct {
        return Err(invalid(format!("k = {k} exceeds the {distinct} distinct rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = x.rows().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < d {
                break;
            }
            target -= d;
        }
        let pick = pick.expect("k <= distinct rows leaves a point off the centroids");
        let c = x.row(pick).to_vec();
        for (i, r) in x.rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, &c));
        }
        centroids.push(c);
    }
    Ok(centroids)
}

/// Lloyd iterations from `init`. Returns the partition and the within-cluster
/// SSE after the initial assignment and after every iteration.
pub fn lloyd(x: &EncodedMatrix, init: Vec<Vec<f64>>, max_iter: usize) -> (ClusterPartition, Vec<f64>) {
    let n = x.n_rows();
    let k = init.len();
    let dim = x.n_cols();
    let mut centroids = init;
    let mut assignment: Vec<usize> = x.rows().map(|r| nearest(&centroids, r).0).collect();
    let inertia_of = |c: &[Vec<f64>], a: &[usize]| -> f64 { x.rows().zip(a).map(|(r, &j)| sq_dist(r, &c[j])).sum() };
    let mut history = vec![inertia_of(&centroids, &assignment)];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &j) in x.rows().zip(&assignment) {
            counts[j] += 1;
            sums[j].iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // reseed at the point farthest from its own centroid
                let far = (0..n)
                    .filter(|&i| counts[assignment[i]] > 1)
                    .map(|i| (i, sq_dist(x.row(i), &centroids[assignment[i]])))
                    .fold(None::<(usize, f64)>, |acc, (i, d)| match acc {
                        Some((_, bd)) if bd >= d => acc,
                        _ => Some((i, d)),
                    });
                if let Some((i, _)) = far {
                    counts[assignment[i]] -= 1;
                    counts[j] = 1;
                    assignment[i] = j;
                    centroids[j] = x.row(i).to_vec();
                }
            }
        }
        let next: Vec<usize> = x.rows().map(|r| nearest(&centroids, r).0).collect();
        let changed = next != assignment;
        assignment = next;
        history.push(inertia_of(&centroids, &assignment));
        if !changed {
            break;
        }
    }
    let inertia = *history.last().unwrap();
    (ClusterPartition { centroids, iterations, inertia }, history)
}

pub const KMEANS_MAX_ITER: usize = 300;

pub fn fit_kmeans(x: &EncodedMatrix, k: usize, seed: u64, max_iter: usize) -> Result<ClusterPartition> {
    let init = kmeans_plus_plus(x, k, seed)?;
    Ok(lloyd(x, init, max_iter).0)
}

const KD_BUCKET: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum KdNode {
    Leaf { indices: Vec<usize> },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

/// Exact k-nearest-neighbor index. Splits on the widest-spread dimension at
/// the median; buckets hold up to 16 points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodIndex {
    dim: usize,
    points: Vec<f64>,
    nodes: Vec<KdNode>,
    k: usize,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl NeighborhoodIndex {
    pub fn build(x: &EncodedMatrix, k: usize) -> Result<Self> {
        let n = x.n_rows();
        if n == 0 {
            return Err(Error::EmptyData);
        }
        if k == 0 || k > n {
            return Err(invalid(format!("neighbor count {k} outside 1..={n}")));
        }
        let dim = x.n_cols();
        let points: Vec<f64> = x.rows().flatten().copied().collect();
        let mut index = Self { dim, points, nodes: Vec::new(), k };
        let all: Vec<usize> = (0..n).collect();
        index.build_node(all);
        Ok(index)
    }

    fn coord(&self, i: usize, d: usize) -> f64 {
        self.points[i * self.dim + d]
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn build_node(&mut self, mut indices: Vec<usize>) -> usize {
        let slot = self.nodes.len();
        self.nodes.push(KdNode::Leaf { indices: vec![] });
        if indices.len() <= KD_BUCKET {
            self.nodes[slot] = KdNode::Leaf { indices };
            return slot;
        }
        let mut best = (0, 0.0);
        for d in 0..self.dim {
            let (lo, hi) = indices.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = self.coord(i, d);
                (lo.min(v), hi.max(v))
            });
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        if best.1 <= 0.0 {
            self.nodes[slot] = KdNode::Leaf { indices };
            return slot;
        }
        let d = best.0;
        indices.sort_by(|&a, &b| self.coord(a, d).total_cmp(&self.coord(b, d)).then(a.cmp(&b)));
        let mid = indices.len() / 2;
        let value = self.coord(indices[mid], d);
        let right_half = indices.split_off(mid);
        let left = self.build_node(indices);
        let right = self.build_node(right_half);
        self.nodes[slot] = KdNode::Split { dim: d, value, left, right };
        slot
    }

    pub fn len(&self) -> usize {
        self.n_points()
    }

    pub fn is_empty(&self) -> bool {
        self.n_points() == 0
    }

    /// Configured neighbor count.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn n_points(&self) -> usize {
        if self.dim == 0 {
            self.nodes_point_count()
        } else {
            self.points.len() / self.dim
        }
    }

    fn nodes_point_count(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match n {
                KdNode::Leaf { indices } => indices.len(),
                KdNode::Split { .. } => 0,
            })
            .sum()
    }

    /// The `k` nearest training rows as `(index, euclidean distance)` in
    /// nondecreasing distance; equal distances are ordered by index.
    pub fn query(&self, x: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        let n = self.n_points();
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if k == 0 || k > n {
            return Err(invalid(format!("neighbor count {k} outside 1..={n}")));
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, x, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        Ok(out.into_iter().map(|c| (c.index, c.d2.sqrt())).collect())
    }

    fn search(&self, node: usize, x: &[f64], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match &self.nodes[node] {
            KdNode::Leaf { indices } => {
                for &i in indices {
                    let c = Candidate { d2: sq_dist(self.point(i), x), index: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            KdNode::Split { dim, value, left, right } => {
                let diff = x[*dim] - value;
                let (near, far) = if diff <= 0.0 { (*left, *right) } else { (*right, *left) };
                self.search(near, x, k, heap);
                // equal bounds are still visited: they may hold lower-index ties
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.search(far, x, k, heap);
                }
            }
        }
    }
}
