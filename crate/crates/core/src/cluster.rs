//! HDBSCAN over embedding vectors with cosine distance, plus cluster
//! summaries (centroid, medoid) and the effective cluster count.
//!
//! Pipeline: core distances, mutual reachability, Prim's MST over the
//! complete mutual-reachability graph, single-linkage hierarchy, condensed
//! tree, excess-of-mass selection.
//!
//! Conventions:
//! - MST edges of equal weight merge simultaneously, so the hierarchy is
//!   the component structure of the threshold graph and does not depend on
//!   how ties were broken while building the tree.
//! - Cosine distance between nonnegative vectors never exceeds 1, so the
//!   root cluster is born at lambda = 1. The root may be selected like any
//!   other cluster; points that leave it at its birth level (distance 1 to
//!   everything else) carry no mass and are labeled noise.
//! - Distance 0 (exact duplicates) maps to a finite lambda cap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine_similarity, EmbeddingVector};
use crate::error::{Error, Result};

pub const NOISE: i32 = -1;

const LAMBDA_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        HdbscanParams {
            min_cluster_size: 2,
            min_samples: 1,
        }
    }
}

impl HdbscanParams {
    pub fn with_min_cluster_size(min_cluster_size: usize) -> Self {
        HdbscanParams {
            min_cluster_size,
            ..Default::default()
        }
    }
}

/// Per-point labels (`NOISE` for noise) with per-cluster stabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<i32>,
    pub cluster_ids: Vec<i32>,
    pub stabilities: BTreeMap<i32, f64>,
}

impl ClusterAssignment {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    pub fn members(&self, cluster: i32) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }

    fn all_noise(n: usize) -> Self {
        ClusterAssignment {
            labels: vec![NOISE; n],
            cluster_ids: Vec::new(),
            stabilities: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Full pairwise cosine-distance matrix.
pub fn distance_matrix(points: &[EmbeddingVector]) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = 1.0 - cosine_similarity(&points[i], &points[j])?;
            d[i][j] = dist;
            d[j][i] = dist;
        }
    }
    Ok(d)
}

/// Distance from each point to its `min_samples`-th nearest other point
/// (clamped to the number of other points).
pub fn core_distances(dist: &[Vec<f64>], min_samples: usize) -> Vec<f64> {
    let n = dist.len();
    if n <= 1 {
        return vec![0.0; n];
    }
    let k = min_samples.clamp(1, n - 1);
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row[k - 1]
        })
        .collect()
}

pub fn mutual_reachability(dist: &[Vec<f64>], core: &[f64]) -> Vec<Vec<f64>> {
    let n = dist.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[i][j] = core[i].max(core[j]).max(dist[i][j]);
            }
        }
    }
    m
}

/// Prim's algorithm on a dense symmetric weight matrix. Ties go to the
/// lowest vertex index. Edges are returned sorted by (weight, a, b) with
/// `a < b`.
pub fn minimum_spanning_tree(weights: &[Vec<f64>]) -> Vec<MstEdge> {
    let n = weights.len();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    in_tree[0] = true;
    for j in 1..n {
        best[j] = weights[0][j];
    }
    let mut edges = Vec::with_capacity(n - 1);
    for _ in 1..n {
        let mut next = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (next == usize::MAX || best[j] < best[next]) {
                next = j;
            }
        }
        in_tree[next] = true;
        let (a, b) = (parent[next].min(next), parent[next].max(next));
        edges.push(MstEdge {
            a,
            b,
            weight: best[next],
        });
        for j in 0..n {
            if !in_tree[j] && weights[next][j] < best[j] {
                best[j] = weights[next][j];
                parent[j] = next;
            }
        }
    }
    edges.sort_by(|x, y| {
        x.weight
            .total_cmp(&y.weight)
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });
    edges
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as the representative
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// A node of the single-linkage hierarchy. Nodes `0..n` are points.
#[derive(Debug, Clone)]
struct LinkageNode {
    children: Vec<usize>,
    distance: f64,
    size: usize,
}

/// Builds the single-linkage hierarchy from sorted MST edges, merging all
/// edges of one weight as a single level. Returns the nodes and the root.
fn single_linkage(n: usize, mst: &[MstEdge]) -> (Vec<LinkageNode>, usize) {
    let mut nodes: Vec<LinkageNode> = (0..n)
        .map(|_| LinkageNode {
            children: Vec::new(),
            distance: 0.0,
            size: 1,
        })
        .collect();
    let mut uf = UnionFind::new(n);
    // hierarchy node currently representing each union-find root
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut i = 0;
    while i < mst.len() {
        let w = mst[i].weight;
        let mut j = i;
        while j < mst.len() && mst[j].weight == w {
            j += 1;
        }
        let level = &mst[i..j];
        // components before this level, grouped by their root after it
        let mut before: Vec<(usize, usize)> = Vec::new();
        for e in level {
            for p in [e.a, e.b] {
                let r = uf.find(p);
                if !before.iter().any(|&(root, _)| root == r) {
                    before.push((r, node_of[r]));
                }
            }
        }
        for e in level {
            uf.union(e.a, e.b);
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (root, node) in before {
            groups.entry(uf.find(root)).or_default().push(node);
        }
        for (root, mut children) in groups {
            children.sort_unstable();
            let size = children.iter().map(|&c| nodes[c].size).sum();
            nodes.push(LinkageNode {
                children,
                distance: w,
                size,
            });
            node_of[root] = nodes.len() - 1;
        }
        i = j;
    }
    let root = node_of[uf.find(0)];
    (nodes, root)
}

fn lambda(distance: f64) -> f64 {
    if distance <= 1.0 / LAMBDA_CAP {
        LAMBDA_CAP
    } else {
        1.0 / distance
    }
}

#[derive(Debug, Clone)]
struct CondensedCluster {
    parent: Option<usize>,
    birth: f64,
    /// (point, lambda at which it left this cluster)
    fallen: Vec<(usize, f64)>,
    children: Vec<usize>,
    size: usize,
}

fn collect_points(nodes: &[LinkageNode], node: usize, out: &mut Vec<usize>) {
    if nodes[node].children.is_empty() {
        out.push(node);
    } else {
        for &c in &nodes[node].children {
            collect_points(nodes, c, out);
        }
    }
}

fn condense(
    nodes: &[LinkageNode],
    node: usize,
    cluster: usize,
    min_cluster_size: usize,
    clusters: &mut Vec<CondensedCluster>,
) {
    let lam = lambda(nodes[node].distance);
    let children = &nodes[node].children;
    if children.is_empty() {
        clusters[cluster].fallen.push((node, lam));
        return;
    }
    let big: Vec<usize> = children
        .iter()
        .copied()
        .filter(|&c| nodes[c].size >= min_cluster_size)
        .collect();
    for &c in children {
        let is_big = nodes[c].size >= min_cluster_size;
        if is_big && big.len() >= 2 {
            clusters.push(CondensedCluster {
                parent: Some(cluster),
                birth: lam,
                fallen: Vec::new(),
                children: Vec::new(),
                size: nodes[c].size,
            });
            let id = clusters.len() - 1;
            clusters[cluster].children.push(id);
            condense(nodes, c, id, min_cluster_size, clusters);
        } else if is_big {
            condense(nodes, c, cluster, min_cluster_size, clusters);
        } else {
            let mut pts = Vec::new();
            collect_points(nodes, c, &mut pts);
            clusters[cluster].fallen.extend(pts.into_iter().map(|p| (p, lam)));
        }
    }
}

fn stability(clusters: &[CondensedCluster], c: usize) -> f64 {
    let cl = &clusters[c];
    let own: f64 = cl.fallen.iter().map(|&(_, l)| l - cl.birth).sum();
    let kids: f64 = cl
        .children
        .iter()
        .map(|&k| (clusters[k].birth - cl.birth) * clusters[k].size as f64)
        .sum();
    own + kids
}

fn subtree_points(clusters: &[CondensedCluster], c: usize, out: &mut Vec<(usize, f64)>) {
    out.extend_from_slice(&clusters[c].fallen);
    for &k in &clusters[c].children {
        subtree_points(clusters, k, out);
    }
}

/// Runs HDBSCAN with cosine distance.
pub fn hdbscan(points: &[EmbeddingVector], params: HdbscanParams) -> Result<ClusterAssignment> {
    if params.min_cluster_size < 2 {
        return Err(Error::contract("min_cluster_size must be at least 2"));
    }
    if params.min_samples < 1 {
        return Err(Error::contract("min_samples must be at least 1"));
    }
    let n = points.len();
    if n < params.min_cluster_size {
        return Ok(ClusterAssignment::all_noise(n));
    }
    let dist = distance_matrix(points)?;
    let core = core_distances(&dist, params.min_samples);
    let mr = mutual_reachability(&dist, &core);
    let mst = minimum_spanning_tree(&mr);
    let (nodes, root) = single_linkage(n, &mst);

    let top = nodes[root].distance.max(1.0);
    let mut clusters = vec![CondensedCluster {
        parent: None,
        birth: 1.0 / top,
        fallen: Vec::new(),
        children: Vec::new(),
        size: n,
    }];
    condense(&nodes, root, 0, params.min_cluster_size, &mut clusters);

    // Excess-of-mass selection, children before parents (children always
    // carry larger ids).
    let stab: Vec<f64> = (0..clusters.len()).map(|c| stability(&clusters, c)).collect();
    let mut best = stab.clone();
    let mut selected = vec![false; clusters.len()];
    for c in (0..clusters.len()).rev() {
        let kids = &clusters[c].children;
        if kids.is_empty() {
            selected[c] = true;
            continue;
        }
        let subtree: f64 = kids.iter().map(|&k| best[k]).sum();
        if subtree > stab[c] {
            best[c] = subtree;
        } else {
            selected[c] = true;
            let mut stack = kids.clone();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend_from_slice(&clusters[k].children);
            }
        }
    }

    let mut members: Vec<(usize, Vec<usize>)> = Vec::new();
    for c in 0..clusters.len() {
        if !selected[c] {
            continue;
        }
        let mut pts = Vec::new();
        subtree_points(&clusters, c, &mut pts);
        let birth = clusters[c].birth;
        let mut kept: Vec<usize> = pts
            .into_iter()
            .filter(|&(_, l)| clusters[c].parent.is_some() || l > birth)
            .map(|(p, _)| p)
            .collect();
        if kept.is_empty() {
            continue;
        }
        kept.sort_unstable();
        members.push((c, kept));
    }
    // label clusters in order of their lowest member index
    members.sort_by_key(|(_, m)| m[0]);

    let mut labels = vec![NOISE; n];
    let mut stabilities = BTreeMap::new();
    let mut cluster_ids = Vec::new();
    for (label, (c, pts)) in members.iter().enumerate() {
        let label = label as i32;
        for &p in pts {
            labels[p] = label;
        }
        cluster_ids.push(label);
        stabilities.insert(label, stab[*c]);
    }
    Ok(ClusterAssignment {
        labels,
        cluster_ids,
        stabilities,
    })
}

/// Size, centroid and medoid of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub cluster_id: i32,
    pub size: usize,
    pub centroid: EmbeddingVector,
    pub medoid_index: usize,
}

/// Summaries for every non-noise cluster, in cluster-id order.
pub fn summarize_clusters(
    points: &[EmbeddingVector],
    assignment: &ClusterAssignment,
) -> Result<Vec<ClusterSummary>> {
    if points.len() != assignment.labels.len() {
        return Err(Error::contract("assignment does not match points"));
    }
    let mut out = Vec::with_capacity(assignment.cluster_ids.len());
    for &id in &assignment.cluster_ids {
        let members = assignment.members(id);
        let dim = points[members[0]].dim();
        let mut mean = vec![0.0; dim];
        for &m in &members {
            for (acc, v) in mean.iter_mut().zip(points[m].values()) {
                *acc += v;
            }
        }
        let inv = 1.0 / members.len() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
        let centroid = EmbeddingVector::from_values(mean)?;

        let mut medoid = members[0];
        let mut best = f64::INFINITY;
        for &i in &members {
            let mut total = 0.0;
            for &j in &members {
                if i != j {
                    total += 1.0 - cosine_similarity(&points[i], &points[j])?;
                }
            }
            if total < best {
                best = total;
                medoid = i;
            }
        }
        out.push(ClusterSummary {
            cluster_id: id,
            size: members.len(),
            centroid,
            medoid_index: medoid,
        });
    }
    Ok(out)
}

/// Number of clusters plus number of noise points (each noise point is its
/// own singleton).
pub fn effective_cluster_count(assignment: &ClusterAssignment) -> usize {
    assignment.cluster_ids.len() + assignment.noise_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingVector;

    pub(crate) fn basis(dim: usize, i: usize) -> EmbeddingVector {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        EmbeddingVector::from_values(v).unwrap()
    }

    fn mixed(dim: usize, parts: &[(usize, f64)]) -> EmbeddingVector {
        let mut v = vec![0.0; dim];
        for &(i, x) in parts {
            v[i] = x;
        }
        EmbeddingVector::from_values(v).unwrap()
    }

    #[test]
    fn single_point_is_noise() {
        let a = hdbscan(&[basis(4, 0)], HdbscanParams::default()).unwrap();
        assert_eq!(a.labels, vec![NOISE]);
        assert_eq!(effective_cluster_count(&a), 1);
        let empty = hdbscan(&[], HdbscanParams::default()).unwrap();
        assert_eq!(effective_cluster_count(&empty), 0);
    }

    #[test]
    fn rejects_bad_params() {
        let p = HdbscanParams {
            min_cluster_size: 1,
            min_samples: 1,
        };
        assert!(hdbscan(&[basis(2, 0)], p).is_err());
    }

    #[test]
    fn two_orthogonal_duplicate_groups() {
        let pts: Vec<_> = (0..8).map(|i| basis(4, i / 4)).collect();
        let a = hdbscan(&pts, HdbscanParams::default()).unwrap();
        assert_eq!(a.labels, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(a.noise_count(), 0);
        assert_eq!(effective_cluster_count(&a), 2);
    }

    #[test]
    fn mutually_orthogonal_points_are_noise() {
        // Every pair sits at distance 1, so the only level is the root's
        // birth level: condensation leaves the root with eight zero-mass
        // points and no child cluster.
        let pts: Vec<_> = (0..8).map(|i| basis(8, i)).collect();
        let a = hdbscan(&pts, HdbscanParams::default()).unwrap();
        assert_eq!(a.noise_count(), 8);
        assert_eq!(effective_cluster_count(&a), 8);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![basis(4, 2); 8];
        let a = hdbscan(&pts, HdbscanParams::default()).unwrap();
        assert_eq!(a.labels, vec![0; 8]);
        assert_eq!(effective_cluster_count(&a), 1);
    }

    #[test]
    fn two_clusters_and_an_outlier() {
        let mut pts: Vec<_> = (0..7).map(|i| basis(4, (i >= 4) as usize)).collect();
        pts.push(basis(4, 3));
        let a = hdbscan(&pts, HdbscanParams::default()).unwrap();
        assert_eq!(a.labels, vec![0, 0, 0, 0, 1, 1, 1, NOISE]);
        assert_eq!(effective_cluster_count(&a), 3);
    }

    #[test]
    fn groups_at_distance_point_nine() {
        // cos(g0, g1) = 0.1 => distance 0.9
        let s = (1.0f64 - 0.01).sqrt();
        let g0 = mixed(3, &[(0, 1.0)]);
        let g1 = mixed(3, &[(0, 0.1), (1, s)]);
        let pts = vec![g0.clone(), g1.clone(), g0.clone(), g1.clone(), g0];
        let a = hdbscan(&pts, HdbscanParams::default()).unwrap();
        assert_eq!(a.labels, vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn mst_on_small_matrix() {
        let w = vec![
            vec![0.0, 1.0, 4.0, 3.0],
            vec![1.0, 0.0, 2.0, 5.0],
            vec![4.0, 2.0, 0.0, 1.5],
            vec![3.0, 5.0, 1.5, 0.0],
        ];
        let mst = minimum_spanning_tree(&w);
        let total: f64 = mst.iter().map(|e| e.weight).sum();
        assert_eq!(total, 4.5);
        assert_eq!(mst.len(), 3);
        assert!(mst.windows(2).all(|p| p[0].weight <= p[1].weight));
    }

    #[test]
    fn core_distance_is_kth_neighbour() {
        let d = vec![
            vec![0.0, 0.2, 0.5],
            vec![0.2, 0.0, 0.9],
            vec![0.5, 0.9, 0.0],
        ];
        assert_eq!(core_distances(&d, 1), vec![0.2, 0.2, 0.5]);
        assert_eq!(core_distances(&d, 2), vec![0.5, 0.9, 0.9]);
        assert_eq!(core_distances(&d, 7), vec![0.5, 0.9, 0.9]);
    }

    #[test]
    fn summaries() {
        let v = basis(3, 1);
        let a = hdbscan(&vec![v.clone(); 3], HdbscanParams::default()).unwrap();
        let s = summarize_clusters(&vec![v.clone(); 3], &a).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].medoid_index, 0);
        assert_eq!(s[0].size, 3);
        assert!((cosine_similarity(&s[0].centroid, &v).unwrap() - 1.0).abs() < 1e-12);

        // x sits between y and z: d(x,y)=d(x,z)=1-1/sqrt2 while d(y,z)=1.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let pts = vec![basis(3, 0), mixed(3, &[(0, h), (1, h)]), basis(3, 1)];
        let one = ClusterAssignment {
            labels: vec![0, 0, 0],
            cluster_ids: vec![0],
            stabilities: BTreeMap::new(),
        };
        let s = summarize_clusters(&pts, &one).unwrap();
        assert_eq!(s[0].medoid_index, 1);

        let noise = ClusterAssignment::all_noise(3);
        assert!(summarize_clusters(&pts, &noise).unwrap().is_empty());
    }

    #[test]
    fn effective_count_rules() {
        let a = ClusterAssignment {
            labels: vec![0, 0, 1, 1, NOISE],
            cluster_ids: vec![0, 1],
            stabilities: BTreeMap::new(),
        };
        assert_eq!(effective_cluster_count(&a), 3);
        assert_eq!(effective_cluster_count(&ClusterAssignment::all_noise(8)), 8);
    }
}
