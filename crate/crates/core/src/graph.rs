//! Sparse control graph: farthest-point sampling, auxiliary local graph,
//! geodesic distances and deformable edges with distance-decayed weights.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::parallel;

/// Graph construction knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub node_count: usize,
    pub seed_index: usize,
    /// Auxiliary radius as a multiple of the mean nearest-neighbor distance.
    pub aux_radius_factor: f64,
    /// Deformable-edge radius as a fraction of the scene diameter.
    pub connection_radius_factor: f64,
    /// Kernel width as a fraction of the scene diameter.
    pub sigma_factor: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            node_count: 512,
            seed_index: 0,
            aux_radius_factor: 2.0,
            connection_radius_factor: 0.3,
            sigma_factor: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Dense symmetric N x N matrix, row-major. Unreachable pairs hold `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

#[derive(Debug, Clone)]
pub struct ControlGraph {
    pub rest_positions: Vec<Vector3<f64>>,
    /// Index of each node's source point in the sampled cloud.
    pub node_source_indices: Vec<usize>,
    /// Deformable edges with `i < j`, sorted.
    pub edges: Vec<Edge>,
    /// Auxiliary local edges `(i, j, length)` with `i < j`.
    pub aux_edges: Vec<(usize, usize, f64)>,
    pub geodesic: DistanceMatrix,
    pub scene_diameter: f64,
    pub mean_nn_distance: f64,
    pub sigma: f64,
    adjacency: Vec<Vec<(usize, f64)>>,
    pub warnings: Vec<Warning>,
}

impl ControlGraph {
    pub fn node_count(&self) -> usize {
        self.rest_positions.len()
    }

    /// Neighbors of `i` with edge weights, sorted by neighbor index.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edge_weight(i, j).is_some()
    }

    pub fn edge_weight(&self, i: usize, j: usize) -> Option<f64> {
        let adj = self.adjacency.get(i)?;
        adj.binary_search_by_key(&j, |(k, _)| *k)
            .ok()
            .map(|pos| adj[pos].1)
    }

    /// Connected components of the deformable graph, each sorted ascending,
    /// ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        components_of(self.node_count(), self.edges.iter().map(|e| (e.i, e.j)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphExport::from(self))?)
    }
}

/// JSON view of a graph for UIs and fixtures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphExport {
    pub node_count: usize,
    pub scene_diameter: f64,
    pub mean_nn_distance: f64,
    pub sigma: f64,
    pub nodes: Vec<NodeExport>,
    pub edges: Vec<EdgeExport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeExport {
    pub index: usize,
    pub source_index: usize,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeExport {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
    pub geodesic: f64,
}

impl From<&ControlGraph> for GraphExport {
    fn from(g: &ControlGraph) -> Self {
        GraphExport {
            node_count: g.node_count(),
            scene_diameter: g.scene_diameter,
            mean_nn_distance: g.mean_nn_distance,
            sigma: g.sigma,
            nodes: g
                .rest_positions
                .iter()
                .zip(&g.node_source_indices)
                .enumerate()
                .map(|(index, (p, src))| NodeExport {
                    index,
                    source_index: *src,
                    position: (*p).into(),
                })
                .collect(),
            edges: g
                .edges
                .iter()
                .map(|e| EdgeExport {
                    i: e.i,
                    j: e.j,
                    weight: e.weight,
                    geodesic: g.geodesic.get(e.i, e.j),
                })
                .collect(),
        }
    }
}

/// Greedy farthest-point sampling starting at `seed_index`. Ties resolve to
/// the lowest index.
pub fn farthest_point_sample(
    points: &[Vector3<f64>],
    count: usize,
    seed_index: usize,
) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::argument("cannot sample from an empty point set"));
    }
    if count == 0 {
        return Err(Error::argument("sample count must be positive"));
    }
    if count > points.len() {
        return Err(Error::argument(format!(
            "sample count {count} exceeds point count {}",
            points.len()
        )));
    }
    if seed_index >= points.len() {
        return Err(Error::argument(format!("seed index {seed_index} out of range")));
    }

    let mut selected = vec![false; points.len()];
    let mut min_dist = vec![f64::INFINITY; points.len()];
    let mut order = Vec::with_capacity(count);
    let mut current = seed_index;
    loop {
        selected[current] = true;
        order.push(current);
        if order.len() == count {
            break;
        }
        let origin = points[current];
        let mut best: Option<(usize, f64)> = None;
        for (k, p) in points.iter().enumerate() {
            if selected[k] {
                continue;
            }
            let d = (p - origin).norm();
            if d < min_dist[k] {
                min_dist[k] = d;
            }
            if best.is_none_or(|(_, b)| min_dist[k] > b) {
                best = Some((k, min_dist[k]));
            }
        }
        current = best.expect("count <= len leaves an unselected point").0;
    }
    Ok(order)
}

/// Mean over points of the distance to the nearest other point.
pub fn mean_nn_distance(points: &[Vector3<f64>]) -> f64 {
    let n = points.len();
    let total: f64 = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (points[i] - points[j]).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / n as f64
}

pub fn scene_diameter(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.max((points[i] - points[j]).norm());
        }
    }
    best
}

/// Exact all-pairs shortest paths (Floyd-Warshall). Each relaxation round
/// is parallel over rows; results do not depend on the thread count.
pub fn all_pairs_geodesic(aux_edges: &[(usize, usize, f64)], node_count: usize) -> DistanceMatrix {
    let n = node_count;
    let mut data = vec![f64::INFINITY; n * n];
    for i in 0..n {
        data[i * n + i] = 0.0;
    }
    for &(i, j, len) in aux_edges {
        assert!(i < n && j < n, "edge ({i}, {j}) out of range");
        if len < data[i * n + j] {
            data[i * n + j] = len;
            data[j * n + i] = len;
        }
    }
    if n == 0 {
        return DistanceMatrix { n, data };
    }

    parallel::install(|| {
        let mut pivot = vec![0.0; n];
        for k in 0..n {
            pivot.copy_from_slice(&data[k * n..(k + 1) * n]);
            let pivot = &pivot;
            data.par_chunks_mut(n).for_each(|row| {
                let dik = row[k];
                if dik.is_infinite() {
                    return;
                }
                for (dij, dkj) in row.iter_mut().zip(pivot) {
                    let through = dik + dkj;
                    if through < *dij {
                        *dij = through;
                    }
                }
            });
        }
    });
    DistanceMatrix { n, data }
}

/// Gaussian falloff of geodesic distance.
pub fn kernel(distance: f64, sigma: f64) -> f64 {
    (-(distance * distance) / (2.0 * sigma * sigma)).exp()
}

/// Weight of the deformable edge `(i, j)`.
pub fn weight_kernel(graph: &ControlGraph, i: usize, j: usize) -> Result<f64> {
    if i >= graph.node_count() || j >= graph.node_count() || !graph.has_edge(i, j) {
        return Err(Error::argument(format!("({i}, {j}) is not a deformable edge")));
    }
    Ok(kernel(graph.geodesic.get(i, j), graph.sigma))
}

/// Samples `config.node_count` control points from `points` and builds the graph.
pub fn build_control_graph(points: &[Vector3<f64>], config: &GraphConfig) -> Result<ControlGraph> {
    let picks = farthest_point_sample(points, config.node_count, config.seed_index)?;
    let nodes: Vec<Vector3<f64>> = picks.iter().map(|&k| points[k]).collect();
    let mut graph = build_graph_with(&nodes, config)?;
    graph.node_source_indices = picks;
    Ok(graph)
}

/// Builds the graph over `points` with default radii.
pub fn build_graph(points: &[Vector3<f64>]) -> Result<ControlGraph> {
    build_graph_with(points, &GraphConfig::default())
}

pub fn build_graph_with(points: &[Vector3<f64>], config: &GraphConfig) -> Result<ControlGraph> {
    let n = points.len();
    if n < 2 {
        return Err(Error::argument(format!("need at least 2 control points, got {n}")));
    }
    if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::argument("control points must be finite"));
    }

    let mean_nn = mean_nn_distance(points);
    let aux_radius = config.aux_radius_factor * mean_nn;
    let mut aux_edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = (points[i] - points[j]).norm();
            if d <= aux_radius {
                aux_edges.push((i, j, d));
            }
        }
    }

    let geodesic = all_pairs_geodesic(&aux_edges, n);
    let diameter = scene_diameter(points);
    if diameter <= 0.0 {
        return Err(Error::argument("control points are all coincident"));
    }
    let radius = config.connection_radius_factor * diameter;
    let sigma = config.sigma_factor * diameter;

    let mut adjacency = vec![Vec::new(); n];
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let g = geodesic.get(i, j);
            if g <= radius {
                let weight = kernel(g, sigma);
                edges.push(Edge { i, j, weight });
                adjacency[i].push((j, weight));
                adjacency[j].push((i, weight));
            }
        }
    }
    for adj in &mut adjacency {
        adj.sort_by_key(|(k, _)| *k);
    }

    let mut warnings = Vec::new();
    let aux_components = components_of(n, aux_edges.iter().map(|&(i, j, _)| (i, j)));
    if aux_components.len() > 1 {
        let component_sizes: Vec<usize> = aux_components.iter().map(Vec::len).collect();
        log::warn!("auxiliary graph has {} components: {component_sizes:?}", component_sizes.len());
        warnings.push(Warning::Connectivity { component_sizes });
    }

    Ok(ControlGraph {
        rest_positions: points.to_vec(),
        node_source_indices: (0..n).collect(),
        edges,
        aux_edges,
        geodesic,
        scene_diameter: diameter,
        mean_nn_distance: mean_nn,
        sigma,
        adjacency,
        warnings,
    })
}

pub(crate) fn components_of(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut parent: Vec<usize> = (0..n).collect();
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}
