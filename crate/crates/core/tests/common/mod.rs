//! Shared fixtures and independent reference implementations for the
//! integration tests. Nothing here calls into the library's algorithms.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use morphkit_core::{ControlGraph, GaussianCloud, GaussianPrimitive};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}

pub fn random_points(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| {
            v(
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
                rng.gen_range(-extent..extent),
            )
        })
        .collect()
}

pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let q = nalgebra::Quaternion::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    UnitQuaternion::new_normalize(q).to_rotation_matrix().into_inner()
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner()
}

pub fn splat(center: Vector3<f64>, opacity: f64, scale: f64, color: Vector3<f64>) -> GaussianPrimitive {
    GaussianPrimitive::new(center, opacity, Vector3::repeat(scale), [1.0, 0.0, 0.0, 0.0], color).unwrap()
}

pub fn random_cloud(rng: &mut impl Rng, n: usize, extent: f64) -> GaussianCloud {
    let prims = random_points(rng, n, extent)
        .into_iter()
        .map(|c| {
            GaussianPrimitive::new(
                c,
                rng.gen_range(0.05..1.0),
                v(rng.gen_range(0.01..0.2), rng.gen_range(0.01..0.2), rng.gen_range(0.01..0.2)),
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ],
                v(rng.gen(), rng.gen(), rng.gen()),
            )
            .unwrap()
        })
        .collect();
    GaussianCloud::new(prims)
}

/// Bar of Gaussians along x from 0 to `length`: a spine at y = z = 0 plus a
/// thin sleeve around it.
pub fn bar_cloud(length: f64) -> GaussianCloud {
    let mut prims = Vec::new();
    let steps = (length * 4.0) as usize;
    for k in 0..=steps {
        let x = k as f64 * 0.25;
        let shade = x / length;
        let color = v(0.9 - 0.6 * shade, 0.2 + 0.5 * shade, 0.3);
        prims.push(splat(v(x, 0.0, 0.0), 0.9, 0.18, color));
        for (dy, dz) in [(0.3, 0.0), (-0.3, 0.0), (0.0, 0.3), (0.0, -0.3)] {
            prims.push(splat(v(x + 0.125, dy, dz), 0.8, 0.14, color));
        }
    }
    GaussianCloud::new(prims)
}

/// 21 control points on the x axis at unit spacing.
pub fn bar_points() -> Vec<Vector3<f64>> {
    (0..21).map(|i| v(i as f64, 0.0, 0.0)).collect()
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Single-source shortest paths with a binary heap.
pub fn dijkstra(n: usize, edges: &[(usize, usize, f64)], source: usize) -> Vec<f64> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b, w) in edges {
        adj[a].push((b, w));
        adj[b].push((a, w));
    }
    let mut dist = vec![f64::INFINITY; n];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Entry(0.0, source));
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(k, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[k] {
                dist[k] = nd;
                heap.push(Entry(nd, k));
            }
        }
    }
    dist
}

/// Greedy farthest-point sampling recomputing every minimum distance from
/// scratch at each step.
pub fn fps_oracle(points: &[Vector3<f64>], count: usize, seed: usize) -> Vec<usize> {
    let mut picks = vec![seed];
    while picks.len() < count {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (k, p) in points.iter().enumerate() {
            if picks.contains(&k) {
                continue;
            }
            let d = picks.iter().map(|&s| (p - points[s]).norm()).fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (k, d);
            }
        }
        picks.push(best.0);
    }
    picks
}

/// Directed-pair ARAP energy written out from scratch over the edge list.
pub fn energy_oracle(graph: &ControlGraph, positions: &[Vector3<f64>], rotations: &[Matrix3<f64>]) -> f64 {
    let rest = &graph.rest_positions;
    let mut e = 0.0;
    for edge in &graph.edges {
        for (a, b) in [(edge.i, edge.j), (edge.j, edge.i)] {
            let r = (positions[a] - positions[b]) - rotations[a] * (rest[a] - rest[b]);
            e += edge.weight * r.norm_squared();
        }
    }
    e
}

fn rotation_from_vector(w: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*w).into_inner()
}

/// Minimizes the ARAP energy over free positions and per-node rotation
/// vectors by gradient descent with central-difference gradients and a
/// backtracking line search. Starts from rest with handle overrides and
/// identity rotations. With `rotations` false the rotations stay at
/// identity. Returns the final positions and energy.
pub fn gd_oracle(
    graph: &ControlGraph,
    handles: &[(usize, Vector3<f64>)],
    max_iters: usize,
    rotations: bool,
) -> (Vec<Vector3<f64>>, f64) {
    let n = graph.node_count();
    let free: Vec<usize> = (0..n).filter(|i| handles.iter().all(|(h, _)| h != i)).collect();
    let dim = 3 * free.len() + if rotations { 3 * n } else { 0 };
    let mut x = vec![0.0; dim];
    for (k, &i) in free.iter().enumerate() {
        for c in 0..3 {
            x[3 * k + c] = graph.rest_positions[i][c];
        }
    }
    let unpack = |x: &[f64]| {
        let mut positions = graph.rest_positions.clone();
        for (node, target) in handles {
            positions[*node] = *target;
        }
        for (k, &i) in free.iter().enumerate() {
            positions[i] = v(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
        }
        let off = 3 * free.len();
        let fitted: Vec<Matrix3<f64>> = (0..n)
            .map(|i| {
                if rotations {
                    rotation_from_vector(&v(x[off + 3 * i], x[off + 3 * i + 1], x[off + 3 * i + 2]))
                } else {
                    Matrix3::identity()
                }
            })
            .collect();
        (positions, fitted)
    };
    let f = |x: &[f64]| {
        let (p, r) = unpack(x);
        energy_oracle(graph, &p, &r)
    };

    let mut fx = f(&x);
    let mut step = 1.0;
    let h = 1e-7;
    for _ in 0..max_iters {
        let mut grad = vec![0.0; dim];
        let mut probe = x.clone();
        for d in 0..dim {
            probe[d] = x[d] + h;
            let up = f(&probe);
            probe[d] = x[d] - h;
            let down = f(&probe);
            probe[d] = x[d];
            grad[d] = (up - down) / (2.0 * h);
        }
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if g2 < 1e-20 {
            break;
        }
        step *= 2.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let ft = f(&trial);
            if ft <= fx - 1e-4 * step * g2 {
                x = trial;
                fx = ft;
                break;
            }
            step *= 0.5;
            if step < 1e-14 {
                return (unpack(&x).0, fx);
            }
        }
    }
    (unpack(&x).0, fx)
}

/// Per-node local ARAP term as a function of the rotation.
pub fn local_term(rest_offsets: &[(Vector3<f64>, f64)], deformed_offsets: &[Vector3<f64>], r: &Matrix3<f64>) -> f64 {
    rest_offsets
        .iter()
        .zip(deformed_offsets)
        .map(|((e, w), d)| w * (d - r * e).norm_squared())
        .sum()
}

/// Grid search over rotation vectors in the ball of radius pi, followed by
/// shrinking local grids around the incumbent.
pub fn so3_grid_search(cost: impl Fn(&Matrix3<f64>) -> f64) -> Matrix3<f64> {
    let pi = std::f64::consts::PI;
    let steps = 24;
    let h = 2.0 * pi / steps as f64;
    let mut best = (Vector3::zeros(), f64::INFINITY);
    for a in 0..=steps {
        for b in 0..=steps {
            for c in 0..=steps {
                let w = v(-pi + a as f64 * h, -pi + b as f64 * h, -pi + c as f64 * h);
                if w.norm() > pi + 1e-9 {
                    continue;
                }
                let e = cost(&rotation_from_vector(&w));
                if e < best.1 {
                    best = (w, e);
                }
            }
        }
    }
    let mut radius = h;
    while radius > 1e-9 {
        let mut improved = false;
        let center = best.0;
        for a in -2..=2 {
            for b in -2..=2 {
                for c in -2..=2 {
                    let w = center + v(a as f64, b as f64, c as f64) * (radius / 2.0);
                    let e = cost(&rotation_from_vector(&w));
                    if e < best.1 {
                        best = (w, e);
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            radius *= 0.5;
        }
    }
    rotation_from_vector(&best.0)
}

pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Two-stage neighbor rule computed exhaustively: nearest node by Euclidean
/// distance (lowest index on ties), then every other reachable node ranked
/// by geodesic distance from it.
pub fn binding_oracle(graph: &ControlGraph, point: &Vector3<f64>) -> Vec<(usize, f64)> {
    let n = graph.node_count();
    let dists: Vec<f64> = graph.rest_positions.iter().map(|p| (point - p).norm()).collect();
    let mut n0 = 0;
    for k in 1..n {
        if dists[k] < dists[n0] {
            n0 = k;
        }
    }
    let mut others: Vec<(usize, f64)> = (0..n)
        .filter(|&k| k != n0)
        .map(|k| (k, graph.geodesic.get(n0, k)))
        .filter(|(_, g)| g.is_finite())
        .collect();
    others.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let mut chosen = vec![(n0, dists[n0])];
    chosen.extend(others.into_iter().take(3).map(|(k, g)| (k, dists[n0] + g)));
    let eps = 1e-8 * graph.scene_diameter;
    let inv: Vec<f64> = chosen.iter().map(|(_, d)| 1.0 / (d + eps)).collect();
    let total: f64 = inv.iter().sum();
    chosen.iter().zip(inv).map(|((k, _), w)| (*k, w / total)).collect()
}

/// Perspective projection of a world point for a camera at `position` with
/// camera-to-world rotation `orientation`.
pub fn pinhole(
    position: &Vector3<f64>,
    orientation: &Matrix3<f64>,
    focal: f64,
    principal: (f64, f64),
    p: &Vector3<f64>,
) -> (f64, f64) {
    let c = orientation.transpose() * (p - position);
    (principal.0 + focal * c.x / c.z, principal.1 + focal * c.y / c.z)
}

/// Decodes an RGBA8 PNG into raw bytes and dimensions.
pub fn read_png(path: &std::path::Path) -> (u32, u32, Vec<u8>) {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path).unwrap()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}
