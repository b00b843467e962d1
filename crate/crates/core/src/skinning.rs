//! Linear blend skinning of the dense cloud onto the control graph.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rayon::prelude::*;

use crate::arap::DeformationState;
use crate::error::{Error, Result, Warning};
use crate::graph::ControlGraph;
use crate::parallel;
use crate::splat::{GaussianCloud, GaussianPrimitive};

/// Control nodes per Gaussian.
pub const BIND_COUNT: usize = 4;

/// Blend neighbors of one Gaussian. The first entry is the Euclidean-nearest
/// control node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Binding {
    len: usize,
    nodes: [usize; BIND_COUNT],
    weights: [f64; BIND_COUNT],
}

impl Binding {
    pub fn new(entries: &[(usize, f64)]) -> Result<Self> {
        if entries.is_empty() || entries.len() > BIND_COUNT {
            return Err(Error::argument(format!(
                "a binding needs 1..={BIND_COUNT} entries, got {}",
                entries.len()
            )));
        }
        let mut b = Binding {
            len: entries.len(),
            nodes: [0; BIND_COUNT],
            weights: [0.0; BIND_COUNT],
        };
        for (k, &(node, w)) in entries.iter().enumerate() {
            if entries[..k].iter().any(|(n, _)| *n == node) {
                return Err(Error::argument(format!("node {node} bound twice")));
            }
            b.nodes[k] = node;
            b.weights[k] = w;
        }
        Ok(b)
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes[..self.len]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights[..self.len]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes().iter().copied().zip(self.weights().iter().copied())
    }
}

#[derive(Debug, Clone)]
pub struct BindingTable {
    pub bindings: Vec<Binding>,
    /// Per control node: `(neighbor, rest edge length)` over the deformable graph.
    rest_lengths: Vec<Vec<(usize, f64)>>,
    pub warnings: Vec<Warning>,
}

impl BindingTable {
    /// Table from explicit bindings; rest lengths come from `graph`.
    pub fn from_bindings(graph: &ControlGraph, bindings: Vec<Binding>) -> Result<Self> {
        let n = graph.node_count();
        if let Some(b) = bindings.iter().find(|b| b.nodes().iter().any(|&k| k >= n)) {
            return Err(Error::argument(format!("binding {:?} references a missing node", b.nodes())));
        }
        Ok(Self {
            bindings,
            rest_lengths: rest_lengths(graph),
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }
}

fn rest_lengths(graph: &ControlGraph) -> Vec<Vec<(usize, f64)>> {
    let rest = &graph.rest_positions;
    (0..graph.node_count())
        .map(|j| {
            graph
                .neighbors(j)
                .iter()
                .map(|&(k, _)| (k, (rest[j] - rest[k]).norm()))
                .collect()
        })
        .collect()
}

/// Inverse-distance weights normalized to sum to one.
pub fn blend_weights(distances: &[f64], epsilon: f64) -> Vec<f64> {
    let raw: Vec<f64> = distances.iter().map(|d| 1.0 / (d + epsilon)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// For each control node, its `BIND_COUNT - 1` geodesically nearest
/// reachable nodes (ties to the lowest index).
fn geodesic_neighbors(graph: &ControlGraph) -> Vec<Vec<usize>> {
    let n = graph.node_count();
    (0..n)
        .map(|a| {
            let row = graph.geodesic.row(a);
            let mut candidates: Vec<usize> = (0..n).filter(|&j| j != a && row[j].is_finite()).collect();
            candidates.sort_by(|&x, &y| row[x].total_cmp(&row[y]).then(x.cmp(&y)));
            candidates.truncate(BIND_COUNT - 1);
            candidates
        })
        .collect()
}

fn nearest_node(graph: &ControlGraph, point: &Vector3<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, p) in graph.rest_positions.iter().enumerate() {
        let d = (point - p).norm();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Two-stage binding: the Euclidean-nearest control node, then its
/// geodesically nearest neighbors. Blend distance is the Euclidean leg plus
/// the geodesic leg.
pub fn bind(cloud: &GaussianCloud, graph: &ControlGraph) -> Result<BindingTable> {
    if cloud.is_empty() {
        return Err(Error::argument("cannot bind an empty cloud"));
    }
    let onward = geodesic_neighbors(graph);
    let epsilon = 1e-8 * graph.scene_diameter;
    let bindings: Vec<Binding> = parallel::install(|| {
        cloud
            .primitives
            .par_iter()
            .map(|prim| {
                let (first, leg) = nearest_node(graph, &prim.center);
                let mut nodes = vec![first];
                let mut dist = vec![leg];
                for &j in &onward[first] {
                    nodes.push(j);
                    dist.push(leg + graph.geodesic.get(first, j));
                }
                let weights = blend_weights(&dist, epsilon);
                let entries: Vec<(usize, f64)> = nodes.into_iter().zip(weights).collect();
                Binding::new(&entries).expect("distinct nodes")
            })
            .collect()
    });

    let mut warnings = Vec::new();
    for (gaussian, b) in bindings.iter().enumerate() {
        if b.len < BIND_COUNT.min(graph.node_count()) {
            warnings.push(Warning::Binding {
                gaussian,
                neighbors: b.len,
            });
        }
    }
    if !warnings.is_empty() {
        log::warn!("{} gaussians bound to fewer than {BIND_COUNT} control nodes", warnings.len());
    }
    Ok(BindingTable {
        bindings,
        rest_lengths: rest_lengths(graph),
        warnings,
    })
}

/// Mean ratio of deformed to rest edge length around each control node.
pub fn node_scale_ratios(binding: &BindingTable, positions: &[Vector3<f64>]) -> Vec<f64> {
    binding
        .rest_lengths
        .iter()
        .enumerate()
        .map(|(j, edges)| {
            let ratios: Vec<f64> = edges
                .iter()
                .filter(|(_, rest)| *rest > 0.0)
                .map(|&(k, rest)| (positions[j] - positions[k]).norm() / rest)
                .collect();
            if ratios.is_empty() {
                1.0
            } else {
                ratios.iter().sum::<f64>() / ratios.len() as f64
            }
        })
        .collect()
}

fn quat_of(r: &Matrix3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r))
}

/// Propagates a solved control-graph state to every Gaussian.
///
/// Centers use the blended rigid transforms written as displacements, so a
/// zero displacement leaves a center bit-identical. Rotations are blended
/// with hemisphere alignment and renormalized; scales are multiplied by the
/// blended neighborhood stretch.
pub fn deform_cloud(
    cloud: &GaussianCloud,
    graph: &ControlGraph,
    state: &DeformationState,
    binding: &BindingTable,
) -> Result<(GaussianCloud, Vec<Warning>)> {
    let n = graph.node_count();
    if state.positions.len() != n || state.rotations.len() != n {
        return Err(Error::argument("deformation state does not match the graph"));
    }
    if binding.len() != cloud.len() {
        return Err(Error::argument(format!(
            "binding covers {} gaussians, cloud has {}",
            binding.len(),
            cloud.len()
        )));
    }
    if binding.rest_lengths.len() != n {
        return Err(Error::argument("binding was built for a different graph"));
    }

    let rest = &graph.rest_positions;
    let node_quats: Vec<UnitQuaternion<f64>> = state.rotations.iter().map(quat_of).collect();
    let ratios = node_scale_ratios(binding, &state.positions);
    let identity = Matrix3::identity();

    let results: Vec<(GaussianPrimitive, bool)> = parallel::install(|| {
        cloud
            .primitives
            .par_iter()
            .zip(&binding.bindings)
            .map(|(prim, b)| {
                let mut displacement = Vector3::zeros();
                let mut stretch = 0.0;
                let mut blended = Quaternion::new(0.0, 0.0, 0.0, 0.0);
                let mut reference: Option<Quaternion<f64>> = None;
                let mut dominant = (f64::NEG_INFINITY, prim.rotation);
                for (j, w) in b.iter() {
                    let r = &state.rotations[j];
                    displacement += w * ((r - identity) * (prim.center - rest[j]) + (state.positions[j] - rest[j]));
                    stretch += w * ratios[j];

                    let rotated = node_quats[j] * prim.rotation;
                    let mut q = *rotated.quaternion();
                    match reference {
                        None => reference = Some(q),
                        Some(r0) if r0.dot(&q) < 0.0 => q = -q,
                        Some(_) => {}
                    }
                    blended += q * w;
                    if w > dominant.0 {
                        dominant = (w, rotated);
                    }
                }

                let norm = blended.norm();
                let (rotation, degenerate) = if norm > 1e-12 {
                    (UnitQuaternion::new_unchecked(blended / norm), false)
                } else {
                    (dominant.1, true)
                };
                let out = GaussianPrimitive {
                    center: prim.center + displacement,
                    opacity: prim.opacity,
                    scale: prim.scale * stretch,
                    rotation,
                    color: prim.color,
                };
                (out, degenerate)
            })
            .collect()
    });

    let mut warnings = Vec::new();
    let mut primitives = Vec::with_capacity(results.len());
    for (gaussian, (prim, degenerate)) in results.into_iter().enumerate() {
        if degenerate {
            warnings.push(Warning::DegenerateBlend { gaussian });
        }
        primitives.push(prim);
    }
    Ok((
        GaussianCloud {
            primitives,
            source_path: cloud.source_path.clone(),
            extra: cloud.extra.clone(),
        },
        warnings,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn prim_at(c: Vector3<f64>) -> GaussianPrimitive {
        GaussianPrimitive::new(c, 0.8, v(0.1, 0.2, 0.3), [0.9, 0.1, -0.3, 0.2], v(0.1, 0.5, 0.9)).unwrap()
    }

    #[test]
    fn equal_blend_distances_give_equal_weights() {
        let w = blend_weights(&[0.7; 4], 1e-8);
        for x in w {
            assert!((x - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn gaussian_on_a_node_is_dominated_by_it() {
        let pts = [v(0., 0., 0.), v(5., 0., 0.), v(0., 5., 0.), v(0., 0., 5.), v(5., 5., 5.)];
        let g = build_graph(&pts).unwrap();
        let cloud = GaussianCloud::new(vec![prim_at(pts[2])]);
        let table = bind(&cloud, &g).unwrap();
        let b = &table.bindings[0];
        assert_eq!(b.nodes()[0], 2);
        for &w in &b.weights()[1..] {
            assert!(b.weights()[0] > w);
        }
        assert!((b.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hand_evaluated_single_neighbor() {
        let pts = [v(0., 0., 0.), v(3., 0., 0.)];
        let g = build_graph(&pts).unwrap();
        let cloud = GaussianCloud::new(vec![prim_at(v(1., 0., 0.))]);
        let table = BindingTable::from_bindings(&g, vec![Binding::new(&[(0, 1.0)]).unwrap()]).unwrap();
        let mut state = DeformationState::identity(&g);
        state.rotations[0] = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2).into_inner();
        state.positions[0] = v(1., 0., 0.);
        let (out, warnings) = deform_cloud(&cloud, &g, &state, &table).unwrap();
        assert!(warnings.is_empty());
        assert!((out.primitives[0].center - v(1., 1., 0.)).norm() < 1e-12);
    }

    #[test]
    fn sparse_graph_pads_and_warns() {
        // Two isolated pairs: each node reaches only one other node.
        let pts = [v(0., 0., 0.), v(1., 0., 0.), v(50., 0., 0.), v(51., 0., 0.)];
        let g = build_graph(&pts).unwrap();
        let cloud = GaussianCloud::new(vec![prim_at(v(0.2, 0.1, 0.0))]);
        let table = bind(&cloud, &g).unwrap();
        assert_eq!(table.bindings[0].nodes(), &[0, 1]);
        assert_eq!(table.warnings, vec![Warning::Binding { gaussian: 0, neighbors: 2 }]);
        assert!((table.bindings[0].weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_turn_blend_stays_unit() {
        let pts = [v(0., 0., 0.), v(1., 0., 0.)];
        let g = build_graph(&pts).unwrap();
        let p = GaussianPrimitive::new(v(0.5, 0., 0.), 0.5, v(1., 1., 1.), [1., 0., 0., 0.], v(0., 0., 0.)).unwrap();
        let cloud = GaussianCloud::new(vec![p]);
        let table = BindingTable::from_bindings(&g, vec![Binding::new(&[(0, 0.5), (1, 0.5)]).unwrap()]).unwrap();
        let mut state = DeformationState::identity(&g);
        state.rotations[1] = Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI).into_inner();
        let (out, warnings) = deform_cloud(&cloud, &g, &state, &table).unwrap();
        assert!(warnings.is_empty());
        let q = out.primitives[0].rotation;
        assert!((q.quaternion().norm() - 1.0).abs() < 1e-12);
        // Halfway between identity and a half turn about x.
        assert!((q.angle() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let pts = [v(0., 0., 0.), v(1., 0., 0.)];
        let g = build_graph(&pts).unwrap();
        let cloud = GaussianCloud::new(vec![prim_at(v(0., 0., 0.)), prim_at(v(1., 0., 0.))]);
        let table = BindingTable::from_bindings(&g, vec![Binding::new(&[(0, 1.0)]).unwrap()]).unwrap();
        let state = DeformationState::identity(&g);
        assert!(deform_cloud(&cloud, &g, &state, &table).is_err());
        assert!(Binding::new(&[(0, 0.5), (0, 0.5)]).is_err());
        assert!(BindingTable::from_bindings(&g, vec![Binding::new(&[(7, 1.0)]).unwrap()]).is_err());
    }
}
