//! Handle-constrained as-rigid-as-possible deformation of the control graph.
//!
//! The solver alternates a global position solve (graph Laplacian with the
//! handle coordinates eliminated) and a local per-node rotation fit.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::graph::{components_of, ControlGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    #[default]
    FullArap,
    /// Rotations held at identity; only the position solve runs.
    LaplacianOnly,
}

/// Starting point of a cold solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    /// Rest positions and identity rotations.
    Rest,
    /// Rest pose moved by the rigid transform that best maps handle rest
    /// positions onto their targets; every rotation starts at that rotation.
    /// Only used in full ARAP mode.
    #[default]
    RigidFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub iterations: usize,
    /// Relative residual bound for each reduced linear solve.
    pub linear_solver_tolerance: f64,
    pub rotation_mode: RotationMode,
    pub initialization: Initialization,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            linear_solver_tolerance: 1e-10,
            rotation_mode: RotationMode::FullArap,
            initialization: Initialization::RigidFit,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::argument("solver iterations must be at least 1"));
        }
        if !(self.linear_solver_tolerance > 0.0) {
            return Err(Error::argument("linear solver tolerance must be positive"));
        }
        Ok(())
    }
}

/// User-constrained nodes and their target positions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HandleSet {
    entries: Vec<(usize, Vector3<f64>)>,
}

impl HandleSet {
    pub fn new(entries: Vec<(usize, Vector3<f64>)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (node, target) in &entries {
            if !seen.insert(*node) {
                return Err(Error::argument(format!("handle node {node} listed twice")));
            }
            if !target.iter().all(|v| v.is_finite()) {
                return Err(Error::argument(format!("handle node {node} has a non-finite target")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, Vector3<f64>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted handle node indices.
    pub fn nodes(&self) -> Vec<usize> {
        let mut nodes: Vec<usize> = self.entries.iter().map(|(n, _)| *n).collect();
        nodes.sort_unstable();
        nodes
    }

    pub fn target(&self, node: usize) -> Option<Vector3<f64>> {
        self.entries.iter().find(|(n, _)| *n == node).map(|(_, t)| *t)
    }

    /// Sets the target of `node`, registering it if needed.
    pub fn set(&mut self, node: usize, target: Vector3<f64>) {
        match self.entries.iter_mut().find(|(n, _)| *n == node) {
            Some(entry) => entry.1 = target,
            None => self.entries.push((node, target)),
        }
    }

    fn check_range(&self, node_count: usize) -> Result<()> {
        match self.entries.iter().find(|(n, _)| *n >= node_count) {
            Some((n, _)) => Err(Error::argument(format!(
                "handle node {n} out of range for {node_count} control nodes"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationState {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Matrix3<f64>>,
    pub energy: f64,
    pub iterations_run: usize,
    /// Energy at the start and after every half-step of the alternation.
    pub energy_trace: Vec<f64>,
    pub warnings: Vec<Warning>,
}

impl DeformationState {
    /// Undeformed state: rest positions, identity rotations.
    pub fn identity(graph: &ControlGraph) -> Self {
        let n = graph.node_count();
        Self {
            positions: graph.rest_positions.clone(),
            rotations: vec![Matrix3::identity(); n],
            energy: 0.0,
            iterations_run: 0,
            energy_trace: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            positions: self.positions.iter().map(|p| (*p).into()).collect(),
            rotations: self
                .rotations
                .iter()
                .map(|r| {
                    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
                    [q.w, q.i, q.j, q.k]
                })
                .collect(),
            energy: self.energy,
            iterations_run: self.iterations_run,
        }
    }
}

/// Serializable view of a solved state; rotations as `[w, x, y, z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub energy: f64,
    pub iterations_run: usize,
}

fn check_dims(graph: &ControlGraph, positions: usize, rotations: usize) -> Result<()> {
    let n = graph.node_count();
    if positions != n || rotations != n {
        return Err(Error::argument(format!(
            "state has {positions} positions and {rotations} rotations, graph has {n} nodes"
        )));
    }
    Ok(())
}

/// ARAP energy summed over directed neighbor pairs, so every undirected
/// edge contributes once per endpoint rotation.
pub fn energy_of(
    graph: &ControlGraph,
    positions: &[Vector3<f64>],
    rotations: &[Matrix3<f64>],
) -> Result<f64> {
    check_dims(graph, positions.len(), rotations.len())?;
    let rest = &graph.rest_positions;
    let mut total = 0.0;
    for i in 0..graph.node_count() {
        for &(j, w) in graph.neighbors(i) {
            let residual = (positions[i] - positions[j]) - rotations[i] * (rest[i] - rest[j]);
            total += w * residual.norm_squared();
        }
    }
    Ok(total)
}

pub fn arap_energy(graph: &ControlGraph, state: &DeformationState) -> Result<f64> {
    energy_of(graph, &state.positions, &state.rotations)
}

/// Rotation maximizing `tr(R S)` for a 3x3 cross-covariance `S`, with the
/// determinant forced to +1. Rank-deficient inputs get the smallest
/// rotation that is still optimal; a vanishing `S` gives identity.
pub fn best_rotation(s: &Matrix3<f64>) -> Matrix3<f64> {
    let scale = s.abs().max();
    if !(scale > 0.0) || !scale.is_finite() {
        return Matrix3::identity();
    }
    let svd = s.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let v = v_t.transpose();

    if sv[order[1]] <= 1e-10 * sv[order[0]] {
        // Rank one: S = s u vᵀ and any R with R u = v is optimal.
        let from = u.column(order[0]).into_owned();
        let to = v.column(order[0]).into_owned();
        return minimal_rotation(&from, &to);
    }

    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    v * d * u.transpose()
}

fn minimal_rotation(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b) = (from.normalize(), to.normalize());
    let cross = a.cross(&b);
    let sin = cross.norm();
    let cos = a.dot(&b);
    if sin > 1e-12 {
        let axis = nalgebra::Unit::new_unchecked(cross / sin);
        return Rotation3::from_axis_angle(&axis, sin.atan2(cos)).into_inner();
    }
    if cos > 0.0 {
        return Matrix3::identity();
    }
    // Antiparallel: half turn about any axis orthogonal to `from`.
    let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let axis = nalgebra::Unit::new_normalize(a.cross(&helper));
    Rotation3::from_axis_angle(&axis, std::f64::consts::PI).into_inner()
}

/// Local step: best rotation per node from the weighted cross-covariance of
/// rest and deformed neighbor offsets.
pub fn fit_rotations(
    graph: &ControlGraph,
    rest: &[Vector3<f64>],
    deformed: &[Vector3<f64>],
) -> Result<Vec<Matrix3<f64>>> {
    check_dims(graph, rest.len(), deformed.len())?;
    Ok((0..graph.node_count())
        .map(|i| {
            let mut s = Matrix3::zeros();
            for &(j, w) in graph.neighbors(i) {
                s += w * (rest[j] - rest[i]) * (deformed[j] - deformed[i]).transpose();
            }
            best_rotation(&s)
        })
        .collect())
}

/// Right-hand side of the global step before handle elimination.
fn rotated_laplacian_rhs(graph: &ControlGraph, rotations: &[Matrix3<f64>]) -> Vec<Vector3<f64>> {
    let rest = &graph.rest_positions;
    (0..graph.node_count())
        .map(|i| {
            graph
                .neighbors(i)
                .iter()
                .map(|&(j, w)| 0.5 * w * ((rotations[i] + rotations[j]) * (rest[i] - rest[j])))
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone)]
enum BlockKind {
    /// At least one node touches a handle; the reduced Laplacian is SPD.
    Constrained,
    /// No handle reaches this component. The first node is grounded and the
    /// result is shifted to keep the reference centroid.
    Floating,
}

#[derive(Debug, Clone)]
struct Block {
    nodes: Vec<usize>,
    kind: BlockKind,
    /// Nodes entering the factored system (all nodes, or all but the grounded one).
    solved: Vec<usize>,
    matrix: DMatrix<f64>,
    factor: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

/// Reduced Laplacian factorizations for a fixed handle index set. Reusable
/// for any targets and rotations while the set of handle nodes is unchanged.
#[derive(Debug, Clone)]
pub struct PositionSolver {
    handle_nodes: Vec<usize>,
    is_handle: Vec<bool>,
    blocks: Vec<Block>,
    tolerance: f64,
}

impl PositionSolver {
    pub fn new(graph: &ControlGraph, handle_nodes: &[usize], tolerance: f64) -> Result<Self> {
        let n = graph.node_count();
        if handle_nodes.is_empty() {
            return Err(Error::Constraint(
                "at least one handle is required to pin the deformation".into(),
            ));
        }
        let mut is_handle = vec![false; n];
        for &h in handle_nodes {
            if h >= n {
                return Err(Error::argument(format!("handle node {h} out of range for {n} nodes")));
            }
            if is_handle[h] {
                return Err(Error::argument(format!("handle node {h} listed twice")));
            }
            is_handle[h] = true;
        }
        let mut sorted = handle_nodes.to_vec();
        sorted.sort_unstable();

        let free_edges = graph
            .edges
            .iter()
            .filter(|e| !is_handle[e.i] && !is_handle[e.j])
            .map(|e| (e.i, e.j));
        let blocks = components_of(n, free_edges)
            .into_iter()
            .filter(|c| !is_handle[c[0]])
            .map(|nodes| Self::factor_block(graph, &is_handle, nodes))
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            handle_nodes: sorted,
            is_handle,
            blocks,
            tolerance,
        })
    }

    fn factor_block(graph: &ControlGraph, is_handle: &[bool], nodes: Vec<usize>) -> Result<Block> {
        let touches_handle = nodes
            .iter()
            .any(|&i| graph.neighbors(i).iter().any(|&(j, _)| is_handle[j]));
        let (kind, solved) = if touches_handle {
            (BlockKind::Constrained, nodes.clone())
        } else {
            (BlockKind::Floating, nodes[1..].to_vec())
        };

        let m = solved.len();
        let mut matrix = DMatrix::zeros(m, m);
        for (r, &i) in solved.iter().enumerate() {
            matrix[(r, r)] = graph.neighbors(i).iter().map(|(_, w)| w).sum();
            for &(j, w) in graph.neighbors(i) {
                if let Ok(c) = solved.binary_search(&j) {
                    matrix[(r, c)] = -w;
                }
            }
        }
        let factor = if m == 0 {
            None
        } else {
            Some(nalgebra::Cholesky::new(matrix.clone()).ok_or_else(|| {
                Error::argument("reduced Laplacian is not positive definite")
            })?)
        };
        Ok(Block {
            nodes,
            kind,
            solved,
            matrix,
            factor,
        })
    }

    pub fn handle_nodes(&self) -> &[usize] {
        &self.handle_nodes
    }

    /// True when `handles` uses exactly this solver's handle node set.
    pub fn matches(&self, handles: &HandleSet) -> bool {
        handles.nodes() == self.handle_nodes
    }

    /// Global step. `reference` anchors components that no handle reaches.
    pub fn solve(
        &self,
        graph: &ControlGraph,
        rotations: &[Matrix3<f64>],
        handles: &HandleSet,
        reference: &[Vector3<f64>],
        warnings: &mut Vec<Warning>,
    ) -> Result<Vec<Vector3<f64>>> {
        let n = graph.node_count();
        check_dims(graph, reference.len(), rotations.len())?;
        if !self.matches(handles) {
            return Err(Error::argument("handle set differs from the factored handle nodes"));
        }

        let rhs = rotated_laplacian_rhs(graph, rotations);
        let mut positions = reference.to_vec();
        for &(node, target) in handles.entries() {
            positions[node] = target;
        }

        for block in &self.blocks {
            if let BlockKind::Floating = block.kind {
                warnings.push(Warning::SingularSystem {
                    component_size: block.nodes.len(),
                });
            }
            let Some(factor) = &block.factor else {
                continue;
            };
            let m = block.solved.len();
            let mut b = DMatrix::zeros(m, 3);
            for (r, &i) in block.solved.iter().enumerate() {
                let mut row = rhs[i];
                for &(j, w) in graph.neighbors(i) {
                    if self.is_handle[j] {
                        row += w * positions[j];
                    }
                }
                b.set_row(r, &row.transpose());
            }

            let mut x = factor.solve(&b);
            let b_norm = b.norm();
            for _ in 0..3 {
                let residual = &b - &block.matrix * &x;
                if residual.norm() <= self.tolerance * b_norm {
                    break;
                }
                x += factor.solve(&residual);
            }

            match block.kind {
                BlockKind::Constrained => {
                    for (r, &i) in block.solved.iter().enumerate() {
                        positions[i] = Vector3::new(x[(r, 0)], x[(r, 1)], x[(r, 2)]);
                    }
                }
                BlockKind::Floating => {
                    // Grounded node sits at the origin; shift to the reference centroid.
                    let k = block.nodes.len() as f64;
                    let mut solved_sum = Vector3::zeros();
                    for r in 0..m {
                        solved_sum += Vector3::new(x[(r, 0)], x[(r, 1)], x[(r, 2)]);
                    }
                    let ref_centroid: Vector3<f64> =
                        block.nodes.iter().map(|&i| reference[i]).sum::<Vector3<f64>>() / k;
                    let shift = ref_centroid - solved_sum / k;
                    positions[block.nodes[0]] = shift;
                    for (r, &i) in block.solved.iter().enumerate() {
                        positions[i] = Vector3::new(x[(r, 0)], x[(r, 1)], x[(r, 2)]) + shift;
                    }
                }
            }
        }
        debug_assert_eq!(positions.len(), n);
        Ok(positions)
    }
}

/// Global step with a fresh factorization; free nodes of components with no
/// handle are anchored at their rest centroid.
pub fn solve_positions(
    graph: &ControlGraph,
    rotations: &[Matrix3<f64>],
    handles: &HandleSet,
    tolerance: f64,
) -> Result<Vec<Vector3<f64>>> {
    handles.check_range(graph.node_count())?;
    let solver = PositionSolver::new(graph, &handles.nodes(), tolerance)?;
    let mut warnings = Vec::new();
    let positions = solver.solve(graph, rotations, handles, &graph.rest_positions, &mut warnings)?;
    for w in dedup(warnings) {
        log::warn!("{w}");
    }
    Ok(positions)
}

fn dedup(mut warnings: Vec<Warning>) -> Vec<Warning> {
    let mut out: Vec<Warning> = Vec::new();
    for w in warnings.drain(..) {
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// Rigid transform `(R, t)` best mapping handle rest positions to targets.
/// One handle gives a pure translation.
pub fn fit_handle_transform(graph: &ControlGraph, handles: &HandleSet) -> (Matrix3<f64>, Vector3<f64>) {
    let k = handles.len() as f64;
    if handles.is_empty() {
        return (Matrix3::identity(), Vector3::zeros());
    }
    let rest = &graph.rest_positions;
    let rest_c: Vector3<f64> = handles.entries().iter().map(|(n, _)| rest[*n]).sum::<Vector3<f64>>() / k;
    let target_c: Vector3<f64> = handles.entries().iter().map(|(_, t)| *t).sum::<Vector3<f64>>() / k;
    let mut s = Matrix3::zeros();
    for (n, t) in handles.entries() {
        s += (rest[*n] - rest_c) * (t - target_c).transpose();
    }
    let r = best_rotation(&s);
    (r, target_c - r * rest_c)
}

/// Cold-start solve. Positions start from the configured initialization
/// with handle overrides.
pub fn solve(graph: &ControlGraph, handles: &HandleSet, config: &SolverConfig) -> Result<DeformationState> {
    handles.check_range(graph.node_count())?;
    let solver = PositionSolver::new(graph, &handles.nodes(), config.linear_solver_tolerance)?;
    solve_with(graph, &solver, handles, config, None)
}

/// Alternating solve with a prepared factorization. `warm` supplies starting
/// positions and rotations; otherwise the rest pose and identity are used.
pub fn solve_with(
    graph: &ControlGraph,
    solver: &PositionSolver,
    handles: &HandleSet,
    config: &SolverConfig,
    warm: Option<&DeformationState>,
) -> Result<DeformationState> {
    config.validate()?;
    handles.check_range(graph.node_count())?;
    if handles.is_empty() {
        return Err(Error::Constraint(
            "at least one handle is required to pin the deformation".into(),
        ));
    }
    let n = graph.node_count();
    let (mut positions, mut rotations) = match warm {
        Some(state) => {
            check_dims(graph, state.positions.len(), state.rotations.len())?;
            (state.positions.clone(), state.rotations.clone())
        }
        None => match (config.rotation_mode, config.initialization) {
            (RotationMode::FullArap, Initialization::RigidFit) => {
                // Components without a handle stay at rest.
                let (r, t) = fit_handle_transform(graph, handles);
                let pinned = handles.nodes();
                let mut positions = graph.rest_positions.clone();
                let mut rotations = vec![Matrix3::identity(); n];
                for comp in graph.components() {
                    if comp.iter().any(|k| pinned.contains(k)) {
                        for k in comp {
                            positions[k] = r * graph.rest_positions[k] + t;
                            rotations[k] = r;
                        }
                    }
                }
                (positions, rotations)
            }
            _ => (graph.rest_positions.clone(), vec![Matrix3::identity(); n]),
        },
    };
    if config.rotation_mode == RotationMode::LaplacianOnly {
        rotations = vec![Matrix3::identity(); n];
    }
    for &(node, target) in handles.entries() {
        positions[node] = target;
    }

    let mut warnings = Vec::new();
    let mut trace = vec![energy_of(graph, &positions, &rotations)?];
    for _ in 0..config.iterations {
        positions = solver.solve(graph, &rotations, handles, &positions, &mut warnings)?;
        trace.push(energy_of(graph, &positions, &rotations)?);
        if config.rotation_mode == RotationMode::FullArap {
            rotations = fit_rotations(graph, &graph.rest_positions, &positions)?;
            trace.push(energy_of(graph, &positions, &rotations)?);
        }
    }
    let warnings = dedup(warnings);
    for w in &warnings {
        log::debug!("{w}");
    }
    Ok(DeformationState {
        energy: *trace.last().expect("trace starts non-empty"),
        positions,
        rotations,
        iterations_run: config.iterations,
        energy_trace: trace,
        warnings,
    })
}
