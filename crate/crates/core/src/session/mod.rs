//! Editing session: one cloud, its control graph and binding, and the
//! evolving handle set and solved state.

pub mod protocol;
pub mod server;

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::arap::{self, DeformationState, HandleSet, PositionSolver, SolverConfig};
use crate::error::{Error, Result, Warning};
use crate::graph::{self, ControlGraph, GraphConfig};
use crate::render::{self, Background, Camera};
use crate::skinning::{self, BindingTable};
use crate::splat::GaussianCloud;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub graph: GraphConfig,
    pub solver: SolverConfig,
    /// Start each drag solve from the previous state instead of the rest pose.
    pub warm_start: bool,
    pub background: [f64; 3],
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            graph: GraphConfig::default(),
            solver: SolverConfig::default(),
            warm_start: false,
            background: [1.0, 1.0, 1.0],
        }
    }
}

/// Reply to a drag: deformed proxy positions only, never the dense cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub session_revision: u64,
    pub positions: Vec<[f64; 3]>,
    pub energy: f64,
    pub solve_time_ms: f64,
}

pub struct Session {
    config: SessionConfig,
    cloud: GaussianCloud,
    graph: ControlGraph,
    binding: BindingTable,
    handles: HandleSet,
    state: DeformationState,
    /// True when `state` reflects the current handles.
    solved: bool,
    factorization: Option<PositionSolver>,
    deformed: Option<GaussianCloud>,
    revision: u64,
    last_solve_ms: f64,
}

impl Session {
    /// Samples the control graph and binds the cloud. A node count above the
    /// cloud size is clamped to it.
    pub fn new(cloud: GaussianCloud, mut config: SessionConfig) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::argument("cloud is empty"));
        }
        config.solver.validate()?;
        if config.graph.node_count > cloud.len() {
            log::warn!(
                "requested {} control nodes, cloud has {} primitives; using {}",
                config.graph.node_count,
                cloud.len(),
                cloud.len()
            );
            config.graph.node_count = cloud.len();
        }
        let graph = graph::build_control_graph(&cloud.centers(), &config.graph)?;
        for w in &graph.warnings {
            log::warn!("{w}");
        }
        let binding = skinning::bind(&cloud, &graph)?;
        let state = DeformationState::identity(&graph);
        Ok(Self {
            config,
            cloud,
            graph,
            binding,
            handles: HandleSet::default(),
            state,
            solved: true,
            factorization: None,
            deformed: None,
            revision: 0,
            last_solve_ms: 0.0,
        })
    }

    pub fn open(path: impl AsRef<Path>, config: SessionConfig) -> Result<Self> {
        Self::new(GaussianCloud::load(path)?, config)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn cloud(&self) -> &GaussianCloud {
        &self.cloud
    }

    pub fn graph(&self) -> &ControlGraph {
        &self.graph
    }

    pub fn binding(&self) -> &BindingTable {
        &self.binding
    }

    pub fn handles(&self) -> &HandleSet {
        &self.handles
    }

    pub fn state(&self) -> &DeformationState {
        &self.state
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Continues the revision sequence of a session this one replaces.
    pub(crate) fn set_revision(&mut self, revision: u64) {
        self.revision = revision;
    }

    fn bump(&mut self) {
        self.revision += 1;
        self.solved = false;
        self.deformed = None;
    }

    fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.graph.node_count() {
            return Err(Error::Protocol(format!(
                "node {node} does not exist, graph has {} nodes",
                self.graph.node_count()
            )));
        }
        Ok(())
    }

    /// Replaces the handle set. An empty set returns the session to rest.
    pub fn set_handles(&mut self, handles: HandleSet) -> Result<()> {
        for (node, _) in handles.entries() {
            self.check_node(*node)?;
        }
        self.handles = handles;
        self.bump();
        Ok(())
    }

    /// Moves one handle target without solving. Unregistered nodes are
    /// registered first.
    pub fn set_target(&mut self, node: usize, target: Vector3<f64>) -> Result<()> {
        self.check_node(node)?;
        if !target.iter().all(|v| v.is_finite()) {
            return Err(Error::Protocol("drag target must be finite".into()));
        }
        self.handles.set(node, target);
        self.bump();
        Ok(())
    }

    /// Updates one handle target and re-solves the proxy.
    pub fn handle_drag(&mut self, node: usize, target: Vector3<f64>) -> Result<Preview> {
        self.set_target(node, target)?;
        self.solve_proxy()?;
        Ok(self.preview())
    }

    /// Solves the control graph for the current handles if needed.
    pub fn solve_proxy(&mut self) -> Result<&DeformationState> {
        if self.solved {
            return Ok(&self.state);
        }
        if self.handles.is_empty() {
            self.state = DeformationState::identity(&self.graph);
            self.solved = true;
            self.last_solve_ms = 0.0;
            return Ok(&self.state);
        }
        let start = Instant::now();
        let stale = self
            .factorization
            .as_ref()
            .is_none_or(|f| !f.matches(&self.handles));
        if stale {
            self.factorization = Some(PositionSolver::new(
                &self.graph,
                &self.handles.nodes(),
                self.config.solver.linear_solver_tolerance,
            )?);
        }
        let solver = self.factorization.as_ref().expect("factorization prepared");
        let warm = self.config.warm_start.then_some(&self.state);
        self.state = arap::solve_with(&self.graph, solver, &self.handles, &self.config.solver, warm)?;
        self.last_solve_ms = start.elapsed().as_secs_f64() * 1e3;
        self.solved = true;
        Ok(&self.state)
    }

    pub fn preview(&self) -> Preview {
        Preview {
            session_revision: self.revision,
            positions: self.state.positions.iter().map(|p| (*p).into()).collect(),
            energy: self.state.energy,
            solve_time_ms: self.last_solve_ms,
        }
    }

    /// Solves the proxy and propagates it to the dense cloud.
    pub fn deformed_cloud(&mut self) -> Result<(&GaussianCloud, Vec<Warning>)> {
        self.solve_proxy()?;
        let mut warnings = Vec::new();
        if self.deformed.is_none() {
            let (cloud, w) = skinning::deform_cloud(&self.cloud, &self.graph, &self.state, &self.binding)?;
            warnings = w;
            self.deformed = Some(cloud);
        }
        Ok((self.deformed.as_ref().expect("deformed cloud cached"), warnings))
    }

    /// Deforms the dense cloud, renders it and writes a PNG to `out`.
    pub fn commit_and_render(&mut self, camera: &Camera, out: impl AsRef<Path>) -> Result<PathBuf> {
        let background = Background::Color(self.config.background);
        let (cloud, _) = self.deformed_cloud()?;
        let image = render::render(cloud, camera, &background)?;
        let out = out.as_ref();
        render::write_png(&image, out)?;
        Ok(out.to_path_buf())
    }

    pub fn export(&mut self, out: impl AsRef<Path>) -> Result<PathBuf> {
        let (cloud, _) = self.deformed_cloud()?;
        cloud.save(out.as_ref())?;
        Ok(out.as_ref().to_path_buf())
    }

    /// Drops all handles and returns to the rest pose.
    pub fn reset(&mut self) {
        self.handles = HandleSet::default();
        self.factorization = None;
        self.bump();
        self.state = DeformationState::identity(&self.graph);
        self.solved = true;
    }
}
