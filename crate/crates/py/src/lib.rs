//! Python bindings: clouds, control graphs, one-shot solves and editing sessions.

use std::path::PathBuf;

use morphkit_core::graph::{self, GraphExport};
use morphkit_core::render::Camera;
use morphkit_core::session::{Preview, Session as CoreSession, SessionConfig};
use morphkit_core::{
    arap, ControlGraph, Error, GaussianCloud, GraphConfig, HandleSet, RotationMode, SolverConfig,
};
use nalgebra::Vector3;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn vec3(p: [f64; 3]) -> Vector3<f64> {
    Vector3::new(p[0], p[1], p[2])
}

fn handle_set(handles: Vec<(usize, [f64; 3])>) -> PyResult<HandleSet> {
    HandleSet::new(handles.into_iter().map(|(k, p)| (k, vec3(p))).collect()).map_err(to_py)
}

fn rotation_mode(mode: &str) -> PyResult<RotationMode> {
    match mode {
        "arap" => Ok(RotationMode::FullArap),
        "laplacian" => Ok(RotationMode::LaplacianOnly),
        other => Err(PyValueError::new_err(format!("unknown mode `{other}` (expected arap or laplacian)"))),
    }
}

fn points(ps: &[Vector3<f64>]) -> Vec<[f64; 3]> {
    ps.iter().map(|p| [p.x, p.y, p.z]).collect()
}

#[pyclass(name = "Cloud", module = "morphkit")]
struct PyCloud {
    inner: GaussianCloud,
}

#[pymethods]
impl PyCloud {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: GaussianCloud::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn centers(&self) -> Vec<[f64; 3]> {
        points(&self.inner.centers())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Graph", module = "morphkit")]
struct PyGraph {
    inner: ControlGraph,
}

#[pymethods]
impl PyGraph {
    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn scene_diameter(&self) -> f64 {
        self.inner.scene_diameter
    }

    fn positions(&self) -> Vec<[f64; 3]> {
        points(&self.inner.rest_positions)
    }

    /// Deformable edges as `(i, j, weight)`.
    fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.inner.edges.iter().map(|e| (e.i, e.j, e.weight)).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&GraphExport::from(&self.inner)).map_err(|e| to_py(e.into()))
    }
}

/// Samples `node_count` control nodes from the cloud centers (clamped to the cloud size).
#[pyfunction]
#[pyo3(signature = (cloud, node_count = 512))]
fn build_graph(cloud: &PyCloud, node_count: usize) -> PyResult<PyGraph> {
    let config = GraphConfig {
        node_count: node_count.min(cloud.inner.len()),
        ..GraphConfig::default()
    };
    let inner = graph::build_control_graph(&cloud.inner.centers(), &config).map_err(to_py)?;
    Ok(PyGraph { inner })
}

/// Solves for node positions given `[(node, (x, y, z)), ...]`; returns `(positions, energy)`.
#[pyfunction]
#[pyo3(signature = (graph, handles, iterations = 3, mode = "arap"))]
fn solve(
    graph: &PyGraph,
    handles: Vec<(usize, [f64; 3])>,
    iterations: usize,
    mode: &str,
) -> PyResult<(Vec<[f64; 3]>, f64)> {
    let config = SolverConfig {
        iterations,
        rotation_mode: rotation_mode(mode)?,
        ..SolverConfig::default()
    };
    let state = arap::solve(&graph.inner, &handle_set(handles)?, &config).map_err(to_py)?;
    Ok((points(&state.positions), state.energy))
}

#[pyclass(name = "Session", module = "morphkit", unsendable)]
struct PySession {
    inner: CoreSession,
}

fn preview_dict<'py>(py: Python<'py>, preview: &Preview) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("session_revision", preview.session_revision)?;
    d.set_item("positions", preview.positions.clone())?;
    d.set_item("energy", preview.energy)?;
    d.set_item("solve_time_ms", preview.solve_time_ms)?;
    Ok(d)
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (path, node_count = 512, iterations = 3, mode = "arap", warm_start = false))]
    fn new(path: PathBuf, node_count: usize, iterations: usize, mode: &str, warm_start: bool) -> PyResult<Self> {
        let mut config = SessionConfig::default();
        config.graph.node_count = node_count;
        config.solver.iterations = iterations;
        config.solver.rotation_mode = rotation_mode(mode)?;
        config.warm_start = warm_start;
        Ok(Self {
            inner: CoreSession::open(path, config).map_err(to_py)?,
        })
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.graph().node_count()
    }

    fn node_positions(&self) -> Vec<[f64; 3]> {
        points(&self.inner.graph().rest_positions)
    }

    fn set_handles(&mut self, handles: Vec<(usize, [f64; 3])>) -> PyResult<()> {
        self.inner.set_handles(handle_set(handles)?).map_err(to_py)
    }

    fn drag<'py>(&mut self, py: Python<'py>, node: usize, target: [f64; 3]) -> PyResult<Bound<'py, PyDict>> {
        let preview = self.inner.handle_drag(node, vec3(target)).map_err(to_py)?;
        preview_dict(py, &preview)
    }

    /// Renders the deformed cloud; `camera` is the JSON camera description.
    fn render(&mut self, camera: &str, out: PathBuf) -> PyResult<PathBuf> {
        let camera = Camera::from_json(camera).map_err(to_py)?;
        self.inner.commit_and_render(&camera, out).map_err(to_py)
    }

    fn export(&mut self, out: PathBuf) -> PyResult<PathBuf> {
        self.inner.export(out).map_err(to_py)
    }

    fn reset(&mut self) {
        self.inner.reset();
    }
}

#[pymodule]
fn morphkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCloud>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(build_graph, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    Ok(())
}
