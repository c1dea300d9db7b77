//! Python bindings for the surfel transport engine.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use surfel_gi::adjoint::{finite_diff_check, LossSpec, DEFAULT_EPS_SCHEDULE};
use surfel_gi::optim::{run_optimization, OptimConfig, ParamSelection, Target};
use surfel_gi::params::{enumerate_params, parse_families};
use surfel_gi::render::{read_pfm, render_image, write_image, ImageFormat, LossKind, RenderPass};
use surfel_gi::scene::{parse_scene, read_scene, serialize_scene, write_scene};
use surfel_gi::solvers::{read_state, solve as solve_scene, state_from_json, state_to_json, write_state};
use surfel_gi::{fixtures, Error, SolverConfig, SolverKind};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn vec3(v: [f64; 3]) -> surfel_gi::Vec3 {
    surfel_gi::Vec3::new(v[0], v[1], v[2])
}

#[pyclass(name = "Scene", module = "surfel_gi", from_py_object)]
#[derive(Clone)]
pub struct PyScene {
    inner: surfel_gi::Scene,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        read_scene(path).map(|inner| PyScene { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        parse_scene(text).map(|inner| PyScene { inner }).map_err(to_py)
    }

    /// Bundled example scenes: two_kernel, direct_dominant, reflective_four, light_task.
    #[staticmethod]
    #[pyo3(signature = (name, degree = 2))]
    fn example(name: &str, degree: usize) -> PyResult<Self> {
        let inner = match name {
            "two_kernel" => fixtures::two_kernel(degree),
            "direct_dominant" => fixtures::direct_dominant(degree),
            "reflective_four" => fixtures::reflective_four(degree),
            "light_task" => fixtures::light_task(degree),
            other => return Err(PyValueError::new_err(format!("unknown example `{other}`"))),
        };
        Ok(PyScene { inner })
    }

    fn to_json(&self) -> String {
        serialize_scene(&self.inner)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        write_scene(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn sh_degree(&self) -> usize {
        self.inner.sh_degree
    }

    #[getter]
    fn kernel_count(&self) -> usize {
        self.inner.kernel_count()
    }

    #[getter]
    fn surfel_count(&self) -> usize {
        self.inner.surfels.len()
    }

    #[getter]
    fn light_count(&self) -> usize {
        self.inner.lights.len()
    }

    fn bounding_radius(&self) -> f64 {
        self.inner.bounding_radius()
    }

    fn light_position(&self, index: usize) -> PyResult<[f64; 3]> {
        let light = self
            .inner
            .lights
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no light {index}")))?;
        Ok(light.position.into())
    }

    fn set_light_position(&mut self, index: usize, position: [f64; 3]) -> PyResult<()> {
        let light = self
            .inner
            .lights
            .get_mut(index)
            .ok_or_else(|| PyValueError::new_err(format!("no light {index}")))?;
        light.position = vec3(position);
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene(degree={}, surfels={}, lights={})",
            self.inner.sh_degree,
            self.inner.surfels.len(),
            self.inner.lights.len()
        )
    }
}

#[pyclass(name = "SolveState", module = "surfel_gi", from_py_object)]
#[derive(Clone)]
pub struct PySolveState {
    inner: surfel_gi::SolveState,
}

#[pymethods]
impl PySolveState {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        read_state(path).map(|inner| PySolveState { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        state_from_json(text, "<string>").map(|inner| PySolveState { inner }).map_err(to_py)
    }

    fn to_json(&self) -> String {
        state_to_json(&self.inner)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        write_state(&self.inner, path).map_err(to_py)
    }

    /// Flattened RGB coefficients per kernel.
    #[getter]
    fn radiosity(&self) -> Vec<Vec<f64>> {
        self.inner.radiosity.iter().map(|b| b.as_slice().to_vec()).collect()
    }

    #[getter]
    fn residual(&self) -> f64 {
        self.inner.residual
    }

    #[getter]
    fn solver(&self) -> String {
        self.inner.solver.to_string()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

#[pyclass(name = "Camera", module = "surfel_gi", from_py_object)]
#[derive(Clone)]
pub struct PyCamera {
    inner: surfel_gi::render::Camera,
}

#[pymethods]
impl PyCamera {
    #[new]
    #[pyo3(signature = (position, target, up, fov_y, width, height))]
    fn new(position: [f64; 3], target: [f64; 3], up: [f64; 3], fov_y: f64, width: usize, height: usize) -> PyResult<Self> {
        surfel_gi::render::Camera::look_at(vec3(position), vec3(target), vec3(up), fov_y, width, height)
            .map(|inner| PyCamera { inner })
            .map_err(to_py)
    }

    /// Camera from the command-line form `"px,py,pz/lx,ly,lz/ux,uy,uz/fov"` and `"WxH"`.
    #[staticmethod]
    fn parse(spec: &str, size: &str) -> PyResult<Self> {
        surfel_gi::render::Camera::parse(spec, size)
            .map(|inner| PyCamera { inner })
            .map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }
}

#[pyclass(name = "Image", module = "surfel_gi", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: surfel_gi::render::ImageBuffer,
}

#[pymethods]
impl PyImage {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        read_pfm(path).map(|inner| PyImage { inner }).map_err(to_py)
    }

    /// Writes PFM or PPM, chosen by extension.
    fn save(&self, path: &str) -> PyResult<()> {
        let format = ImageFormat::from_path(std::path::Path::new(path)).map_err(to_py)?;
        write_image(&self.inner, path, format).map_err(to_py)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    /// Row-major RGB values from the top row.
    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    fn pixel(&self, x: usize, y: usize) -> PyResult<[f64; 3]> {
        if x >= self.inner.width || y >= self.inner.height {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) is outside the image")));
        }
        Ok(self.inner.pixel(x, y))
    }
}

fn solver_config(solver: &str, steps: Option<usize>, seed: u64) -> PyResult<SolverConfig> {
    let kind: SolverKind = solver.parse().map_err(to_py)?;
    let cfg = SolverConfig::new(kind).with_seed(seed);
    Ok(match steps {
        Some(t) => cfg.with_steps(t),
        None => cfg,
    })
}

#[pyfunction]
#[pyo3(signature = (scene, solver = "dense", steps = None, seed = 0))]
fn solve(py: Python<'_>, scene: &PyScene, solver: &str, steps: Option<usize>, seed: u64) -> PyResult<PySolveState> {
    let cfg = solver_config(solver, steps, seed)?;
    let scene = scene.inner.clone();
    py.detach(move || solve_scene(&scene, &cfg))
        .map(|inner| PySolveState { inner })
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (scene, state, camera, render_pass = "full"))]
fn render(py: Python<'_>, scene: &PyScene, state: &PySolveState, camera: &PyCamera, render_pass: &str) -> PyResult<PyImage> {
    let pass: RenderPass = render_pass.parse().map_err(to_py)?;
    py.detach(|| render_image(&scene.inner, &state.inner, &camera.inner, pass))
        .map(|inner| PyImage { inner })
        .map_err(to_py)
}

/// Finite-difference check of the analytic gradients under a seeded random
/// linear loss. Returns `(max relative error, table)`.
#[pyfunction]
#[pyo3(signature = (scene, params, seed = 0))]
fn gradcheck(py: Python<'_>, scene: &PyScene, params: &str, seed: u64) -> PyResult<(f64, String)> {
    let families = parse_families(params).map_err(to_py)?;
    let scene = &scene.inner;
    let ids = enumerate_params(scene, &families);
    let loss = LossSpec::random_linear(scene.kernel_count(), scene.sh_degree, seed);
    let report = py
        .detach(|| finite_diff_check(scene, &ids, &loss, &DEFAULT_EPS_SCHEDULE, 1e-9))
        .map_err(to_py)?;
    Ok((report.max_relative_error(), report.to_table()))
}

/// Image-space optimization of the selected parameter families.
/// Returns the optimized scene and the per-iteration loss.
#[pyfunction]
#[pyo3(signature = (scene, targets, learn, iterations = 500, lr = 5e-3, solver = "dense", steps = None, seed = 0, loss = "l1"))]
#[allow(clippy::too_many_arguments)]
fn optimize(
    py: Python<'_>,
    scene: &PyScene,
    targets: Vec<(PyCamera, PyImage)>,
    learn: &str,
    iterations: usize,
    lr: f64,
    solver: &str,
    steps: Option<usize>,
    seed: u64,
    loss: &str,
) -> PyResult<(PyScene, Vec<f64>)> {
    let selection = ParamSelection::new(parse_families(learn).map_err(to_py)?).map_err(to_py)?;
    let mut cfg = OptimConfig::new(iterations, lr);
    cfg.solver = solver_config(solver, steps, seed)?;
    cfg.loss = loss.parse::<LossKind>().map_err(to_py)?;
    let targets: Vec<Target> = targets
        .into_iter()
        .map(|(c, i)| Target {
            camera: c.inner,
            image: i.inner,
        })
        .collect();
    let result = py
        .detach(|| run_optimization(&scene.inner, &targets, &selection, &cfg))
        .map_err(to_py)?;
    let losses = result.trace.iter().map(|r| r.loss).collect();
    Ok((PyScene { inner: result.scene }, losses))
}

#[pymodule]
fn surfel_gi_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PySolveState>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyImage>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    Ok(())
}
