//! Python bindings: scenarios, simulation runs and the geometry, statics and
//! torque helpers.

use std::path::PathBuf;

use glovebox_core::cli::plot_context;
use glovebox_core::kinematics::{self, PlanarArm, Segment, NUM_LINKS};
use glovebox_core::report;
use glovebox_core::scenario::{self, ScenarioConfig};
use glovebox_core::simulate::{self, StepRecord};
use glovebox_core::statics::{self, AppliedWrench, RobotStaticsState, STANDARD_GRAVITY};
use glovebox_core::{torque, Error};
use nalgebra::{DMatrix, Vector2, Vector3};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::InvalidInput(_)
        | Error::Parse(_)
        | Error::Validation(_)
        | Error::DegenerateGrasp(_)
        | Error::Unreachable { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type Point2 = (f64, f64);
type Point3 = (f64, f64, f64);

fn v2(p: Point2) -> Vector2<f64> {
    Vector2::new(p.0, p.1)
}

fn v3(p: Point3) -> Vector3<f64> {
    Vector3::new(p.0, p.1, p.2)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("matrix rows must have equal length"));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn arm(base: Point2, link_lengths: [f64; NUM_LINKS], angles: [f64; NUM_LINKS], link_radius: f64) -> PyResult<PlanarArm> {
    PlanarArm::new(v2(base), link_lengths, link_radius, angles).map_err(py_err)
}

/// A validated scenario configuration.
#[pyclass(module = "glovebox", name = "Scenario", frozen)]
struct PyScenario {
    config: ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    /// The built-in scenario.
    #[staticmethod]
    fn default() -> Self {
        PyScenario {
            config: scenario::default_scenario(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let config = scenario::parse_scenario(text).map_err(py_err)?;
        Ok(PyScenario { config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let config = scenario::load_scenario(path).map_err(py_err)?;
        Ok(PyScenario { config })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.config.to_toml().map_err(py_err)
    }

    /// Copy with the waypoint count, iteration cap or tolerances replaced.
    #[pyo3(signature = (waypoints=None, max_iters=None, tol=None))]
    fn with_overrides(&self, waypoints: Option<usize>, max_iters: Option<usize>, tol: Option<f64>) -> PyResult<Self> {
        let mut config = self.config.clone();
        if let Some(n) = waypoints {
            config.task.waypoints = n;
        }
        if let Some(n) = max_iters {
            config.solver.max_iterations = n;
        }
        if let Some(t) = tol {
            config.solver.tol_kkt = t;
            config.solver.tol_con = t;
        }
        config.validate().map_err(py_err)?;
        Ok(PyScenario { config })
    }

    fn waypoints(&self) -> Vec<Point2> {
        self.config.waypoints().iter().map(|w| (w.x, w.y)).collect()
    }

    #[getter]
    fn weights(&self) -> (f64, f64, f64) {
        let w = &self.config.weights;
        (w.object, w.motion, w.slack)
    }

    #[getter]
    fn safe_radius(&self) -> f64 {
        self.config.balance.safe_radius
    }

    #[getter]
    fn object_radius(&self) -> f64 {
        self.config.balance.object_radius
    }

    /// Plans every waypoint and computes the step torques.
    fn run(&self) -> PyResult<PySimulation> {
        let prepared = self.config.prepare().map_err(py_err)?;
        let sim = simulate::simulate(&prepared).map_err(py_err)?;
        Ok(PySimulation {
            config: self.config.clone(),
            records: sim.records().into_iter().map(PyStepRecord::from).collect(),
            failure: sim.failure.as_ref().map(|e| e.to_string()),
            sim,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(waypoints={}, length={}, safe_radius={})",
            self.config.task.waypoints, self.config.task.length, self.config.balance.safe_radius
        )
    }
}

/// One row of the simulation trace.
#[pyclass(module = "glovebox", name = "StepRecord", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyStepRecord {
    step: usize,
    obj: Point2,
    wp: Point2,
    zmp: Point2,
    fzmp: Point2,
    gamma: Point2,
    beta: Point2,
    gap: Point2,
    fs_norm: f64,
    tau_norm: f64,
    iters: usize,
    cost: f64,
    slack: f64,
    dist: f64,
}

impl From<StepRecord> for PyStepRecord {
    fn from(r: StepRecord) -> Self {
        let t = |a: [f64; 2]| (a[0], a[1]);
        PyStepRecord {
            step: r.step,
            obj: t(r.obj),
            wp: t(r.wp),
            zmp: t(r.zmp),
            fzmp: t(r.fzmp),
            gamma: t(r.gamma),
            beta: t(r.beta),
            gap: t(r.gap),
            fs_norm: r.fs_norm,
            tau_norm: r.tau_norm,
            iters: r.iters,
            cost: r.cost,
            slack: r.slack,
            dist: r.dist,
        }
    }
}

#[pymethods]
impl PyStepRecord {
    fn __repr__(&self) -> String {
        format!(
            "StepRecord(step={}, obj=({:.4}, {:.4}), zmp=({:.4}, {:.4}), gamma=({:.3}, {:.3}))",
            self.step, self.obj.0, self.obj.1, self.zmp.0, self.zmp.1, self.gamma.0, self.gamma.1
        )
    }
}

/// Result of [`PyScenario::run`].
#[pyclass(module = "glovebox", name = "Simulation", frozen)]
struct PySimulation {
    config: ScenarioConfig,
    sim: simulate::Simulation,
    #[pyo3(get)]
    records: Vec<PyStepRecord>,
    /// Why planning stopped early, if it did.
    #[pyo3(get)]
    failure: Option<String>,
}

#[pymethods]
impl PySimulation {
    #[getter]
    fn converged(&self) -> bool {
        self.failure.is_none()
    }

    /// Joint torques per step, 8 values each.
    fn torques(&self) -> Vec<Vec<f64>> {
        self.sim.steps.iter().map(|s| s.torque.tau.iter().copied().collect()).collect()
    }

    /// Joint angles per step, 8 values each.
    fn joint_angles(&self) -> Vec<Vec<f64>> {
        self.sim.steps.iter().map(|s| s.plan.theta.iter().copied().collect()).collect()
    }

    fn csv(&self) -> PyResult<String> {
        report::csv_string(&self.sim.records()).map_err(py_err)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        report::emit_csv(&self.sim.records(), path).map_err(py_err)
    }

    /// Writes path.svg, zmp.svg and forces.svg into `dir`.
    fn write_plots(&self, dir: PathBuf) -> PyResult<()> {
        let ctx = plot_context(&self.config, &self.sim).map_err(py_err)?;
        report::emit_plots(&self.sim.records(), &ctx, dir).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.records.len()
    }
}

/// Joint origins of a planar arm, base first, end effector last.
#[pyfunction]
#[pyo3(signature = (base, link_lengths, joint_angles, link_radius=0.04))]
fn forward_kinematics(
    base: Point2,
    link_lengths: [f64; NUM_LINKS],
    joint_angles: [f64; NUM_LINKS],
    link_radius: f64,
) -> PyResult<Vec<Point2>> {
    let pose = kinematics::forward_kinematics(&arm(base, link_lengths, joint_angles, link_radius)?).map_err(py_err)?;
    Ok((0..=NUM_LINKS).map(|j| pose.joint_origin(j)).map(|p| (p.x, p.y)).collect())
}

/// 2x4 Jacobian of the point at fraction `t` along link `link`.
#[pyfunction]
#[pyo3(signature = (base, link_lengths, joint_angles, link, t, link_radius=0.04))]
fn point_jacobian(
    base: Point2,
    link_lengths: [f64; NUM_LINKS],
    joint_angles: [f64; NUM_LINKS],
    link: usize,
    t: f64,
    link_radius: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let a = arm(base, link_lengths, joint_angles, link_radius)?;
    let j = kinematics::point_jacobian(&a, link, t).map_err(py_err)?;
    Ok(j.row_iter().map(|r| r.iter().copied().collect()).collect())
}

/// `(gap, closest_point, normal_angle, param)` of a point against a capsule.
#[pyfunction]
fn signed_gap(point: Point2, a: Point2, b: Point2, radius: f64) -> PyResult<(f64, Point2, f64, f64)> {
    let g = kinematics::signed_gap(v2(point), &Segment::new(v2(a), v2(b)), radius).map_err(py_err)?;
    Ok((g.gap, (g.closest_point.x, g.closest_point.y), g.normal_angle, g.param))
}

/// ZMP of a robot under gravity plus `(position, force, moment)` wrenches.
/// Returns `(zmp, inside_safe_circle, inside_support_polygon)`.
#[pyfunction]
#[pyo3(signature = (mass, com, wrenches, sp_polygon, safe_radius, sp_center=(0.0, 0.0)))]
fn compute_zmp(
    mass: f64,
    com: Point3,
    wrenches: Vec<(Point3, Point3, Point3)>,
    sp_polygon: Vec<Point2>,
    safe_radius: f64,
    sp_center: Point2,
) -> PyResult<(Point2, bool, bool)> {
    let state = RobotStaticsState::new(
        mass,
        Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
        v3(com),
        v2(sp_center),
        sp_polygon.into_iter().map(v2).collect(),
        safe_radius,
    )
    .map_err(py_err)?;
    let externals: Vec<AppliedWrench> = wrenches
        .into_iter()
        .map(|(p, f, m)| AppliedWrench {
            position: v3(p),
            force: v3(f),
            moment: v3(m),
        })
        .collect();
    let z = statics::compute_zmp(&state, &externals).map_err(py_err)?;
    Ok(((z.zmp.x, z.zmp.y), z.inside_safe_circle, z.inside_sp))
}

#[pyfunction]
#[pyo3(signature = (m, tol=torque::PINV_TOLERANCE))]
fn pseudo_inverse(m: Vec<Vec<f64>>, tol: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&torque::pseudo_inverse(&matrix(m)?, tol).map_err(py_err)?))
}

/// `I - J^T (J^T)^+` for a stacked support Jacobian.
#[pyfunction]
fn nullspace_projector(js: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&torque::nullspace_projector(&matrix(js)?).map_err(py_err)?))
}

#[pymodule]
fn glovebox(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("CSV_HEADER", report::CSV_HEADER.join(","))?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PySimulation>()?;
    m.add_class::<PyStepRecord>()?;
    m.add_function(wrap_pyfunction!(forward_kinematics, m)?)?;
    m.add_function(wrap_pyfunction!(point_jacobian, m)?)?;
    m.add_function(wrap_pyfunction!(signed_gap, m)?)?;
    m.add_function(wrap_pyfunction!(compute_zmp, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(nullspace_projector, m)?)?;
    Ok(())
}
