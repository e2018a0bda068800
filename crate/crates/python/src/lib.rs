//! Python bindings for the plant, controller, harness, GA and stiffness
//! estimator.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lpvmpc::ga::{run_ga, GaConfig, SelectionMode, Sphere};
use lpvmpc::harness::{self, Adaptation, ClosedLoopFitness};
use lpvmpc::lpv::StiffnessPair;
use lpvmpc::mpc::{self, ReferencePoint, ReferenceWindow, NU, NX};
use lpvmpc::nn::{self, FeatureVector, ManeuverPlan, TrainConfig, DEFAULT_LAYERS};
use lpvmpc::vehicle::{self, ControlInput, PacejkaCoeffs};
use lpvmpc::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Json(_) | Error::Csv(_) | Error::DimensionMismatch(_) | Error::InfeasibleBounds(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pyclass(name = "VehicleParams", skip_from_py_object)]
#[derive(Clone)]
struct PyVehicleParams {
    inner: vehicle::VehicleParams,
}

#[pymethods]
impl PyVehicleParams {
    #[new]
    fn new() -> Self {
        Self { inner: vehicle::VehicleParams::default() }
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        let inner: vehicle::VehicleParams = serde_json::from_str(s).map_err(|e| to_py(e.into()))?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| to_py(e.into()))
    }

    #[getter]
    fn m(&self) -> f64 {
        self.inner.m
    }

    #[getter]
    fn lf(&self) -> f64 {
        self.inner.lf
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "VehicleState", get_all, set_all, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyVehicleState {
    vx: f64,
    vy: f64,
    omega: f64,
    ye: f64,
    theta_e: f64,
}

impl PyVehicleState {
    fn state(&self) -> vehicle::VehicleState {
        vehicle::VehicleState::new(self.vx, self.vy, self.omega, self.ye, self.theta_e)
    }

    fn wrap(s: vehicle::VehicleState) -> Self {
        Self { vx: s.vx, vy: s.vy, omega: s.omega, ye: s.ye, theta_e: s.theta_e }
    }
}

#[pymethods]
impl PyVehicleState {
    #[new]
    #[pyo3(signature = (vx, vy = 0.0, omega = 0.0, ye = 0.0, theta_e = 0.0))]
    fn new(vx: f64, vy: f64, omega: f64, ye: f64, theta_e: f64) -> Self {
        Self { vx, vy, omega, ye, theta_e }
    }

    fn as_list(&self) -> Vec<f64> {
        vec![self.vx, self.vy, self.omega, self.ye, self.theta_e]
    }

    fn __repr__(&self) -> String {
        format!(
            "VehicleState(vx={}, vy={}, omega={}, ye={}, theta_e={})",
            self.vx, self.vy, self.omega, self.ye, self.theta_e
        )
    }
}

/// Advances the nonlinear plant by `dt` with one RK4 step.
#[pyfunction]
#[pyo3(signature = (state, delta, ax, k, wind, dt, params = None))]
fn step_rk4(
    state: PyRef<'_, PyVehicleState>,
    delta: f64,
    ax: f64,
    k: f64,
    wind: f64,
    dt: f64,
    params: Option<PyRef<'_, PyVehicleParams>>,
) -> PyResult<PyVehicleState> {
    let p = params.map(|p| p.inner).unwrap_or_default();
    let c = PacejkaCoeffs::default_for(&p);
    let next = vehicle::step_rk4(&state.state(), &ControlInput::new(delta, ax), k, wind, &p, &c, dt).map_err(to_py)?;
    Ok(PyVehicleState::wrap(next))
}

/// Lateral tire force from the magic formula with the default coefficients.
#[pyfunction]
#[pyo3(signature = (alpha, front = true))]
fn pacejka_force(alpha: f64, front: bool) -> f64 {
    let p = vehicle::VehicleParams::default();
    let axle = if front { vehicle::Axle::Front } else { vehicle::Axle::Rear };
    vehicle::pacejka_force(alpha, &PacejkaCoeffs::default_for(&p), axle)
}

#[pyclass(name = "MpcConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyMpcConfig {
    inner: mpc::MpcConfig,
}

#[pymethods]
impl PyMpcConfig {
    #[new]
    fn new() -> Self {
        Self { inner: mpc::MpcConfig::default() }
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        let inner: mpc::MpcConfig = serde_json::from_str(s).map_err(|e| to_py(e.into()))?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| to_py(e.into()))
    }

    fn with_weights(&self, q_diag: [f64; NX], r_diag: [f64; NU]) -> Self {
        Self { inner: self.inner.with_weights(q_diag, r_diag) }
    }

    #[getter]
    fn np(&self) -> usize {
        self.inner.np
    }

    #[getter]
    fn ts(&self) -> f64 {
        self.inner.ts
    }
}

/// Solves one MPC problem and returns the first input with diagnostics.
///
/// `refs` holds `(v_ref, k)` for each of the `Np` prediction steps.
#[pyfunction]
#[pyo3(signature = (state, refs, u_prev, stiffness, config = None, params = None))]
fn mpc_step<'py>(
    py: Python<'py>,
    state: PyRef<'_, PyVehicleState>,
    refs: Vec<(f64, f64)>,
    u_prev: (f64, f64),
    stiffness: (f64, f64),
    config: Option<PyRef<'_, PyMpcConfig>>,
    params: Option<PyRef<'_, PyVehicleParams>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let p = params.map(|p| p.inner).unwrap_or_default();
    let window = ReferenceWindow { points: refs.into_iter().map(|(v_ref, k)| ReferencePoint { v_ref, k }).collect() };
    let sol = mpc::mpc_step(
        &state.state(),
        &StiffnessPair::clamped(stiffness.0, stiffness.1),
        &window,
        &ControlInput::new(u_prev.0, u_prev.1),
        None,
        &cfg,
        &p,
    )
    .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("delta", sol.u0.delta)?;
    d.set_item("ax", sol.u0.ax)?;
    d.set_item("slack", sol.slack)?;
    d.set_item("qp_iterations", sol.qp_iterations)?;
    d.set_item("solve_time", sol.solve_time)?;
    d.set_item("predicted", sol.predicted_states.iter().map(|s| s.to_vector().as_slice().to_vec()).collect::<Vec<_>>())?;
    Ok(d)
}

#[pyclass(name = "ExperimentConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyExperimentConfig {
    inner: harness::ExperimentConfig,
}

#[pymethods]
impl PyExperimentConfig {
    #[staticmethod]
    fn desk_track_v1() -> Self {
        Self { inner: harness::ExperimentConfig::desk_track_v1() }
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self { inner: harness::ExperimentConfig::from_json(s).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: harness::ExperimentConfig::load(&path).map_err(to_py)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    fn with_weights(&self, q_diag: [f64; NX], r_diag: [f64; NU]) -> Self {
        let mut inner = self.inner.clone();
        inner.mpc = inner.mpc.with_weights(q_diag, r_diag);
        Self { inner }
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration
    }

    #[setter]
    fn set_duration(&mut self, v: f64) {
        self.inner.duration = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn adaptation(&self) -> bool {
        self.inner.adaptation == Adaptation::On
    }

    #[setter]
    fn set_adaptation(&mut self, on: bool) {
        self.inner.adaptation = if on { Adaptation::On } else { Adaptation::Off };
    }

    #[getter]
    fn nominal_scale(&self) -> f64 {
        self.inner.nominal_scale
    }

    #[setter]
    fn set_nominal_scale(&mut self, v: f64) {
        self.inner.nominal_scale = v;
    }

    #[getter]
    fn record_solve_time(&self) -> bool {
        self.inner.record_solve_time
    }

    #[setter]
    fn set_record_solve_time(&mut self, v: bool) {
        self.inner.record_solve_time = v;
    }

    #[getter]
    fn n_records(&self) -> usize {
        self.inner.n_records()
    }
}

#[pyclass(name = "RunLog", skip_from_py_object)]
struct PyRunLog {
    inner: harness::RunLog,
}

#[pymethods]
impl PyRunLog {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: harness::RunLog::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn to_csv(&self) -> PyResult<String> {
        let bytes = self.inner.to_csv_bytes().map_err(to_py)?;
        String::from_utf8(bytes).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// One log column by header name.
    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        let pick: fn(&harness::LogRecord) -> f64 = match name {
            "t" => |r| r.t,
            "s" => |r| r.s,
            "vx" => |r| r.vx,
            "vy" => |r| r.vy,
            "omega" => |r| r.omega,
            "ye" => |r| r.ye,
            "theta_e" => |r| r.theta_e,
            "delta" => |r| r.delta,
            "ax" => |r| r.ax,
            "ddelta" => |r| r.ddelta,
            "dax" => |r| r.dax,
            "v_ref" => |r| r.v_ref,
            "k" => |r| r.k,
            "wind" => |r| r.wind,
            "cf_hat" => |r| r.cf_hat,
            "cr_hat" => |r| r.cr_hat,
            "qp_iters" => |r| r.qp_iters as f64,
            "solve_time" => |r| r.solve_time,
            "slack" => |r| r.slack,
            other => return Err(PyValueError::new_err(format!("unknown column {other}"))),
        };
        Ok(self.inner.records.iter().map(pick).collect())
    }

    /// Abort reason, or `None` for a completed run.
    #[getter]
    fn aborted(&self) -> Option<String> {
        self.inner.aborted.as_ref().map(|a| format!("{a:?}"))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "MlpModel", skip_from_py_object)]
#[derive(Clone)]
struct PyMlpModel {
    inner: nn::MlpModel,
}

#[pymethods]
impl PyMlpModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: nn::MlpModel::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// Clamped `(cf, cr)` estimate.
    fn predict(&self, vx: f64, vy: f64, delta: f64, ax: f64, omega: f64) -> (f64, f64) {
        let s = self.inner.predict(&FeatureVector { vx, vy, delta, ax, omega });
        (s.cf, s.cr)
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes.clone()
    }
}

#[pyclass(name = "StiffnessDataset", skip_from_py_object)]
struct PyStiffnessDataset {
    inner: nn::StiffnessDataset,
}

#[pymethods]
impl PyStiffnessDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: nn::StiffnessDataset::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.feature_rows()
    }

    fn targets(&self) -> Vec<Vec<f64>> {
        self.inner.target_rows()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Runs the closed loop. A trained model is required when adaptation is on
/// and the config has no loadable `model_path`.
#[pyfunction]
#[pyo3(signature = (config, model = None))]
fn run_closed_loop(
    py: Python<'_>,
    config: PyRef<'_, PyExperimentConfig>,
    model: Option<PyRef<'_, PyMlpModel>>,
) -> PyResult<PyRunLog> {
    let cfg = config.inner.clone();
    let est = model.map(|m| m.inner.clone());
    let log = py
        .detach(move || match est {
            Some(m) => harness::run_closed_loop_with(&cfg, Some(&m)),
            None => harness::run_closed_loop(&cfg),
        })
        .map_err(to_py)?;
    Ok(PyRunLog { inner: log })
}

/// Tracking and timing metrics of a run as a dict.
#[pyfunction]
fn compute_metrics<'py>(
    py: Python<'py>,
    log: PyRef<'_, PyRunLog>,
    config: PyRef<'_, PyExperimentConfig>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = harness::compute_metrics(&log.inner, &config.inner.mpc).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("rmse_ye", m.rmse_ye)?;
    d.set_item("rmse_theta_e", m.rmse_theta_e)?;
    d.set_item("rmse_vx", m.rmse_vx)?;
    d.set_item("max_abs_ye", m.max_abs_ye)?;
    d.set_item("max_abs_theta_e", m.max_abs_theta_e)?;
    d.set_item("max_abs_vx_err", m.max_abs_vx_err)?;
    d.set_item("mean_solve_time", m.mean_solve_time)?;
    d.set_item("max_solve_time", m.max_solve_time)?;
    d.set_item("constraint_violations", m.constraint_violations)?;
    Ok(d)
}

fn selection(name: &str) -> PyResult<SelectionMode> {
    SelectionMode::ALL
        .into_iter()
        .find(|m| m.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown selection {name}, expected hybrid, rws or ts")))
}

/// GA on the sphere function. Returns `(best_genes, best_fitness, history)`
/// with history rows `(gen, best, mean)`.
#[pyfunction]
#[pyo3(signature = (selection_mode = "hybrid", generations = 100, pop_size = 20, seed = 0, dim = 5))]
fn ga_sphere(
    selection_mode: &str,
    generations: usize,
    pop_size: usize,
    seed: u64,
    dim: usize,
) -> PyResult<(Vec<f64>, f64, Vec<(usize, f64, f64)>)> {
    let cfg = GaConfig { generations, pop_size, seed, selection: selection(selection_mode)?, ..GaConfig::default() };
    let res = run_ga(&Sphere { dim, ..Sphere::default() }, &cfg).map_err(to_py)?;
    let hist = res.history.iter().map(|h| (h.gen, h.best_fitness, h.mean_fitness)).collect();
    Ok((res.best.genes, res.best.fitness, hist))
}

/// Tunes the MPC weights with the GA on the given scenario. Returns
/// `(q_diag, r_diag, fitness)`.
#[pyfunction]
#[pyo3(signature = (config, model = None, generations = None, pop_size = None, seed = None))]
fn tune_weights(
    py: Python<'_>,
    config: PyRef<'_, PyExperimentConfig>,
    model: Option<PyRef<'_, PyMlpModel>>,
    generations: Option<usize>,
    pop_size: Option<usize>,
    seed: Option<u64>,
) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    let scenario = config.inner.clone();
    let mut ga = scenario.ga.clone();
    ga.generations = generations.unwrap_or(ga.generations);
    ga.pop_size = pop_size.unwrap_or(ga.pop_size);
    ga.seed = seed.unwrap_or(ga.seed);
    let est = match model {
        Some(m) => Some(m.inner.clone()),
        None if scenario.adaptation == Adaptation::On => scenario.load_estimator().map_err(to_py)?,
        None => None,
    };
    let res = py
        .detach(move || run_ga(&ClosedLoopFitness { scenario, estimator: est.as_ref() }, &ga))
        .map_err(to_py)?;
    Ok((res.best.genes[..NX].to_vec(), res.best.genes[NX..].to_vec(), res.best.fitness))
}

/// Simulates randomized maneuvers and labels them with secant stiffness.
#[pyfunction]
#[pyo3(signature = (n_points = 10752, seed = 0))]
fn generate_dataset(py: Python<'_>, n_points: usize, seed: u64) -> PyResult<PyStiffnessDataset> {
    let p = vehicle::VehicleParams::default();
    let c = PacejkaCoeffs::default_for(&p);
    let data = py
        .detach(move || nn::generate_dataset(&p, &c, &ManeuverPlan::default(), n_points, seed))
        .map_err(to_py)?;
    Ok(PyStiffnessDataset { inner: data })
}

/// Trains the default estimator network. Returns the model and a dict with
/// the loss curves and R² on both splits.
#[pyfunction]
#[pyo3(signature = (data, epochs = None, batch_size = None, learning_rate = None, seed = 0))]
fn train_mlp<'py>(
    py: Python<'py>,
    data: PyRef<'_, PyStiffnessDataset>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    seed: u64,
) -> PyResult<(PyMlpModel, Bound<'py, PyDict>)> {
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: epochs.unwrap_or(defaults.epochs),
        batch_size: batch_size.unwrap_or(defaults.batch_size),
        learning_rate: learning_rate.unwrap_or(defaults.learning_rate),
        seed,
        ..defaults
    };
    let dataset = data.inner.clone();
    let (model, hist, prep) = py
        .detach(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = nn::MlpModel::new(&DEFAULT_LAYERS, &mut rng)?;
            nn::train::train_with_split(init, &dataset, &cfg)
        })
        .map_err(to_py)?;
    let feats = data.inner.feature_rows();
    let targs = data.inner.target_rows();
    let r2 = |idx: &[usize]| {
        let preds: Vec<Vec<f64>> = idx.iter().map(|&i| model.predict_raw(&feats[i])).collect();
        let ys: Vec<Vec<f64>> = idx.iter().map(|&i| targs[i].clone()).collect();
        nn::r2_score(&preds, &ys).map_err(to_py)
    };
    let d = PyDict::new(py);
    d.set_item("r2_train", r2(&prep.train_idx)?)?;
    d.set_item("r2_validation", r2(&prep.val_idx)?)?;
    d.set_item("train_loss", hist.train)?;
    d.set_item("validation_loss", hist.validation)?;
    Ok((PyMlpModel { inner: model }, d))
}

/// Named scenario preset.
#[pyfunction]
#[pyo3(signature = (name = "desk_track_v1"))]
fn preset(name: &str) -> PyResult<PyExperimentConfig> {
    match name {
        "desk_track_v1" => Ok(PyExperimentConfig::desk_track_v1()),
        other => Err(PyValueError::new_err(format!("unknown preset {other}"))),
    }
}

#[pymodule(name = "lpvmpc")]
fn lpvmpc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVehicleParams>()?;
    m.add_class::<PyVehicleState>()?;
    m.add_class::<PyMpcConfig>()?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_class::<PyRunLog>()?;
    m.add_class::<PyMlpModel>()?;
    m.add_class::<PyStiffnessDataset>()?;
    m.add_function(wrap_pyfunction!(step_rk4, m)?)?;
    m.add_function(wrap_pyfunction!(pacejka_force, m)?)?;
    m.add_function(wrap_pyfunction!(mpc_step, m)?)?;
    m.add_function(wrap_pyfunction!(run_closed_loop, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(ga_sphere, m)?)?;
    m.add_function(wrap_pyfunction!(tune_weights, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_mlp, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    Ok(())
}
