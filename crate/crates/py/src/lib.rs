//! Python bindings: environment, policy, adversary, config, pipeline and
//! evaluation. Reports and manifests cross the boundary as JSON strings.

use std::path::PathBuf;

use covert_leader::adversary::{AdversaryParams, LeaderPredictor};
use covert_leader::config::RunConfig;
use covert_leader::env::{Action, Env as CoreEnv, EnvConfig, WorldState};
use covert_leader::evalkit::{evaluate as core_evaluate, PolicySource};
use covert_leader::numcore::{Checkpoint, Parameters};
use covert_leader::pipeline::run_all;
use covert_leader::policy::{act, ActMode, PolicyConfig, PolicyParams};
use covert_leader::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Argument(_) | Error::Dimension { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Flat `section.key = value` run configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::parse(text).map_err(py_err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv_string()
    }

    fn __repr__(&self) -> String {
        format!("Config(n_agents={}, horizon={})", self.inner.env.n_agents, self.inner.env.horizon)
    }
}

/// Snapshot of the world.
#[pyclass(name = "State", skip_from_py_object)]
#[derive(Clone)]
struct PyState {
    inner: WorldState,
}

#[pymethods]
impl PyState {
    #[getter]
    fn positions(&self) -> Vec<(f64, f64)> {
        self.inner.agents.iter().map(|a| (a.position[0], a.position[1])).collect()
    }

    #[getter]
    fn velocities(&self) -> Vec<(f64, f64)> {
        self.inner.agents.iter().map(|a| (a.velocity[0], a.velocity[1])).collect()
    }

    #[getter]
    fn goal(&self) -> (f64, f64) {
        (self.inner.goal[0], self.inner.goal[1])
    }

    #[getter]
    fn leader(&self) -> usize {
        self.inner.leader
    }

    #[getter]
    fn t(&self) -> usize {
        self.inner.t
    }

    fn leader_distance(&self) -> f64 {
        self.inner.leader_distance()
    }
}

#[pyclass(name = "Env")]
struct PyEnv {
    inner: CoreEnv,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<PyConfig>) -> PyResult<Self> {
        let cfg = config.map_or_else(EnvConfig::default, |c| c.inner.env);
        Ok(Self {
            inner: CoreEnv::new(cfg).map_err(py_err)?,
        })
    }

    #[pyo3(signature = (seed, n = None))]
    fn reset(&self, seed: u64, n: Option<usize>) -> PyResult<PyState> {
        let n = n.unwrap_or(self.inner.config.n_agents);
        Ok(PyState {
            inner: self.inner.reset(seed, n).map_err(py_err)?,
        })
    }

    /// Applies one action index (0..5) per agent; returns (state, rewards).
    fn step(&self, state: &PyState, actions: Vec<usize>) -> PyResult<(PyState, Vec<f64>)> {
        let actions: Vec<Action> = actions.into_iter().map(Action::from_index).collect::<Result<_, _>>().map_err(py_err)?;
        let (next, r) = self.inner.step(&state.inner, &actions).map_err(py_err)?;
        Ok((PyState { inner: next }, r.0))
    }

    fn done(&self, state: &PyState) -> bool {
        self.inner.episode_done(&state.inner)
    }
}

/// Size-independent team policy.
#[pyclass(name = "Policy", skip_from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn init(seed: u64) -> Self {
        Self {
            inner: PolicyParams::init(&mut ChaCha8Rng::seed_from_u64(seed), &PolicyConfig::default()),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self {
            inner: PolicyParams::from_checkpoint(&ck).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint(serde_json::Value::Null).save(&path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Action indices for every agent.
    #[pyo3(signature = (state, seed = 0, greedy = true))]
    fn act(&self, state: &PyState, seed: u64, greedy: bool) -> PyResult<Vec<usize>> {
        let mode = if greedy { ActMode::Greedy } else { ActMode::Sample };
        let out = act(&self.inner, &state.inner, &mut ChaCha8Rng::seed_from_u64(seed), mode).map_err(py_err)?;
        Ok(out.actions.iter().map(|a| a.index()).collect())
    }
}

/// Shared-weight LSTM that scores each agent as the likely leader.
#[pyclass(name = "Adversary", skip_from_py_object)]
#[derive(Clone)]
struct PyAdversary {
    inner: AdversaryParams,
}

#[pymethods]
impl PyAdversary {
    #[staticmethod]
    #[pyo3(signature = (seed, hidden = 14))]
    fn init(seed: u64, hidden: usize) -> Self {
        Self {
            inner: AdversaryParams::init(&mut ChaCha8Rng::seed_from_u64(seed), hidden, true),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self {
            inner: AdversaryParams::from_checkpoint(&ck).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint(serde_json::Value::Null).save(&path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Per-step leader probabilities for frames of `(x, y)` positions.
    fn predict(&self, frames: Vec<Vec<(f64, f64)>>) -> PyResult<Vec<Vec<f64>>> {
        let frames: Vec<Vec<[f64; 2]>> = frames.into_iter().map(|f| f.into_iter().map(|(x, y)| [x, y]).collect()).collect();
        self.inner.predict(&frames).map_err(py_err)
    }
}

/// Runs every incomplete pipeline stage in `run_dir`; returns the manifest as JSON.
#[pyfunction]
fn run_pipeline(py: Python<'_>, run_dir: PathBuf, config: PyConfig, seed: u64) -> PyResult<String> {
    let manifest = py.detach(|| run_all(&run_dir, &config.inner, seed)).map_err(py_err)?;
    serde_json::to_string(&manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Evaluates a policy, or the scripted baseline when `policy` is None; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config, policy = None, adversary = None, n = None, episodes = 20, seed = 0))]
fn evaluate(
    py: Python<'_>,
    config: PyConfig,
    policy: Option<PyRef<'_, PyPolicy>>,
    adversary: Option<PyRef<'_, PyAdversary>>,
    n: Option<usize>,
    episodes: usize,
    seed: u64,
) -> PyResult<String> {
    let cfg = config.inner;
    let source = match policy {
        Some(p) => PolicySource::Learned(p.inner.clone()),
        None => PolicySource::Scripted(cfg.baseline.clone()),
    };
    let adv = adversary.map(|a| a.inner.clone());
    let n = n.unwrap_or(cfg.env.n_agents);
    let report = py
        .detach(|| core_evaluate(&source, adv.as_ref(), &cfg.env, n, episodes, cfg.eval.goal_radius, seed))
        .map_err(py_err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "covert_leader")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyState>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyAdversary>()?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
