//! Python bindings: configuration, in-process simulation, experiment entry
//! points, the bound evaluator and the wire framing.

use std::path::PathBuf;

use pefll_core::analysis::{pacbayes_terms, spearman_rank_corr, BoundConfig, BoundInputs, MetricsRow};
use pefll_core::data::DatasetFormat;
use pefll_core::experiment::{
    analyze_checkpoint, eval_checkpoint, evaluate, predict_cli, run, Algorithm, ExperimentConfig, ModelState,
    PredictRequest, Setup, KEYS,
};
use pefll_core::models::compute_descriptor;
use pefll_core::protocol::{
    predict, selection_rng, start_session, stream_rng, train_round, MessageKind, RoundConfig, SessionConfig,
    SessionKind, STREAM_PREDICT,
};
use pefll_core::baselines::fedavg_round;
use pefll_core::transport::{decode_frame, encode_frame, Frame, LoopbackLink, Meter};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(pefll, PefllError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    PefllError::new_err(e.to_string())
}

/// Flat `key = value` experiment configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: ExperimentConfig::parse(text).map_err(err)? })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).ok_or_else(|| err(format!("unknown key `{key}`")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Hex SHA-256 over the keys that affect results.
    fn digest(&self) -> String {
        self.inner.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    #[staticmethod]
    fn keys() -> Vec<(&'static str, &'static str)> {
        KEYS.to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Config(digest={})", &self.digest()[..12])
    }
}

/// A federation held in memory, trained over metered loopback links.
#[pyclass(name = "Simulation", unsendable)]
struct PySimulation {
    cfg: ExperimentConfig,
    setup: Setup,
    state: ModelState,
    links: Vec<LoopbackLink<f32>>,
    meter: Meter,
    round_cfg: RoundConfig,
}

#[pymethods]
impl PySimulation {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        cfg.validate().map_err(err)?;
        if cfg.run.algorithm == Algorithm::Local {
            return Err(err("Simulation supports the pefll and fedavg algorithms"));
        }
        let setup = Setup::new(&cfg).map_err(err)?;
        let state = ModelState::initialize(&cfg, &setup).map_err(err)?;
        let meter = Meter::new();
        let mut links: Vec<_> =
            setup.nodes(&cfg).map_err(err)?.into_iter().map(|n| LoopbackLink::new(n, meter.clone())).collect();
        let round_cfg = cfg.round_config();
        let kind = if cfg.run.algorithm == Algorithm::FedAvg { SessionKind::FedAvg } else { SessionKind::Pefll };
        start_session(&mut links, &SessionConfig::new(kind, cfg.run.seed, &round_cfg), 0).map_err(err)?;
        Ok(PySimulation { cfg, setup, state, links, meter, round_cfg })
    }

    /// Completed rounds.
    #[getter]
    fn round(&self) -> u32 {
        self.state.round()
    }

    #[getter]
    fn seen_ids(&self) -> Vec<u32> {
        self.setup.population.seen_ids.clone()
    }

    #[getter]
    fn unseen_ids(&self) -> Vec<u32> {
        self.setup.population.unseen_ids.clone()
    }

    /// Runs `rounds` training rounds and returns the selected clients of each.
    fn train(&mut self, rounds: u32) -> PyResult<Vec<Vec<u32>>> {
        let mut out = Vec::new();
        for _ in 0..rounds {
            let r = self.state.round();
            let mut rng = selection_rng(self.cfg.run.seed, r);
            let selected = match &mut self.state {
                ModelState::Pefll(s) => train_round(s, &mut self.links, &self.round_cfg, &mut rng).map_err(err)?,
                ModelState::FedAvg(g) => fedavg_round(g, &mut self.links, &self.round_cfg, &mut rng).map_err(err)?,
                ModelState::Local(_) => unreachable!("rejected at construction"),
            };
            out.push(selected.selected);
        }
        Ok(out)
    }

    /// Mean test accuracy over seen clients and over unseen clients.
    fn evaluate(&self) -> PyResult<(f64, Option<f64>)> {
        evaluate(&self.state, &self.cfg, &self.setup, self.state.round()).map_err(err)
    }

    /// Bytes sent (up, down) by clients since the last call, control frames excluded.
    fn take_bytes(&self) -> (u64, u64) {
        let (mut up, mut down) = (0u64, 0u64);
        for t in self.meter.by_round().values() {
            up += t.up as u64;
            down += t.down as u64;
        }
        self.meter.clear();
        (up, down)
    }

    /// Descriptor of a client's training data under the current embedding.
    fn descriptor(&self, client_id: u32) -> PyResult<Vec<f32>> {
        let ModelState::Pefll(s) = &self.state else { return Err(err("descriptors need the pefll algorithm")) };
        let c = self.setup.clients.get(client_id as usize).ok_or_else(|| err("no such client"))?;
        Ok(compute_descriptor(&c.train, &s.embed, &s.eta_v, s.embed_kind).map_err(err)?.0)
    }

    /// Model the server would hand this client now.
    #[pyo3(signature = (client_id, unlabeled = false))]
    fn personal_model(&self, client_id: u32, unlabeled: bool) -> PyResult<Vec<f32>> {
        let c = self.setup.clients.get(client_id as usize).ok_or_else(|| err("no such client"))?;
        match &self.state {
            ModelState::Pefll(s) => {
                let mut rng = stream_rng(self.cfg.run.seed, s.round_index, client_id, STREAM_PREDICT);
                Ok(predict(&c.train, s, self.cfg.eval.predict_batch, unlabeled, &mut rng).map_err(err)?.0)
            }
            ModelState::FedAvg(g) => Ok(g.theta.0.clone()),
            ModelState::Local(_) => unreachable!("rejected at construction"),
        }
    }

    /// `(η_h, η_v)` for pefll or `(θ, [])` for fedavg.
    fn parameters(&self) -> (Vec<f32>, Vec<f32>) {
        match &self.state {
            ModelState::Pefll(s) => (s.eta_h.0.clone(), s.eta_v.0.clone()),
            ModelState::FedAvg(g) => (g.theta.0.clone(), Vec::new()),
            ModelState::Local(_) => (Vec::new(), Vec::new()),
        }
    }
}

fn row_dict<'py>(py: Python<'py>, r: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", r.round)?;
    d.set_item("train_client_acc", r.train_client_acc)?;
    d.set_item("unseen_client_acc", r.unseen_client_acc)?;
    d.set_item("mean_grad_norm_sq", r.mean_grad_norm_sq)?;
    d.set_item("bytes_up", r.bytes_up)?;
    d.set_item("bytes_down", r.bytes_down)?;
    d.set_item("spearman", r.spearman)?;
    Ok(d)
}

/// Trains one configuration into `run.out`; returns the metrics rows.
#[pyfunction(name = "run")]
#[pyo3(signature = (config, resume = false))]
fn run_py<'py>(py: Python<'py>, config: &PyConfig, resume: bool) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let outcome = run(&config.inner, resume).map_err(err)?;
    outcome.rows.iter().map(|r| row_dict(py, r)).collect()
}

/// Writes the personalised model for a client data file; returns the
/// number of parameters.
#[pyfunction(name = "predict")]
#[pyo3(signature = (checkpoint, data, out, format = "csv", unlabeled = false, batch = 32, seed = 0))]
fn predict_py(
    checkpoint: PathBuf,
    data: PathBuf,
    out: PathBuf,
    format: &str,
    unlabeled: bool,
    batch: usize,
    seed: u64,
) -> PyResult<usize> {
    let format: DatasetFormat = format.parse().map_err(err)?;
    let res = predict_cli(&PredictRequest { checkpoint, data, format, unlabeled, out, batch, seed }).map_err(err)?;
    Ok(res.params)
}

#[pyfunction(name = "eval_checkpoint")]
#[pyo3(signature = (checkpoint, mask = None))]
fn eval_py(checkpoint: PathBuf, mask: Option<bool>) -> PyResult<(f64, Option<f64>)> {
    eval_checkpoint(&checkpoint, mask).map_err(err)
}

#[pyfunction(name = "analyze")]
#[pyo3(signature = (checkpoint, alpha = 1.0, delta = 0.05, samples = 8))]
fn analyze_py<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    alpha: f64,
    delta: f64,
    samples: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = BoundConfig { alpha_h: alpha, alpha_v: alpha, alpha_theta: alpha, delta, samples };
    let r = analyze_checkpoint(&checkpoint, &cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("round", r.round)?;
    d.set_item("spearman", r.spearman)?;
    d.set_item("grad_norm_sq", r.grad_norm_sq)?;
    d.set_item("bound_mean", r.bound.mean)?;
    d.set_item("bound_std", r.bound.std)?;
    Ok(d)
}

/// Bound terms `(empirical, meta, client)`; their sum is the bound.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn pacbayes_bound(
    alpha_h: f64,
    alpha_v: f64,
    alpha_theta: f64,
    delta: f64,
    n: usize,
    m: usize,
    eta_h_sq: f64,
    eta_v_sq: f64,
    theta_sq: Vec<f64>,
    empirical_loss: f64,
) -> PyResult<(f64, f64, f64)> {
    let t = pacbayes_terms(&BoundInputs {
        alpha_h,
        alpha_v,
        alpha_theta,
        delta,
        n,
        m,
        eta_h_sq,
        eta_v_sq,
        theta_sq,
        empirical_loss,
    })
    .map_err(err)?;
    Ok((t.empirical, t.meta, t.client))
}

/// Spearman rank correlation; `None` when either input is constant.
#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<Option<f64>> {
    spearman_rank_corr(&a, &b).map_err(err)
}

#[pyfunction(name = "encode_frame")]
fn encode_frame_py<'py>(
    py: Python<'py>,
    kind: u8,
    round: u32,
    client_id: u32,
    payload: Vec<u8>,
) -> PyResult<Bound<'py, PyBytes>> {
    let kind = MessageKind::from_code(kind).ok_or_else(|| err(format!("unknown message kind {kind}")))?;
    let bytes = encode_frame(&Frame { kind, round, client_id, payload }).map_err(err)?;
    Ok(PyBytes::new(py, &bytes))
}

/// Decodes one frame: `(kind, round, client_id, payload, consumed)`.
#[pyfunction(name = "decode_frame")]
fn decode_frame_py<'py>(py: Python<'py>, data: &[u8]) -> PyResult<(u8, u32, u32, Bound<'py, PyBytes>, usize)> {
    let (f, used) = decode_frame(data).map_err(err)?;
    Ok((f.kind.code(), f.round, f.client_id, PyBytes::new(py, &f.payload), used))
}

#[pymodule]
fn pefll(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PefllError", m.py().get_type::<PefllError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(run_py, m)?)?;
    m.add_function(wrap_pyfunction!(predict_py, m)?)?;
    m.add_function(wrap_pyfunction!(eval_py, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_py, m)?)?;
    m.add_function(wrap_pyfunction!(pacbayes_bound, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(encode_frame_py, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame_py, m)?)?;
    Ok(())
}
