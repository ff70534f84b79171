use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Algorithm, Checkpoint, DataSource, ExperimentConfig, ExperimentError, SplitKind, TransportKind};
use crate::analysis::{
    descriptor_correlation_run, eval_accuracy, grad_norm_sq, metrics_csv, pacbayes_bound_mc, parse_metrics_csv,
    BoundConfig, BoundEstimate, MetricsRow, Regularization,
};
use crate::baselines::{fedavg_round, local_train, GlobalModelState};
use crate::data::{
    dirichlet_split, extrapolation_population, fixed_classes_split, load_dataset, synth_dataset, Dataset, DatasetFormat,
    Population, SynthConfig,
};
use crate::models::{
    build_client_model_for, build_embedding_net_for, build_hypernetwork, EmbeddingKind, ExampleBatch, HyperConfig,
    ImageGeometry,
};
use crate::nn::{encode_fragment, GradVector, NetworkSpec, ParamVector};
use crate::protocol::{
    predict, selection_rng, start_session, stop_session, stream_rng, train_round, ClientLink, ClientNode, LocalSgd,
    ProtocolError, ServerState, SessionConfig, SessionKind, STREAM_LOCAL, STREAM_PREDICT,
};
use crate::transport::{connect_client, run_client, run_server, LoopbackLink, Meter, TcpServer};

const STREAM_DATA: u64 = 11;
const STREAM_SPLIT: u64 = 12;
const STREAM_INIT: u64 = 13;
const STREAM_BOUND: u64 = 14;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";

fn setup_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    stream_rng(seed, 0, u32::MAX, stream)
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    let d = &cfg.data;
    Ok(match &d.source {
        DataSource::Synthetic => {
            let synth = SynthConfig {
                classes: d.classes,
                per_class: d.per_class,
                image_size: d.image_size,
                channels: d.channels,
                noise_std: d.noise,
                jitter: d.jitter,
                ..SynthConfig::default()
            };
            synth_dataset(&synth, &mut setup_rng(d.seed, STREAM_DATA))?
        }
        DataSource::File(path) => load_dataset(path, d.format)?,
    })
}

pub fn build_population(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Population, ExperimentError> {
    let d = &cfg.data;
    let mut rng = setup_rng(d.seed, STREAM_SPLIT);
    Ok(match d.split {
        SplitKind::Classes => fixed_classes_split(dataset, d.clients, d.classes_per_client, &mut rng)?,
        SplitKind::Dirichlet => dirichlet_split(dataset, d.clients, d.alpha, &mut rng)?,
        SplitKind::Extrapolation => extrapolation_population(dataset, d.clients, d.alpha, d.alpha_new, &mut rng)?,
    })
}

/// Client model, embedding network and hypernetwork for a configuration.
pub fn build_networks(
    cfg: &ExperimentConfig,
    classes: usize,
    geometry: ImageGeometry,
) -> Result<(NetworkSpec, NetworkSpec, NetworkSpec), ExperimentError> {
    let client = build_client_model_for(classes, geometry)?;
    let dim = cfg.descriptor_dim();
    let embed = build_embedding_net_for(cfg.model.embedding, classes, dim, geometry)?;
    let hyper = build_hypernetwork(&HyperConfig {
        hidden_width: cfg.model.hidden_width,
        ..HyperConfig::new(cfg.model.hyper, dim, client.param_count())
    })?;
    Ok((client, embed, hyper))
}

/// One client's data, ready for evaluation.
pub struct ClientData {
    pub id: u32,
    pub train: ExampleBatch<f32>,
    pub test: ExampleBatch<f32>,
    pub label_set: Vec<usize>,
}

/// Everything derived deterministically from a configuration before
/// training starts.
pub struct Setup {
    pub dataset: Dataset,
    pub population: Population,
    pub client_model: NetworkSpec,
    pub embed: NetworkSpec,
    pub hyper: NetworkSpec,
    pub clients: Vec<ClientData>,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        let dataset = build_dataset(cfg)?;
        let population = build_population(cfg, &dataset)?;
        let (client_model, embed, hyper) = build_networks(cfg, dataset.classes(), dataset.geometry())?;
        let clients = population
            .clients
            .iter()
            .map(|c| ClientData {
                id: c.client_id,
                train: dataset.batch(&c.train, true),
                test: dataset.batch(&c.test, true),
                label_set: c.label_set(&dataset),
            })
            .collect();
        Ok(Setup { dataset, population, client_model, embed, hyper, clients })
    }

    pub fn seen(&self) -> impl Iterator<Item = &ClientData> {
        self.population.seen_ids.iter().map(|&id| &self.clients[id as usize])
    }

    pub fn unseen(&self) -> impl Iterator<Item = &ClientData> {
        self.population.unseen_ids.iter().map(|&id| &self.clients[id as usize])
    }

    pub fn seen_train(&self) -> Vec<ExampleBatch<f32>> {
        self.seen().filter(|c| !c.train.is_empty()).map(|c| c.train.clone()).collect()
    }

    pub fn nodes(&self, cfg: &ExperimentConfig) -> Result<Vec<ClientNode<f32>>, ExperimentError> {
        self.seen()
            .map(|c| {
                Ok(ClientNode::new(c.id, c.train.clone(), &self.client_model, self.embed.clone(), cfg.model.embedding)?)
            })
            .collect()
    }
}

/// Trained parameters of whichever algorithm is running.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelState {
    Pefll(ServerState<f32>),
    FedAvg(GlobalModelState<f32>),
    /// One locally trained model per client, indexed by client id.
    Local(Vec<ParamVector<f32>>),
}

impl ModelState {
    pub fn initialize(cfg: &ExperimentConfig, setup: &Setup) -> Result<Self, ExperimentError> {
        let mut rng = setup_rng(cfg.run.seed, STREAM_INIT);
        Ok(match cfg.run.algorithm {
            Algorithm::Pefll => ModelState::Pefll(ServerState::initialize(
                setup.hyper.clone(),
                setup.embed.clone(),
                cfg.model.embedding,
                &setup.client_model,
                &mut rng,
            )?),
            Algorithm::FedAvg => ModelState::FedAvg(GlobalModelState::initialize(&setup.client_model, &mut rng)),
            Algorithm::Local => ModelState::Local(Vec::new()),
        })
    }

    pub fn round(&self) -> u32 {
        match self {
            ModelState::Pefll(s) => s.round_index,
            ModelState::FedAvg(g) => g.round_index,
            ModelState::Local(_) => 0,
        }
    }

    fn from_checkpoint(ck: &Checkpoint, cfg: &ExperimentConfig, setup_nets: (&NetworkSpec, &NetworkSpec)) -> Result<Self, ExperimentError> {
        let (hyper, embed) = setup_nets;
        Ok(match ck.algorithm {
            Algorithm::Pefll => {
                let mut s = ServerState::new(
                    hyper.clone(),
                    embed.clone(),
                    cfg.model.embedding,
                    ParamVector(ck.eta_h.clone()),
                    ParamVector(ck.eta_v.clone()),
                )?;
                s.set_velocity(GradVector(ck.velocity_h.clone()), GradVector(ck.velocity_v.clone()))?;
                s.round_index = ck.round;
                ModelState::Pefll(s)
            }
            Algorithm::FedAvg => ModelState::FedAvg(GlobalModelState { theta: ParamVector(ck.theta.clone()), round_index: ck.round }),
            Algorithm::Local => return Err(ExperimentError::Checkpoint("local runs are not resumable".into())),
        })
    }
}

/// Model a client receives at evaluation time.
fn client_model_for(
    state: &ModelState,
    cfg: &ExperimentConfig,
    client: &ClientData,
    round: u32,
) -> Result<Option<ParamVector<f32>>, ExperimentError> {
    Ok(match state {
        ModelState::Pefll(s) => {
            if client.train.is_empty() {
                return Ok(None);
            }
            let mut rng = stream_rng(cfg.run.seed, round, client.id, STREAM_PREDICT);
            Some(predict(&client.train, s, cfg.eval.predict_batch, cfg.train.unlabeled, &mut rng)?)
        }
        ModelState::FedAvg(g) => Some(g.theta.clone()),
        ModelState::Local(models) => models.get(client.id as usize).cloned(),
    })
}

fn mean_accuracy<'a>(
    state: &ModelState,
    cfg: &ExperimentConfig,
    setup: &Setup,
    clients: impl Iterator<Item = &'a ClientData>,
    round: u32,
) -> Result<Option<f64>, ExperimentError> {
    let (mut sum, mut count) = (0.0, 0usize);
    for c in clients {
        if c.test.is_empty() {
            continue;
        }
        let Some(theta) = client_model_for(state, cfg, c, round)? else { continue };
        let mask = cfg.eval.mask.then_some(c.label_set.as_slice());
        sum += eval_accuracy(&theta, &setup.client_model, &c.test, mask)?;
        count += 1;
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Mean test accuracy over seen and over unseen clients.
pub fn evaluate(
    state: &ModelState,
    cfg: &ExperimentConfig,
    setup: &Setup,
    round: u32,
) -> Result<(f64, Option<f64>), ExperimentError> {
    let seen = mean_accuracy(state, cfg, setup, setup.seen(), round)?.unwrap_or(0.0);
    let unseen = mean_accuracy(state, cfg, setup, setup.unseen(), round)?;
    Ok((seen, unseen))
}

fn regularization(cfg: &ExperimentConfig) -> Regularization {
    Regularization { lambda_h: cfg.train.lambda_h, lambda_v: cfg.train.lambda_v, lambda_theta: cfg.train.lambda_theta }
}

struct Tracker {
    grad_sum: f64,
    grad_count: u32,
}

fn metrics_row(
    state: &ModelState,
    cfg: &ExperimentConfig,
    setup: &Setup,
    tracker: &mut Tracker,
    meter: &Meter,
) -> Result<MetricsRow, ExperimentError> {
    let round = state.round();
    let (train_acc, unseen_acc) = evaluate(state, cfg, setup, round)?;
    let mut row = MetricsRow { round, train_client_acc: train_acc, unseen_client_acc: unseen_acc, ..Default::default() };
    if let ModelState::Pefll(s) = state {
        if cfg.eval.grad_norm {
            tracker.grad_sum += grad_norm_sq(s, &setup.seen_train(), &setup.client_model, &regularization(cfg))?;
            tracker.grad_count += 1;
            row.mean_grad_norm_sq = Some(tracker.grad_sum / tracker.grad_count as f64);
        }
        if cfg.eval.spearman {
            row.spearman = Some(descriptor_correlation_run(&setup.dataset, &setup.population, s)?);
        }
    }
    for (_, t) in meter.by_round() {
        row.bytes_up += t.up as u64;
        row.bytes_down += t.down as u64;
    }
    meter.clear();
    Ok(row)
}

fn checkpoint_of(state: &ModelState, cfg: &ExperimentConfig, setup: &Setup, tracker: &Tracker) -> Checkpoint {
    let (eta_h, eta_v, vh, vv, theta) = match state {
        ModelState::Pefll(s) => {
            let (vh, vv) = s.velocity();
            (s.eta_h.0.clone(), s.eta_v.0.clone(), vh.0.clone(), vv.0.clone(), Vec::new())
        }
        ModelState::FedAvg(g) => (Vec::new(), Vec::new(), Vec::new(), Vec::new(), g.theta.0.clone()),
        ModelState::Local(_) => Default::default(),
    };
    Checkpoint {
        digest: cfg.digest(),
        algorithm: cfg.run.algorithm,
        round: state.round(),
        seed: cfg.run.seed,
        classes: setup.dataset.classes(),
        geometry: setup.dataset.geometry(),
        config_text: cfg.to_text(),
        normalization: setup.dataset.normalization().clone(),
        eta_h,
        eta_v,
        velocity_h: vh,
        velocity_v: vv,
        theta,
        grad_norm_sum: tracker.grad_sum,
        grad_norm_count: tracker.grad_count,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub rows: Vec<MetricsRow>,
    pub state: ModelState,
    pub checkpoint: Checkpoint,
}

struct Output<'a> {
    dir: &'a Path,
    rows: Vec<MetricsRow>,
}

impl Output<'_> {
    fn push(&mut self, row: MetricsRow, ck: &Checkpoint) -> Result<(), ExperimentError> {
        self.rows.push(row);
        let path = self.dir.join(METRICS_FILE);
        fs::write(&path, metrics_csv(&self.rows)).map_err(|e| ExperimentError::io(&path, e))?;
        ck.save(&self.dir.join(CHECKPOINT_FILE))
    }
}

fn session_kind(a: Algorithm) -> SessionKind {
    if a == Algorithm::FedAvg { SessionKind::FedAvg } else { SessionKind::Pefll }
}

/// Runs rounds `state.round()..cfg.run.rounds` over `links`.
fn drive<L: ClientLink<f32>>(
    links: &mut [L],
    state: &mut ModelState,
    cfg: &ExperimentConfig,
    setup: &Setup,
    tracker: &mut Tracker,
    meter: &Meter,
    out: &mut Output<'_>,
) -> Result<(), ExperimentError> {
    let rc = cfg.round_config();
    let start = state.round();
    start_session(links, &SessionConfig::new(session_kind(cfg.run.algorithm), cfg.run.seed, &rc), start)?;
    for r in start..cfg.run.rounds {
        let mut rng = selection_rng(cfg.run.seed, r);
        match state {
            ModelState::Pefll(s) => {
                train_round(s, links, &rc, &mut rng)?;
            }
            ModelState::FedAvg(g) => {
                fedavg_round(g, links, &rc, &mut rng)?;
            }
            ModelState::Local(_) => unreachable!("local runs have no rounds"),
        }
        let done = r + 1;
        if done % cfg.run.eval_every == 0 || done == cfg.run.rounds {
            let row = metrics_row(state, cfg, setup, tracker, meter)?;
            out.push(row, &checkpoint_of(state, cfg, setup, tracker))?;
        }
    }
    stop_session(links, cfg.run.rounds)?;
    Ok(())
}

fn run_local(cfg: &ExperimentConfig, setup: &Setup, out: &mut Output<'_>) -> Result<ModelState, ExperimentError> {
    let sgd = LocalSgd {
        steps: 0,
        batch: cfg.train.local_batch,
        lr: cfg.train.beta,
        momentum: cfg.train.client_momentum,
        lambda_theta: cfg.train.lambda_theta,
    };
    let mut models = Vec::with_capacity(setup.clients.len());
    for c in &setup.clients {
        let mut rng = stream_rng(cfg.run.seed, 0, c.id, STREAM_LOCAL);
        models.push(if c.train.is_empty() {
            crate::nn::init_params(&setup.client_model, &mut rng)
        } else {
            local_train(&c.train, &setup.client_model, cfg.train.local_epochs, &sgd, &mut rng)?
        });
    }
    let state = ModelState::Local(models);
    let mut tracker = Tracker { grad_sum: 0.0, grad_count: 0 };
    let row = metrics_row(&state, cfg, setup, &mut tracker, &Meter::new())?;
    out.push(row, &checkpoint_of(&state, cfg, setup, &tracker))?;
    Ok(state)
}

/// Trains and evaluates one configuration, writing `config.txt`,
/// `metrics.csv` and `checkpoint.bin` into `cfg.run.out`. With `resume`, an
/// existing checkpoint there is continued and the metrics rows it covers are
/// kept.
pub fn run(cfg: &ExperimentConfig, resume: bool) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    let dir = cfg.run.out.clone();
    fs::create_dir_all(&dir).map_err(|e| ExperimentError::io(&dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| ExperimentError::io(&cfg_path, e))?;
    let setup = Setup::new(cfg)?;
    let mut out = Output { dir: &dir, rows: Vec::new() };

    if cfg.run.algorithm == Algorithm::Local {
        let state = run_local(cfg, &setup, &mut out)?;
        let checkpoint = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        return Ok(RunOutcome { rows: out.rows, state, checkpoint });
    }

    let mut tracker = Tracker { grad_sum: 0.0, grad_count: 0 };
    let ck_path = dir.join(CHECKPOINT_FILE);
    let mut state = if resume && ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        ck.check_matches(cfg)?;
        tracker = Tracker { grad_sum: ck.grad_norm_sum, grad_count: ck.grad_norm_count };
        let metrics_path = dir.join(METRICS_FILE);
        let text = fs::read_to_string(&metrics_path).map_err(|e| ExperimentError::io(&metrics_path, e))?;
        out.rows = parse_metrics_csv(&text)?.into_iter().filter(|r| r.round <= ck.round).collect();
        ModelState::from_checkpoint(&ck, cfg, (&setup.hyper, &setup.embed))?
    } else {
        let state = ModelState::initialize(cfg, &setup)?;
        let row = metrics_row(&state, cfg, &setup, &mut tracker, &Meter::new())?;
        out.push(row, &checkpoint_of(&state, cfg, &setup, &tracker))?;
        state
    };

    if state.round() < cfg.run.rounds {
        let meter = Meter::new();
        let nodes = setup.nodes(cfg)?;
        match cfg.run.transport {
            TransportKind::Loopback => {
                let mut links: Vec<_> = nodes.into_iter().map(|n| LoopbackLink::new(n, meter.clone())).collect();
                drive(&mut links, &mut state, cfg, &setup, &mut tracker, &meter, &mut out)?;
            }
            TransportKind::Tcp => {
                let server = TcpServer::bind(&cfg.run.bind)?;
                let addr = server.local_addr()?;
                let count = nodes.len();
                let handles: Vec<_> = nodes
                    .into_iter()
                    .map(|node| thread::spawn(move || run_client(connect_client(addr, 200)?, node)))
                    .collect();
                let result = run_server(&server, count, &meter, |links| {
                    Ok::<_, ProtocolError>(drive(links, &mut state, cfg, &setup, &mut tracker, &meter, &mut out))
                });
                for h in handles {
                    h.join().map_err(|_| ExperimentError::Checkpoint("client thread panicked".into()))??;
                }
                result??;
            }
        }
    }
    let checkpoint = checkpoint_of(&state, cfg, &setup, &tracker);
    Ok(RunOutcome { rows: out.rows, state, checkpoint })
}

/// Options of a standalone prediction request.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictRequest {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub format: DatasetFormat,
    pub unlabeled: bool,
    pub out: PathBuf,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictOutput {
    pub model_path: PathBuf,
    pub manifest_path: PathBuf,
    pub params: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a network's layer list.
pub fn spec_digest(spec: &NetworkSpec) -> String {
    hex(&Sha256::digest(format!("{spec:?}").as_bytes()))
}

/// Generates a personalised model for a client's data from a checkpoint and
/// writes it as a tensor fragment, plus a `.manifest` text file next to it.
pub fn predict_cli(req: &PredictRequest) -> Result<PredictOutput, ExperimentError> {
    let ck = Checkpoint::load(&req.checkpoint)?;
    let cfg = ck.config()?;
    if req.unlabeled && cfg.model.embedding == EmbeddingKind::LinearOneHot {
        return Err(ExperimentError::Config {
            field: "unlabeled".into(),
            msg: "the linear-onehot embedding cannot describe unlabeled data".into(),
        });
    }
    let (client, embed, hyper) = build_networks(&cfg, ck.classes, ck.geometry)?;
    let data = load_dataset(&req.data, req.format)?.with_normalization(ck.normalization.clone())?;
    if data.geometry() != ck.geometry {
        return Err(ExperimentError::Config {
            field: "data".into(),
            msg: format!("images are {:?}, the model expects {:?}", data.geometry(), ck.geometry),
        });
    }
    if let Some(&bad) = data.labels().iter().find(|&&y| y >= ck.classes) {
        return Err(ExperimentError::Config {
            field: "data".into(),
            msg: format!("label {bad} out of range for a {}-class model", ck.classes),
        });
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let batch: ExampleBatch<f32> = data.batch(&idx, !req.unlabeled);
    let theta = match ModelState::from_checkpoint(&ck, &cfg, (&hyper, &embed))? {
        ModelState::Pefll(s) => {
            predict(&batch, &s, req.batch, req.unlabeled, &mut stream_rng(req.seed, 0, 0, STREAM_PREDICT))?
        }
        ModelState::FedAvg(g) => g.theta,
        ModelState::Local(_) => unreachable!("rejected when loading"),
    };
    let mut bytes = Vec::new();
    encode_fragment(&[theta.len()], &theta, &mut bytes).expect("rank-1 fragment");
    fs::write(&req.out, &bytes).map_err(|e| ExperimentError::io(&req.out, e))?;
    let manifest_path = PathBuf::from(format!("{}.manifest", req.out.display()));
    let manifest = format!(
        "classes = {}\nparams = {}\nclient_spec_sha256 = {}\nembedding = {}\nunlabeled = {}\ndescriptor_batch = {}\ncheckpoint_round = {}\n",
        ck.classes,
        theta.len(),
        spec_digest(&client),
        cfg.model.embedding,
        req.unlabeled,
        req.batch,
        ck.round
    );
    fs::write(&manifest_path, manifest).map_err(|e| ExperimentError::io(&manifest_path, e))?;
    Ok(PredictOutput { model_path: req.out.clone(), manifest_path, params: theta.len() })
}

/// Restores the state stored in a checkpoint together with its setup.
pub fn load_checkpoint_state(path: &Path) -> Result<(ExperimentConfig, Setup, ModelState), ExperimentError> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck.config()?;
    let setup = Setup::new(&cfg)?;
    let state = ModelState::from_checkpoint(&ck, &cfg, (&setup.hyper, &setup.embed))?;
    Ok((cfg, setup, state))
}

/// Re-evaluates a checkpoint; `mask` overrides the configured masking.
pub fn eval_checkpoint(path: &Path, mask: Option<bool>) -> Result<(f64, Option<f64>), ExperimentError> {
    let (mut cfg, setup, state) = load_checkpoint_state(path)?;
    if let Some(m) = mask {
        cfg.eval.mask = m;
    }
    evaluate(&state, &cfg, &setup, state.round())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub round: u32,
    pub spearman: Option<f64>,
    pub grad_norm_sq: f64,
    pub bound: BoundEstimate,
}

/// Descriptor correlation, gradient norm and Monte-Carlo bound of a
/// trained checkpoint, over the seen clients.
pub fn analyze_checkpoint(path: &Path, bound: &BoundConfig) -> Result<AnalysisReport, ExperimentError> {
    let (cfg, setup, state) = load_checkpoint_state(path)?;
    let ModelState::Pefll(s) = &state else {
        return Err(ExperimentError::Config { field: "run.algorithm".into(), msg: "analysis needs a pefll checkpoint".into() });
    };
    let train = setup.seen_train();
    let spearman = if setup.population.unseen_ids.is_empty() {
        None
    } else {
        descriptor_correlation_run(&setup.dataset, &setup.population, s).ok()
    };
    let grad = grad_norm_sq(s, &train, &setup.client_model, &regularization(&cfg))?;
    let estimate = pacbayes_bound_mc(s, &train, &setup.client_model, bound, &mut setup_rng(cfg.run.seed, STREAM_BOUND))?;
    Ok(AnalysisReport { round: s.round_index, spearman, grad_norm_sq: grad, bound: estimate })
}
