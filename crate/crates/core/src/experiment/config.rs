use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::data::DatasetFormat;
use crate::models::{EmbeddingKind, HyperSize};
use crate::protocol::RoundConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Pefll,
    FedAvg,
    Local,
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pefll" => Ok(Algorithm::Pefll),
            "fedavg" => Ok(Algorithm::FedAvg),
            "local" => Ok(Algorithm::Local),
            other => Err(format!("unknown algorithm `{other}` (pefll, fedavg, local)")),
        }
    }
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pefll => "pefll",
            Algorithm::FedAvg => "fedavg",
            Algorithm::Local => "local",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Algorithm::Pefll => 1,
            Algorithm::FedAvg => 2,
            Algorithm::Local => 3,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Algorithm::Pefll),
            2 => Some(Algorithm::FedAvg),
            3 => Some(Algorithm::Local),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    Loopback,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "loopback" => Ok(TransportKind::Loopback),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(format!("unknown transport `{other}` (loopback, tcp)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitKind {
    /// Every client owns `classes_per_client` classes.
    Classes,
    Dirichlet,
    /// Seen clients use `alpha`, unseen clients `alpha_new`.
    Extrapolation,
}

impl FromStr for SplitKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "classes" => Ok(SplitKind::Classes),
            "dirichlet" => Ok(SplitKind::Dirichlet),
            "extrapolation" => Ok(SplitKind::Extrapolation),
            other => Err(format!("unknown split `{other}` (classes, dirichlet, extrapolation)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub format: DatasetFormat,
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
    pub jitter: f64,
    pub clients: usize,
    pub split: SplitKind,
    pub classes_per_client: usize,
    pub alpha: f64,
    pub alpha_new: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embedding: EmbeddingKind,
    /// 0 selects `n / 4`.
    pub descriptor_dim: usize,
    pub hyper: HyperSize,
    pub hidden_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_h: f64,
    pub lambda_v: f64,
    pub lambda_theta: f64,
    pub beta: f64,
    pub local_steps: usize,
    pub participation: f64,
    /// 0 derives the count from `participation`.
    pub clients_per_round: usize,
    pub descriptor_batch: usize,
    pub local_batch: usize,
    pub client_momentum: f64,
    pub server_momentum: f64,
    pub unlabeled: bool,
    pub local_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub rounds: u32,
    pub seed: u64,
    pub transport: TransportKind,
    pub eval_every: u32,
    pub out: PathBuf,
    pub bind: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub mask: bool,
    pub grad_norm: bool,
    pub spearman: bool,
    pub predict_batch: usize,
}

/// Full description of one experiment. The text form is a list of
/// `section.key = value` lines; `#` starts a comment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let r = RoundConfig::default();
        ExperimentConfig {
            data: DataConfig {
                source: DataSource::Synthetic,
                format: DatasetFormat::Csv,
                classes: 10,
                per_class: 600,
                image_size: 32,
                channels: 3,
                noise: 40.0,
                jitter: 1.5,
                clients: 100,
                split: SplitKind::Classes,
                classes_per_client: 2,
                alpha: 0.1,
                alpha_new: 0.1,
                seed: 0,
            },
            model: ModelConfig { embedding: EmbeddingKind::LenetConv, descriptor_dim: 0, hyper: HyperSize::Medium, hidden_width: 100 },
            train: TrainConfig {
                lambda_h: r.lambda_h,
                lambda_v: r.lambda_v,
                lambda_theta: r.lambda_theta,
                beta: r.beta,
                local_steps: r.local_steps,
                participation: 0.05,
                clients_per_round: 0,
                descriptor_batch: r.descriptor_batch,
                local_batch: r.local_batch,
                client_momentum: r.client_momentum,
                server_momentum: r.server_momentum,
                unlabeled: false,
                local_epochs: crate::baselines::LOCAL_EPOCHS,
            },
            run: RunConfig {
                algorithm: Algorithm::Pefll,
                rounds: 5000,
                seed: 0,
                transport: TransportKind::Loopback,
                eval_every: 100,
                out: PathBuf::from("runs/default"),
                bind: "127.0.0.1:0".into(),
            },
            eval: EvalConfig { mask: false, grad_norm: false, spearman: false, predict_batch: 32 },
        }
    }
}

/// Every key with a one-line description, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("data.source", "`synthetic` or a path to a dataset file or directory"),
    ("data.format", "file format when data.source is a path: csv, idx, cifar-binary"),
    ("data.classes", "number of classes of the synthetic dataset"),
    ("data.per_class", "synthetic examples per class"),
    ("data.image_size", "synthetic image side length"),
    ("data.channels", "synthetic image channels, 1 or 3"),
    ("data.noise", "synthetic pixel noise standard deviation (0..255 units)"),
    ("data.jitter", "synthetic blob position jitter in pixels"),
    ("data.clients", "total number of clients n, seen and unseen"),
    ("data.split", "classes, dirichlet or extrapolation"),
    ("data.classes_per_client", "classes per client for the classes split"),
    ("data.alpha", "Dirichlet concentration for dirichlet and for seen clients under extrapolation"),
    ("data.alpha_new", "Dirichlet concentration of unseen clients under extrapolation"),
    ("data.seed", "seed of dataset synthesis and client split"),
    ("model.embedding", "lenet-conv (cnn) or linear-onehot (mlp)"),
    ("model.descriptor_dim", "descriptor length l; 0 means n/4"),
    ("model.hyper", "hypernetwork size S, M or L"),
    ("model.hidden_width", "hypernetwork hidden width"),
    ("train.lambda_h", "hypernetwork weight decay"),
    ("train.lambda_v", "embedding network weight decay"),
    ("train.lambda_theta", "client model weight decay"),
    ("train.beta", "client learning rate"),
    ("train.local_steps", "local SGD steps k per round"),
    ("train.participation", "fraction of seen clients per round"),
    ("train.clients_per_round", "explicit clients per round c; 0 derives it from participation"),
    ("train.descriptor_batch", "examples per descriptor during training"),
    ("train.local_batch", "local SGD batch size"),
    ("train.client_momentum", "client SGD momentum"),
    ("train.server_momentum", "server heavy-ball momentum on the shared networks; 0 disables"),
    ("train.unlabeled", "descriptors from images only, in training and prediction"),
    ("train.local_epochs", "epochs of the local baseline"),
    ("run.algorithm", "pefll, fedavg or local"),
    ("run.rounds", "training rounds T"),
    ("run.seed", "seed of initialisation, client selection and client sampling"),
    ("run.transport", "loopback or tcp"),
    ("run.eval_every", "rounds between metric rows"),
    ("run.out", "output directory"),
    ("run.bind", "server address for the tcp transport; port 0 picks a free port"),
    ("eval.mask", "restrict predictions to each client's label set"),
    ("eval.grad_norm", "track the exact objective gradient norm"),
    ("eval.spearman", "track descriptor/label-distribution rank correlation"),
    ("eval.predict_batch", "examples per descriptor when generating models for evaluation"),
];

/// Keys that do not influence the training trajectory and are left out of
/// the digest.
const UNDIGESTED: &[&str] = &["run.rounds", "run.transport", "run.out", "run.bind"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ExperimentError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ExperimentError::Config { field: key.to_string(), msg: format!("`{value}`: {e}") })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ExperimentError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(ExperimentError::Config { field: key.to_string(), msg: format!("`{other}` is not a boolean") }),
    }
}

fn format_name(f: DatasetFormat) -> &'static str {
    match f {
        DatasetFormat::CifarBinary => "cifar-binary",
        DatasetFormat::IdxPair => "idx",
        DatasetFormat::Csv => "csv",
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        let v = value.trim();
        let d = &mut self.data;
        let m = &mut self.model;
        let t = &mut self.train;
        let r = &mut self.run;
        let e = &mut self.eval;
        match key {
            "data.source" => d.source = if v == "synthetic" { DataSource::Synthetic } else { DataSource::File(PathBuf::from(v)) },
            "data.format" => d.format = parse(key, v)?,
            "data.classes" => d.classes = parse(key, v)?,
            "data.per_class" => d.per_class = parse(key, v)?,
            "data.image_size" => d.image_size = parse(key, v)?,
            "data.channels" => d.channels = parse(key, v)?,
            "data.noise" => d.noise = parse(key, v)?,
            "data.jitter" => d.jitter = parse(key, v)?,
            "data.clients" => d.clients = parse(key, v)?,
            "data.split" => d.split = parse(key, v)?,
            "data.classes_per_client" => d.classes_per_client = parse(key, v)?,
            "data.alpha" => d.alpha = parse(key, v)?,
            "data.alpha_new" => d.alpha_new = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "model.embedding" => m.embedding = parse(key, v)?,
            "model.descriptor_dim" => m.descriptor_dim = parse(key, v)?,
            "model.hyper" => m.hyper = parse(key, v)?,
            "model.hidden_width" => m.hidden_width = parse(key, v)?,
            "train.lambda_h" => t.lambda_h = parse(key, v)?,
            "train.lambda_v" => t.lambda_v = parse(key, v)?,
            "train.lambda_theta" => t.lambda_theta = parse(key, v)?,
            "train.beta" => t.beta = parse(key, v)?,
            "train.local_steps" => t.local_steps = parse(key, v)?,
            "train.participation" => t.participation = parse(key, v)?,
            "train.clients_per_round" => t.clients_per_round = parse(key, v)?,
            "train.descriptor_batch" => t.descriptor_batch = parse(key, v)?,
            "train.local_batch" => t.local_batch = parse(key, v)?,
            "train.client_momentum" => t.client_momentum = parse(key, v)?,
            "train.server_momentum" => t.server_momentum = parse(key, v)?,
            "train.unlabeled" => t.unlabeled = parse_bool(key, v)?,
            "train.local_epochs" => t.local_epochs = parse(key, v)?,
            "run.algorithm" => r.algorithm = parse(key, v)?,
            "run.rounds" => r.rounds = parse(key, v)?,
            "run.seed" => r.seed = parse(key, v)?,
            "run.transport" => r.transport = parse(key, v)?,
            "run.eval_every" => r.eval_every = parse(key, v)?,
            "run.out" => r.out = PathBuf::from(v),
            "run.bind" => r.bind = v.to_string(),
            "eval.mask" => e.mask = parse_bool(key, v)?,
            "eval.grad_norm" => e.grad_norm = parse_bool(key, v)?,
            "eval.spearman" => e.spearman = parse_bool(key, v)?,
            "eval.predict_batch" => e.predict_batch = parse(key, v)?,
            other => return Err(ExperimentError::Config { field: other.to_string(), msg: "unknown key".into() }),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let r = &self.run;
        let e = &self.eval;
        Some(match key {
            "data.source" => match &d.source {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::File(p) => p.display().to_string(),
            },
            "data.format" => format_name(d.format).into(),
            "data.classes" => d.classes.to_string(),
            "data.per_class" => d.per_class.to_string(),
            "data.image_size" => d.image_size.to_string(),
            "data.channels" => d.channels.to_string(),
            "data.noise" => d.noise.to_string(),
            "data.jitter" => d.jitter.to_string(),
            "data.clients" => d.clients.to_string(),
            "data.split" => match d.split {
                SplitKind::Classes => "classes",
                SplitKind::Dirichlet => "dirichlet",
                SplitKind::Extrapolation => "extrapolation",
            }
            .into(),
            "data.classes_per_client" => d.classes_per_client.to_string(),
            "data.alpha" => d.alpha.to_string(),
            "data.alpha_new" => d.alpha_new.to_string(),
            "data.seed" => d.seed.to_string(),
            "model.embedding" => m.embedding.to_string(),
            "model.descriptor_dim" => m.descriptor_dim.to_string(),
            "model.hyper" => m.hyper.label().into(),
            "model.hidden_width" => m.hidden_width.to_string(),
            "train.lambda_h" => t.lambda_h.to_string(),
            "train.lambda_v" => t.lambda_v.to_string(),
            "train.lambda_theta" => t.lambda_theta.to_string(),
            "train.beta" => t.beta.to_string(),
            "train.local_steps" => t.local_steps.to_string(),
            "train.participation" => t.participation.to_string(),
            "train.clients_per_round" => t.clients_per_round.to_string(),
            "train.descriptor_batch" => t.descriptor_batch.to_string(),
            "train.local_batch" => t.local_batch.to_string(),
            "train.client_momentum" => t.client_momentum.to_string(),
            "train.server_momentum" => t.server_momentum.to_string(),
            "train.unlabeled" => t.unlabeled.to_string(),
            "train.local_epochs" => t.local_epochs.to_string(),
            "run.algorithm" => r.algorithm.name().into(),
            "run.rounds" => r.rounds.to_string(),
            "run.seed" => r.seed.to_string(),
            "run.transport" => match r.transport {
                TransportKind::Loopback => "loopback",
                TransportKind::Tcp => "tcp",
            }
            .into(),
            "run.eval_every" => r.eval_every.to_string(),
            "run.out" => r.out.display().to_string(),
            "run.bind" => r.bind.clone(),
            "eval.mask" => e.mask.to_string(),
            "eval.grad_norm" => e.grad_norm.to_string(),
            "eval.spearman" => e.spearman.to_string(),
            "eval.predict_batch" => e.predict_batch.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ExperimentError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ExperimentError::Config {
                field: format!("line {}", i + 1),
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Canonical text form listing every key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("every listed key is readable"));
        }
        out
    }

    /// SHA-256 over the canonical text of the keys that shape training.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, _) in KEYS.iter().filter(|(k, _)| !UNDIGESTED.contains(k)) {
            h.update(format!("{k}={}\n", self.get(k).expect("listed key")).as_bytes());
        }
        h.finalize().into()
    }

    /// Number of seen clients, matching the population split.
    pub fn seen_clients(&self) -> usize {
        self.data.clients - crate::data::unseen_count(self.data.clients)
    }

    pub fn clients_per_round(&self) -> usize {
        if self.train.clients_per_round > 0 {
            self.train.clients_per_round
        } else {
            ((self.train.participation * self.seen_clients() as f64).round() as usize).max(1)
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        if self.model.descriptor_dim > 0 {
            self.model.descriptor_dim
        } else {
            crate::models::recommended_descriptor_dim(self.data.clients)
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        let t = &self.train;
        RoundConfig {
            lambda_h: t.lambda_h,
            lambda_v: t.lambda_v,
            lambda_theta: t.lambda_theta,
            beta: t.beta,
            local_steps: t.local_steps,
            clients_per_round: self.clients_per_round(),
            descriptor_batch: t.descriptor_batch,
            local_batch: t.local_batch,
            client_momentum: t.client_momentum,
            server_momentum: t.server_momentum,
            unlabeled_descriptors: t.unlabeled,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |field: &str, msg: String| Err(ExperimentError::Config { field: field.into(), msg });
        let d = &self.data;
        if let DataSource::File(p) = &d.source {
            if !p.exists() {
                return fail("data.source", format!("{} does not exist", p.display()));
            }
        }
        if d.clients < 2 {
            return fail("data.clients", format!("need at least 2 clients, got {}", d.clients));
        }
        for (field, a) in [("data.alpha", d.alpha), ("data.alpha_new", d.alpha_new)] {
            if !(a.is_finite() && a > 0.0) {
                return fail(field, format!("must be positive, got {a}"));
            }
        }
        if self.model.hidden_width == 0 {
            return fail("model.hidden_width", "must be positive".into());
        }
        if self.run.rounds == 0 {
            return fail("run.rounds", "must be at least 1".into());
        }
        if self.run.eval_every == 0 {
            return fail("run.eval_every", "must be at least 1".into());
        }
        if self.eval.predict_batch == 0 {
            return fail("eval.predict_batch", "must be at least 1".into());
        }
        let t = &self.train;
        if !(t.participation > 0.0 && t.participation <= 1.0) {
            return fail("train.participation", format!("must lie in (0, 1], got {}", t.participation));
        }
        if self.clients_per_round() > self.seen_clients() {
            return fail(
                "train.clients_per_round",
                format!("{} exceeds the {} seen clients", self.clients_per_round(), self.seen_clients()),
            );
        }
        if t.unlabeled && self.model.embedding == EmbeddingKind::LinearOneHot {
            return fail("train.unlabeled", "the linear-onehot embedding needs labels".into());
        }
        if t.unlabeled && self.run.algorithm != Algorithm::Pefll {
            return fail("train.unlabeled", "only applies to pefll".into());
        }
        self.round_config().validate().map_err(|e| ExperimentError::Config { field: "train".into(), msg: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("train.beta", "0.05").unwrap();
        cfg.set("data.source", "/tmp/x.csv").unwrap();
        cfg.set("model.hyper", "L").unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(KEYS.len(), cfg.to_text().lines().count());
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::parse("train.beta = fast").unwrap_err();
        assert!(matches!(err, ExperimentError::Config { ref field, .. } if field == "train.beta"));
        let err = ExperimentConfig::parse("train.nope = 1").unwrap_err();
        assert!(matches!(err, ExperimentError::Config { ref field, .. } if field == "train.nope"));
        let err = ExperimentConfig::parse("run.rounds = 0").unwrap().validate().unwrap_err();
        assert!(matches!(err, ExperimentError::Config { ref field, .. } if field == "run.rounds"));
        let err = ExperimentConfig::parse("just words").unwrap_err();
        assert!(matches!(err, ExperimentError::Config { ref field, .. } if field == "line 1"));
    }

    #[test]
    fn digest_ignores_length_and_placement() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.run.rounds = 7;
        b.run.transport = TransportKind::Tcp;
        b.run.out = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.train.beta = 0.5;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn default_participation() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.seen_clients(), 90);
        assert_eq!(cfg.clients_per_round(), 5);
        assert_eq!(cfg.descriptor_dim(), 25);
    }
}
