//! The training and prediction protocols, independent of how messages travel.
//!
//! The server talks to each client through a [`ClientLink`], a strictly
//! alternating request/response channel. [`DirectLink`] hands typed messages
//! straight to an in-process [`ClientNode`]; the transport module provides
//! serialising links.

mod client;
mod server;

use std::fmt;

use thiserror::Error;

use crate::models::{Descriptor, ModelError};
use crate::nn::{GradVector, ParamVector, Scalar};

pub use client::{
    client_embedding_backprop, client_local_steps, local_sgd, sample_descriptor_batch, ClientNode, PredictOptions,
};
pub use server::{
    check_vector, expect_reply, predict, serve_predict, server_apply_updates, server_hyper_backprop, start_session, stop_session, train_round,
    RoundReport, ServerState, UpdateAccumulator,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("round needs {required} clients but only {available} are available")]
    InsufficientClients { available: usize, required: usize },
    #[error("no client updates to apply")]
    EmptyUpdates,
    #[error("client {0} has no training data")]
    EmptyClientData(u32),
    #[error("client {client}: expected {expected}, received {got}")]
    Sequence { client: u32, expected: &'static str, got: MessageKind },
    #[error("client {client}: message for round {got} during round {expected}")]
    RoundMismatch { client: u32, expected: u32, got: u32 },
    #[error("message addressed to client {got} arrived at client {expected}")]
    ClientMismatch { expected: u32, got: u32 },
    #[error("{what} has length {actual}, expected {expected}")]
    Length { what: &'static str, expected: usize, actual: usize },
    #[error("{0} contains non-finite values")]
    NonFinite(&'static str),
    #[error("link to client {client} failed: {msg}")]
    Link { client: u32, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// The seven message kinds and their wire codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MessageKind {
    EmbedWeights = 1,
    Descriptor = 2,
    PersonalModel = 3,
    ModelDelta = 4,
    DescriptorGrad = 5,
    EmbedDelta = 6,
    RoundControl = 7,
}

impl MessageKind {
    pub const ALL: [MessageKind; 7] = [
        MessageKind::EmbedWeights,
        MessageKind::Descriptor,
        MessageKind::PersonalModel,
        MessageKind::ModelDelta,
        MessageKind::DescriptorGrad,
        MessageKind::EmbedDelta,
        MessageKind::RoundControl,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get((code as usize).wrapping_sub(1)).copied()
    }

    /// Server-to-client kinds travel down, the rest up. Control frames go
    /// both ways and are reported as down.
    pub fn is_upload(self) -> bool {
        matches!(self, MessageKind::Descriptor | MessageKind::ModelDelta | MessageKind::EmbedDelta)
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}({})", self.code())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionKind {
    Pefll,
    FedAvg,
}

/// Client-side settings announced by the server at the start of a session.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub kind: SessionKind,
    pub seed: u64,
    pub local_steps: u32,
    pub local_batch: u32,
    pub descriptor_batch: u32,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_theta: f64,
    /// Descriptors are computed from images alone.
    pub unlabeled: bool,
}

impl SessionConfig {
    pub fn new(kind: SessionKind, seed: u64, cfg: &RoundConfig) -> Self {
        SessionConfig {
            kind,
            seed,
            local_steps: cfg.local_steps as u32,
            local_batch: cfg.local_batch as u32,
            descriptor_batch: cfg.descriptor_batch as u32,
            lr: cfg.beta,
            momentum: cfg.client_momentum,
            lambda_theta: cfg.lambda_theta,
            unlabeled: cfg.unlabeled_descriptors,
        }
    }

    pub fn local(&self) -> LocalSgd {
        LocalSgd {
            steps: self.local_steps as usize,
            batch: self.local_batch as usize,
            lr: self.lr,
            momentum: self.momentum,
            lambda_theta: self.lambda_theta,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Control {
    /// First frame a networked client sends, identifying itself.
    Join,
    Session(SessionConfig),
    Shutdown,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message<T> {
    EmbedWeights(ParamVector<T>),
    Descriptor(Descriptor<T>),
    PersonalModel(ParamVector<T>),
    ModelDelta(GradVector<T>),
    DescriptorGrad(GradVector<T>),
    EmbedDelta(GradVector<T>),
    Control(Control),
}

impl<T> Message<T> {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::EmbedWeights(_) => MessageKind::EmbedWeights,
            Message::Descriptor(_) => MessageKind::Descriptor,
            Message::PersonalModel(_) => MessageKind::PersonalModel,
            Message::ModelDelta(_) => MessageKind::ModelDelta,
            Message::DescriptorGrad(_) => MessageKind::DescriptorGrad,
            Message::EmbedDelta(_) => MessageKind::EmbedDelta,
            Message::Control(_) => MessageKind::RoundControl,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope<T> {
    pub round: u32,
    pub client_id: u32,
    pub message: Message<T>,
}

impl<T> Envelope<T> {
    pub fn new(round: u32, client_id: u32, message: Message<T>) -> Self {
        Envelope { round, client_id, message }
    }
}

/// Request/response channel from the server to one client.
pub trait ClientLink<T: Scalar> {
    fn client_id(&self) -> u32;

    /// Sends a message and waits for the client's answer.
    fn request(&mut self, env: Envelope<T>) -> Result<Envelope<T>, ProtocolError>;

    /// Sends a message that expects no answer.
    fn notify(&mut self, env: Envelope<T>) -> Result<(), ProtocolError>;
}

impl<T: Scalar, L: ClientLink<T> + ?Sized> ClientLink<T> for Box<L> {
    fn client_id(&self) -> u32 {
        (**self).client_id()
    }

    fn request(&mut self, env: Envelope<T>) -> Result<Envelope<T>, ProtocolError> {
        (**self).request(env)
    }

    fn notify(&mut self, env: Envelope<T>) -> Result<(), ProtocolError> {
        (**self).notify(env)
    }
}

/// In-process link without serialisation; records every logical message.
pub struct DirectLink<T: Scalar> {
    pub node: ClientNode<T>,
    pub log: Vec<(u32, MessageKind)>,
}

impl<T: Scalar> DirectLink<T> {
    pub fn new(node: ClientNode<T>) -> Self {
        DirectLink { node, log: Vec::new() }
    }
}

impl<T: Scalar> ClientLink<T> for DirectLink<T> {
    fn client_id(&self) -> u32 {
        self.node.client_id()
    }

    fn request(&mut self, env: Envelope<T>) -> Result<Envelope<T>, ProtocolError> {
        self.log.push((env.round, env.message.kind()));
        let id = self.node.client_id();
        let reply = self.node.handle(env)?.ok_or(ProtocolError::Link { client: id, msg: "client sent no reply".into() })?;
        self.log.push((reply.round, reply.message.kind()));
        Ok(reply)
    }

    fn notify(&mut self, env: Envelope<T>) -> Result<(), ProtocolError> {
        self.log.push((env.round, env.message.kind()));
        match self.node.handle(env)? {
            None => Ok(()),
            Some(r) => Err(ProtocolError::Link {
                client: self.node.client_id(),
                msg: format!("unexpected reply {}", r.message.kind()),
            }),
        }
    }
}

/// Client-side local optimisation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalSgd {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_theta: f64,
}

/// Hyperparameters of one training round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundConfig {
    pub lambda_h: f64,
    pub lambda_v: f64,
    pub lambda_theta: f64,
    /// Client learning rate; also scales the server regulariser step.
    pub beta: f64,
    pub local_steps: usize,
    pub clients_per_round: usize,
    pub descriptor_batch: usize,
    pub local_batch: usize,
    pub client_momentum: f64,
    /// Heavy-ball momentum on the server's η updates; 0 disables it.
    pub server_momentum: f64,
    /// Clients describe themselves from images only, during training and
    /// prediction.
    pub unlabeled_descriptors: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            lambda_h: 1e-3,
            lambda_v: 1e-3,
            lambda_theta: 0.0,
            beta: 0.01,
            local_steps: 50,
            clients_per_round: 1,
            descriptor_batch: 32,
            local_batch: 32,
            client_momentum: 0.9,
            server_momentum: 0.0,
            unlabeled_descriptors: false,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::Config(m));
        for (name, v) in [("lambda_h", self.lambda_h), ("lambda_v", self.lambda_v), ("lambda_theta", self.lambda_theta)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be a non-negative number, got {}", self.beta));
        }
        if self.local_steps == 0 || self.clients_per_round == 0 || self.descriptor_batch == 0 || self.local_batch == 0 {
            return bad("local_steps, clients_per_round, descriptor_batch and local_batch must be >= 1".into());
        }
        for (name, m) in [("client_momentum", self.client_momentum), ("server_momentum", self.server_momentum)] {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("{name} must lie in [0, 1), got {m}"));
            }
        }
        Ok(())
    }

    pub fn local(&self) -> LocalSgd {
        LocalSgd {
            steps: self.local_steps,
            batch: self.local_batch,
            lr: self.beta,
            momentum: self.client_momentum,
            lambda_theta: self.lambda_theta,
        }
    }
}

pub const STREAM_DESCRIPTOR: u64 = 1;
pub const STREAM_LOCAL: u64 = 2;
pub const STREAM_PREDICT: u64 = 3;
pub const STREAM_SELECT: u64 = 4;

/// Independent seed for one `(round, client, stream)` triple.
pub fn stream_seed(seed: u64, round: u32, client: u32, stream: u64) -> u64 {
    let mut z = seed;
    for word in [round as u64, client as u64, stream] {
        z = splitmix(z ^ splitmix(word.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for one `(round, client, stream)` triple.
pub fn stream_rng(seed: u64, round: u32, client: u32, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(stream_seed(seed, round, client, stream))
}

/// RNG the server uses to pick a round's participants.
pub fn selection_rng(seed: u64, round: u32) -> rand_chacha::ChaCha8Rng {
    stream_rng(seed, round, u32::MAX, STREAM_SELECT)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip_codes() {
        for k in MessageKind::ALL {
            assert_eq!(MessageKind::from_code(k.code()), Some(k));
        }
        assert_eq!(MessageKind::from_code(0), None);
        assert_eq!(MessageKind::from_code(8), None);
    }

    #[test]
    fn stream_seeds_differ() {
        let a = stream_seed(1, 0, 0, STREAM_LOCAL);
        assert_ne!(a, stream_seed(1, 0, 0, STREAM_DESCRIPTOR));
        assert_ne!(a, stream_seed(1, 1, 0, STREAM_LOCAL));
        assert_ne!(a, stream_seed(1, 0, 1, STREAM_LOCAL));
        assert_ne!(a, stream_seed(2, 0, 0, STREAM_LOCAL));
        assert_eq!(a, stream_seed(1, 0, 0, STREAM_LOCAL));
    }

    #[test]
    fn config_validation() {
        assert!(RoundConfig::default().validate().is_ok());
        assert!(RoundConfig { local_steps: 0, ..RoundConfig::default() }.validate().is_err());
        assert!(RoundConfig { client_momentum: 1.0, ..RoundConfig::default() }.validate().is_err());
        assert!(RoundConfig { lambda_h: -1.0, ..RoundConfig::default() }.validate().is_err());
    }
}
