use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    stream_rng, Control, Envelope, LocalSgd, Message, ProtocolError, SessionConfig, SessionKind,
    STREAM_DESCRIPTOR, STREAM_LOCAL, STREAM_PREDICT,
};
use crate::models::{
    compute_descriptor, compute_descriptor_unlabeled, descriptor_vjp, Descriptor, EmbeddingKind, ExampleBatch, ModelError,
};
use crate::nn::{backward_trace, cross_entropy_loss, forward_trace, GradVector, NetworkSpec, ParamVector, Scalar, Sgd, Tensor};

/// `min(b, n)` distinct example indices; all of them, in order, when `b ≥ n`.
pub fn sample_descriptor_batch<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Vec<usize> {
    if b >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, b).into_vec()
    }
}

/// Runs `k` minibatch SGD steps on `L(θ; S) + λ_θ‖θ‖²` from `θ₀` and returns
/// `Δθ = θ₀ − θ_k`.
pub fn client_local_steps<T: Scalar, R: Rng + ?Sized>(
    theta0: &ParamVector<T>,
    data: &ExampleBatch<T>,
    logits: &NetworkSpec,
    sgd: &LocalSgd,
    rng: &mut R,
) -> Result<GradVector<T>, ProtocolError> {
    let theta = local_sgd(theta0, data, logits, sgd, rng)?;
    Ok(GradVector(theta0.iter().zip(theta.iter()).map(|(&a, &b)| a - b).collect()))
}

/// The parameters after `k` minibatch SGD steps from `θ₀`. Examples are
/// reshuffled at the start of every pass; a batch covering the whole client
/// uses the data in stored order.
pub fn local_sgd<T: Scalar, R: Rng + ?Sized>(
    theta0: &ParamVector<T>,
    data: &ExampleBatch<T>,
    logits: &NetworkSpec,
    sgd: &LocalSgd,
    rng: &mut R,
) -> Result<ParamVector<T>, ProtocolError> {
    let n = data.len();
    if n == 0 {
        return Err(ModelError::EmptyBatch.into());
    }
    let labels = data.labels().ok_or(ProtocolError::Config("local training needs labeled data".into()))?;
    let bs = sgd.batch.clamp(1, n);
    let full = bs == n;
    let full_images = if full { Some(data.images()?) } else { None };
    let mut theta = theta0.clone();
    let mut opt = Sgd::new(theta.len(), T::of(sgd.lr), T::of(sgd.momentum));
    let two_lambda = T::of(2.0 * sgd.lambda_theta);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut pos = n;
    for _ in 0..sgd.steps {
        let mut g = match &full_images {
            Some(x) => loss_grad(logits, &theta, x, labels)?,
            None => {
                if pos >= n {
                    perm.shuffle(rng);
                    pos = 0;
                }
                let end = (pos + bs).min(n);
                let mb = data.select(&perm[pos..end]);
                pos = end;
                loss_grad(logits, &theta, &mb.images()?, mb.labels().expect("selected from labeled data"))?
            }
        };
        if two_lambda != T::zero() {
            for (gi, &t) in g.iter_mut().zip(theta.iter()) {
                *gi += two_lambda * t;
            }
        }
        opt.step(&mut theta, &g).map_err(ModelError::from)?;
    }
    Ok(theta)
}

fn loss_grad<T: Scalar>(
    logits: &NetworkSpec,
    theta: &ParamVector<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<GradVector<T>, ProtocolError> {
    let trace = forward_trace(logits, theta, x).map_err(ModelError::from)?;
    let (_, g_out) = cross_entropy_loss(trace.output(), labels).map_err(ModelError::from)?;
    let (g, _) = backward_trace(logits, theta, &trace, &g_out, false).map_err(ModelError::from)?;
    Ok(g)
}

/// Gradient of `<Δv, v(batch; η_v)>` with respect to `η_v`.
pub fn client_embedding_backprop<T: Scalar>(
    delta_v: &[T],
    batch: &ExampleBatch<T>,
    embed: &NetworkSpec,
    eta_v: &ParamVector<T>,
    kind: EmbeddingKind,
) -> Result<GradVector<T>, ProtocolError> {
    Ok(descriptor_vjp(batch, embed, eta_v, kind, delta_v)?)
}

/// How a client builds its descriptor when asked for a model outside of a
/// training session.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictOptions {
    pub descriptor_batch: usize,
    pub seed: u64,
    pub unlabeled: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions { descriptor_batch: 32, seed: 0, unlabeled: false }
    }
}

enum Phase<T> {
    Idle,
    PredictPending { round: u32 },
    Ready,
    AwaitModel { round: u32, batch: Vec<usize>, eta_v: ParamVector<T> },
    AwaitDescriptorGrad { round: u32, batch: Vec<usize>, eta_v: ParamVector<T> },
}

impl<T> Phase<T> {
    fn expected(&self, session: Option<SessionKind>) -> &'static str {
        match (self, session) {
            (Phase::Idle, _) => "a session start or EmbedWeights",
            (Phase::PredictPending { .. }, _) => "PersonalModel",
            (Phase::Ready, Some(SessionKind::FedAvg)) => "PersonalModel or RoundControl",
            (Phase::Ready, _) => "EmbedWeights or RoundControl",
            (Phase::AwaitModel { .. }, _) => "PersonalModel",
            (Phase::AwaitDescriptorGrad { .. }, _) => "DescriptorGrad",
        }
    }
}

/// Client-side protocol state machine holding the client's private data.
pub struct ClientNode<T: Scalar> {
    id: u32,
    data: ExampleBatch<T>,
    logits: NetworkSpec,
    embed: NetworkSpec,
    kind: EmbeddingKind,
    predict: PredictOptions,
    session: Option<SessionConfig>,
    phase: Phase<T>,
    model: Option<ParamVector<T>>,
}

impl<T: Scalar> ClientNode<T> {
    pub fn new(
        id: u32,
        data: ExampleBatch<T>,
        client_model: &NetworkSpec,
        embed: NetworkSpec,
        kind: EmbeddingKind,
    ) -> Result<Self, ProtocolError> {
        if data.is_empty() {
            return Err(ProtocolError::EmptyClientData(id));
        }
        let expected = client_model.input_shape().numel();
        if data.image_len() != expected {
            return Err(ModelError::ImageSize { expected, actual: data.image_len() }.into());
        }
        let logits = if client_model.ends_with_softmax() { client_model.logits_spec() } else { client_model.clone() };
        Ok(ClientNode {
            id,
            data,
            logits,
            embed,
            kind,
            predict: PredictOptions::default(),
            session: None,
            phase: Phase::Idle,
            model: None,
        })
    }

    pub fn with_predict_options(mut self, opts: PredictOptions) -> Self {
        self.predict = opts;
        self
    }

    pub fn client_id(&self) -> u32 {
        self.id
    }

    pub fn data(&self) -> &ExampleBatch<T> {
        &self.data
    }

    /// The personalised model most recently received through prediction.
    pub fn model(&self) -> Option<&ParamVector<T>> {
        self.model.as_ref()
    }

    /// Processes one server message, returning the reply if the protocol
    /// calls for one.
    pub fn handle(&mut self, env: Envelope<T>) -> Result<Option<Envelope<T>>, ProtocolError> {
        if env.client_id != self.id {
            return Err(ProtocolError::ClientMismatch { expected: self.id, got: env.client_id });
        }
        let round = env.round;
        let kind = env.message.kind();
        let phase = std::mem::replace(&mut self.phase, Phase::Idle);
        let session_kind = self.session.as_ref().map(|s| s.kind);
        let id = self.id;
        let out_of_order = |phase: &Phase<T>| ProtocolError::Sequence {
            client: id,
            expected: phase.expected(session_kind),
            got: kind,
        };
        let result = match (phase, env.message) {
            (Phase::Idle | Phase::Ready, Message::Control(Control::Session(cfg))) => {
                self.phase = Phase::Ready;
                self.session = Some(cfg);
                Ok(None)
            }
            (_, Message::Control(Control::Shutdown)) => {
                self.session = None;
                Ok(None)
            }
            (Phase::Idle, Message::EmbedWeights(eta_v)) => {
                let v = self.describe(round, &eta_v)?;
                self.phase = Phase::PredictPending { round };
                Ok(Some(Message::Descriptor(v)))
            }
            (Phase::PredictPending { round: r }, Message::PersonalModel(theta)) => {
                check_round(self.id, r, round)?;
                self.model = Some(theta);
                Ok(None)
            }
            (Phase::Ready, Message::EmbedWeights(eta_v)) if session_kind == Some(SessionKind::Pefll) => {
                let cfg = self.session.as_ref().expect("session present");
                let mut rng = stream_rng(cfg.seed, round, self.id, STREAM_DESCRIPTOR);
                let idx = sample_descriptor_batch(self.data.len(), cfg.descriptor_batch as usize, &mut rng);
                let v = compute_descriptor(&self.session_batch(&idx), &self.embed, &eta_v, self.kind)?;
                self.phase = Phase::AwaitModel { round, batch: idx, eta_v };
                Ok(Some(Message::Descriptor(v)))
            }
            (Phase::AwaitModel { round: r, batch, eta_v }, Message::PersonalModel(theta)) => {
                check_round(self.id, r, round)?;
                let delta = self.local_update(round, &theta)?;
                self.phase = Phase::AwaitDescriptorGrad { round, batch, eta_v };
                Ok(Some(Message::ModelDelta(delta)))
            }
            (Phase::AwaitDescriptorGrad { round: r, batch, eta_v }, Message::DescriptorGrad(dv)) => {
                check_round(self.id, r, round)?;
                let g = client_embedding_backprop(&dv, &self.session_batch(&batch), &self.embed, &eta_v, self.kind)?;
                self.phase = Phase::Ready;
                Ok(Some(Message::EmbedDelta(g)))
            }
            (Phase::Ready, Message::PersonalModel(theta)) if session_kind == Some(SessionKind::FedAvg) => {
                let delta = self.local_update(round, &theta)?;
                self.phase = Phase::Ready;
                Ok(Some(Message::ModelDelta(delta)))
            }
            (phase, _) => {
                let err = out_of_order(&phase);
                self.phase = phase;
                Err(err)
            }
        };
        result.map(|m| m.map(|message| Envelope::new(round, self.id, message)))
    }

    fn session_batch(&self, idx: &[usize]) -> ExampleBatch<T> {
        let batch = self.data.select(idx);
        match &self.session {
            Some(s) if s.unlabeled => batch.without_labels(),
            _ => batch,
        }
    }

    fn local_update(&self, round: u32, theta: &ParamVector<T>) -> Result<GradVector<T>, ProtocolError> {
        let cfg = self.session.as_ref().expect("session present");
        if theta.len() != self.logits.param_count() {
            return Err(ProtocolError::Length {
                what: "personal model",
                expected: self.logits.param_count(),
                actual: theta.len(),
            });
        }
        let mut rng = stream_rng(cfg.seed, round, self.id, STREAM_LOCAL);
        client_local_steps(theta, &self.data, &self.logits, &cfg.local(), &mut rng)
    }

    /// Descriptor of this client's data for the given embedding weights,
    /// following the prediction options.
    pub fn describe(&self, round: u32, eta_v: &ParamVector<T>) -> Result<Descriptor<T>, ProtocolError> {
        let mut rng = stream_rng(self.predict.seed, round, self.id, STREAM_PREDICT);
        let idx = sample_descriptor_batch(self.data.len(), self.predict.descriptor_batch, &mut rng);
        let batch = self.data.select(&idx);
        Ok(if self.predict.unlabeled {
            compute_descriptor_unlabeled(&batch, &self.embed, eta_v, self.kind)?
        } else {
            compute_descriptor(&batch, &self.embed, eta_v, self.kind)?
        })
    }
}

fn check_round(client: u32, expected: u32, got: u32) -> Result<(), ProtocolError> {
    if expected == got {
        Ok(())
    } else {
        Err(ProtocolError::RoundMismatch { client, expected, got })
    }
}
