use rand::Rng;

use super::{ClientLink, Control, Envelope, Message, MessageKind, ProtocolError, RoundConfig, SessionConfig};
use crate::models::{
    compute_descriptor, compute_descriptor_unlabeled, generate_personal_model, hypernetwork_vjp, init_hypernetwork,
    Descriptor, EmbeddingKind, ExampleBatch, ModelError,
};
use crate::nn::{init_params, GradVector, NetworkSpec, ParamVector, Scalar};

/// Everything the server keeps between rounds. There is deliberately no
/// per-client storage: any client can be served in any round.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState<T> {
    pub eta_h: ParamVector<T>,
    pub eta_v: ParamVector<T>,
    pub hyper: NetworkSpec,
    pub embed: NetworkSpec,
    pub embed_kind: EmbeddingKind,
    pub round_index: u32,
    velocity_h: GradVector<T>,
    velocity_v: GradVector<T>,
}

impl<T: Scalar> ServerState<T> {
    pub fn new(
        hyper: NetworkSpec,
        embed: NetworkSpec,
        embed_kind: EmbeddingKind,
        eta_h: ParamVector<T>,
        eta_v: ParamVector<T>,
    ) -> Result<Self, ProtocolError> {
        for (what, spec, p) in [("eta_h", &hyper, &eta_h), ("eta_v", &embed, &eta_v)] {
            if spec.param_count() != p.len() {
                return Err(ProtocolError::Length { what, expected: spec.param_count(), actual: p.len() });
            }
        }
        if hyper.input_shape().numel() != embed.output_dim() {
            return Err(ModelError::DescriptorDim { expected: hyper.input_shape().numel(), actual: embed.output_dim() }.into());
        }
        Ok(ServerState {
            eta_h,
            eta_v,
            hyper,
            embed,
            embed_kind,
            round_index: 0,
            velocity_h: GradVector(Vec::new()),
            velocity_v: GradVector(Vec::new()),
        })
    }

    /// Fresh random initialisation of both networks.
    pub fn initialize<R: Rng + ?Sized>(
        hyper: NetworkSpec,
        embed: NetworkSpec,
        embed_kind: EmbeddingKind,
        client_model: &NetworkSpec,
        rng: &mut R,
    ) -> Result<Self, ProtocolError> {
        let eta_v = init_params(&embed, rng);
        let eta_h = init_hypernetwork(&hyper, client_model, rng)?;
        Self::new(hyper, embed, embed_kind, eta_h, eta_v)
    }

    pub fn descriptor_dim(&self) -> usize {
        self.embed.output_dim()
    }

    pub fn model_dim(&self) -> usize {
        self.hyper.output_dim()
    }

    /// Server-side momentum buffers; empty when momentum is disabled.
    pub fn velocity(&self) -> (&GradVector<T>, &GradVector<T>) {
        (&self.velocity_h, &self.velocity_v)
    }

    pub fn set_velocity(&mut self, h: GradVector<T>, v: GradVector<T>) -> Result<(), ProtocolError> {
        for (what, buf, p) in [("velocity_h", &h, &self.eta_h), ("velocity_v", &v, &self.eta_v)] {
            if !buf.is_empty() && buf.len() != p.len() {
                return Err(ProtocolError::Length { what, expected: p.len(), actual: buf.len() });
            }
        }
        self.velocity_h = h;
        self.velocity_v = v;
        Ok(())
    }

    /// Name and element count of every stored buffer.
    pub fn footprint(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("eta_h", self.eta_h.len()),
            ("eta_v", self.eta_v.len()),
            ("velocity_h", self.velocity_h.len()),
            ("velocity_v", self.velocity_v.len()),
        ]
    }

    /// `θ = h(v; η_h)`.
    pub fn generate(&self, v: &Descriptor<T>) -> Result<ParamVector<T>, ProtocolError> {
        Ok(generate_personal_model(v, &self.eta_h, &self.hyper)?)
    }
}

/// VJPs of the hypernetwork at `v` with upstream `Δθ`: `(Δη_h, Δv)`.
pub fn server_hyper_backprop<T: Scalar>(
    delta_theta: &[T],
    v: &Descriptor<T>,
    state: &ServerState<T>,
) -> Result<(GradVector<T>, GradVector<T>), ProtocolError> {
    Ok(hypernetwork_vjp(v, &state.eta_h, &state.hyper, delta_theta)?)
}

/// Running sum of client contributions, in ascending client-id order.
pub struct UpdateAccumulator<T> {
    sum_h: Vec<T>,
    sum_v: Vec<T>,
    count: usize,
    last: Option<u32>,
}

impl<T: Scalar> UpdateAccumulator<T> {
    pub fn new(state: &ServerState<T>) -> Self {
        UpdateAccumulator { sum_h: vec![T::zero(); state.eta_h.len()], sum_v: vec![T::zero(); state.eta_v.len()], count: 0, last: None }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn add(&mut self, client: u32, d_eta_h: &[T], d_eta_v: &[T]) -> Result<(), ProtocolError> {
        if self.last.is_some_and(|l| l >= client) {
            return Err(ProtocolError::Config(format!("updates must arrive in ascending client order ({client} after {:?})", self.last)));
        }
        if d_eta_h.len() != self.sum_h.len() {
            return Err(ProtocolError::Length { what: "hypernetwork update", expected: self.sum_h.len(), actual: d_eta_h.len() });
        }
        if d_eta_v.len() != self.sum_v.len() {
            return Err(ProtocolError::Length { what: "embedding update", expected: self.sum_v.len(), actual: d_eta_v.len() });
        }
        for (s, &d) in self.sum_h.iter_mut().zip(d_eta_h) {
            *s += d;
        }
        for (s, &d) in self.sum_v.iter_mut().zip(d_eta_v) {
            *s += d;
        }
        self.count += 1;
        self.last = Some(client);
        Ok(())
    }

    /// `η ← η − (1/c)ΣΔη − β·k·2λ·η` for both networks (or the heavy-ball
    /// variant of the same step when server momentum is enabled).
    pub fn apply(self, state: &mut ServerState<T>, cfg: &RoundConfig) -> Result<(), ProtocolError> {
        if self.count == 0 {
            return Err(ProtocolError::EmptyUpdates);
        }
        let c = T::of(self.count as f64);
        let decay = cfg.beta * cfg.local_steps as f64 * 2.0;
        let mu = cfg.server_momentum;
        step_params(&mut state.eta_h, &self.sum_h, c, T::of(decay * cfg.lambda_h), mu, &mut state.velocity_h);
        step_params(&mut state.eta_v, &self.sum_v, c, T::of(decay * cfg.lambda_v), mu, &mut state.velocity_v);
        Ok(())
    }
}

fn step_params<T: Scalar>(eta: &mut ParamVector<T>, sum: &[T], c: T, decay: T, mu: f64, vel: &mut GradVector<T>) {
    if mu > 0.0 {
        if vel.len() != eta.len() {
            *vel = GradVector::zeros(eta.len());
        }
        let mu = T::of(mu);
        for ((e, v), &s) in eta.iter_mut().zip(vel.iter_mut()).zip(sum) {
            *v = mu * *v + (s / c + decay * *e);
            *e -= *v;
        }
    } else {
        for (e, &s) in eta.iter_mut().zip(sum) {
            *e = *e - s / c - decay * *e;
        }
    }
}

/// Applies a set of `(client id, Δη_h, Δη_v)` contributions.
pub fn server_apply_updates<T: Scalar>(
    state: &mut ServerState<T>,
    updates: &[(u32, GradVector<T>, GradVector<T>)],
    cfg: &RoundConfig,
) -> Result<(), ProtocolError> {
    if updates.is_empty() {
        return Err(ProtocolError::EmptyUpdates);
    }
    let mut order: Vec<&(u32, GradVector<T>, GradVector<T>)> = updates.iter().collect();
    order.sort_by_key(|u| u.0);
    let mut acc = UpdateAccumulator::new(state);
    for (id, h, v) in order {
        acc.add(*id, h, v)?;
    }
    acc.apply(state, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: u32,
    pub selected: Vec<u32>,
}

/// Announces a session to every link.
pub fn start_session<T: Scalar, L: ClientLink<T>>(links: &mut [L], cfg: &SessionConfig, round: u32) -> Result<(), ProtocolError> {
    for link in links.iter_mut() {
        let id = link.client_id();
        link.notify(Envelope::new(round, id, Message::Control(Control::Session(cfg.clone()))))?;
    }
    Ok(())
}

pub fn stop_session<T: Scalar, L: ClientLink<T>>(links: &mut [L], round: u32) -> Result<(), ProtocolError> {
    for link in links.iter_mut() {
        let id = link.client_id();
        link.notify(Envelope::new(round, id, Message::Control(Control::Shutdown)))?;
    }
    Ok(())
}

/// Validates the addressing and kind of a client's reply.
pub fn expect_reply<T>(
    link_id: u32,
    round: u32,
    reply: Envelope<T>,
    expected: MessageKind,
) -> Result<Message<T>, ProtocolError> {
    if reply.client_id != link_id {
        return Err(ProtocolError::ClientMismatch { expected: link_id, got: reply.client_id });
    }
    if reply.round != round {
        return Err(ProtocolError::RoundMismatch { client: link_id, expected: round, got: reply.round });
    }
    let got = reply.message.kind();
    if got != expected {
        let name = match expected {
            MessageKind::EmbedWeights => "EmbedWeights",
            MessageKind::Descriptor => "Descriptor",
            MessageKind::PersonalModel => "PersonalModel",
            MessageKind::ModelDelta => "ModelDelta",
            MessageKind::DescriptorGrad => "DescriptorGrad",
            MessageKind::EmbedDelta => "EmbedDelta",
            MessageKind::RoundControl => "RoundControl",
        };
        return Err(ProtocolError::Sequence { client: link_id, expected: name, got });
    }
    Ok(reply.message)
}

/// Length and finiteness check for a received vector.
pub fn check_vector<T: Scalar>(what: &'static str, v: &[T], expected: usize) -> Result<(), ProtocolError> {
    if v.len() != expected {
        return Err(ProtocolError::Length { what, expected, actual: v.len() });
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(ProtocolError::NonFinite(what));
    }
    Ok(())
}

/// One training round: selects `c` of the available clients uniformly
/// without replacement and runs the six-message exchange with each, in
/// ascending client-id order, before updating both networks. On any error
/// the state is left untouched.
pub fn train_round<T: Scalar, L: ClientLink<T>, R: Rng + ?Sized>(
    state: &mut ServerState<T>,
    links: &mut [L],
    cfg: &RoundConfig,
    rng: &mut R,
) -> Result<RoundReport, ProtocolError> {
    cfg.validate()?;
    if links.len() < cfg.clients_per_round {
        return Err(ProtocolError::InsufficientClients { available: links.len(), required: cfg.clients_per_round });
    }
    let mut chosen = rand::seq::index::sample(rng, links.len(), cfg.clients_per_round).into_vec();
    chosen.sort_by_key(|&i| links[i].client_id());
    let round = state.round_index;
    let mut acc = UpdateAccumulator::new(state);
    let mut selected = Vec::with_capacity(chosen.len());
    for i in chosen {
        let link = &mut links[i];
        let id = link.client_id();
        let reply = link.request(Envelope::new(round, id, Message::EmbedWeights(state.eta_v.clone())))?;
        let Message::Descriptor(v) = expect_reply(id, round, reply, MessageKind::Descriptor)? else { unreachable!() };
        check_vector("descriptor", &v.0, state.descriptor_dim())?;

        let theta = state.generate(&v)?;
        let reply = link.request(Envelope::new(round, id, Message::PersonalModel(theta)))?;
        let Message::ModelDelta(dtheta) = expect_reply(id, round, reply, MessageKind::ModelDelta)? else { unreachable!() };
        check_vector("model delta", &dtheta, state.model_dim())?;

        let (d_eta_h, dv) = server_hyper_backprop(&dtheta, &v, state)?;
        let reply = link.request(Envelope::new(round, id, Message::DescriptorGrad(dv)))?;
        let Message::EmbedDelta(d_eta_v) = expect_reply(id, round, reply, MessageKind::EmbedDelta)? else { unreachable!() };
        check_vector("embedding delta", &d_eta_v, state.eta_v.len())?;

        acc.add(id, &d_eta_h, &d_eta_v)?;
        selected.push(id);
    }
    acc.apply(state, cfg)?;
    state.round_index += 1;
    Ok(RoundReport { round, selected })
}

/// Serves one prediction request: three messages, no server-side change.
pub fn serve_predict<T: Scalar, L: ClientLink<T> + ?Sized>(
    state: &ServerState<T>,
    link: &mut L,
    round: u32,
) -> Result<ParamVector<T>, ProtocolError> {
    let id = link.client_id();
    let reply = link.request(Envelope::new(round, id, Message::EmbedWeights(state.eta_v.clone())))?;
    let Message::Descriptor(v) = expect_reply(id, round, reply, MessageKind::Descriptor)? else { unreachable!() };
    check_vector("descriptor", &v.0, state.descriptor_dim())?;
    let theta = state.generate(&v)?;
    link.notify(Envelope::new(round, id, Message::PersonalModel(theta.clone())))?;
    Ok(theta)
}

/// Personalised model for a client from a descriptor batch of
/// `min(b, |S|)` examples drawn without replacement.
pub fn predict<T: Scalar, R: Rng + ?Sized>(
    data: &ExampleBatch<T>,
    state: &ServerState<T>,
    b: usize,
    unlabeled: bool,
    rng: &mut R,
) -> Result<ParamVector<T>, ProtocolError> {
    if data.is_empty() {
        return Err(ModelError::EmptyBatch.into());
    }
    let idx = super::sample_descriptor_batch(data.len(), b.max(1), rng);
    let batch = data.select(&idx);
    let v = if unlabeled {
        compute_descriptor_unlabeled(&batch, &state.embed, &state.eta_v, state.embed_kind)?
    } else {
        compute_descriptor(&batch, &state.embed, &state.eta_v, state.embed_kind)?
    };
    state.generate(&v)
}
