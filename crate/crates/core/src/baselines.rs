//! Reference algorithms: FedAvg over the same links as the main protocol, and
//! purely local training.

use rand::Rng;

use crate::models::ExampleBatch;
use crate::nn::{init_params, NetworkSpec, ParamVector, Scalar};
use crate::protocol::{
    check_vector, expect_reply, local_sgd, ClientLink, Envelope, LocalSgd, Message, MessageKind, ProtocolError,
    RoundConfig, RoundReport,
};

/// Default number of passes over a client's data for the Local baseline.
pub const LOCAL_EPOCHS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalModelState<T> {
    pub theta: ParamVector<T>,
    pub round_index: u32,
}

impl<T: Scalar> GlobalModelState<T> {
    pub fn initialize<R: Rng + ?Sized>(client_model: &NetworkSpec, rng: &mut R) -> Self {
        GlobalModelState { theta: init_params(client_model, rng), round_index: 0 }
    }
}

/// One FedAvg round: the selected clients each train the broadcast model for
/// `k` local steps and the server replaces it with the unweighted mean of the
/// results, summed in ascending client-id order.
pub fn fedavg_round<T: Scalar, L: ClientLink<T>, R: Rng + ?Sized>(
    state: &mut GlobalModelState<T>,
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
    let mut sum = vec![T::zero(); state.theta.len()];
    let mut selected = Vec::with_capacity(chosen.len());
    for i in chosen {
        let link = &mut links[i];
        let id = link.client_id();
        let reply = link.request(Envelope::new(round, id, Message::PersonalModel(state.theta.clone())))?;
        let Message::ModelDelta(delta) = expect_reply(id, round, reply, MessageKind::ModelDelta)? else { unreachable!() };
        check_vector("model delta", &delta, state.theta.len())?;
        for (s, &d) in sum.iter_mut().zip(delta.iter()) {
            *s += d;
        }
        selected.push(id);
    }
    let c = T::of(selected.len() as f64);
    for (t, &s) in state.theta.iter_mut().zip(&sum) {
        *t -= s / c;
    }
    state.round_index += 1;
    Ok(RoundReport { round, selected })
}

/// Trains a freshly initialised model on one client's data alone.
pub fn local_train<T: Scalar, R: Rng + ?Sized>(
    data: &ExampleBatch<T>,
    client_model: &NetworkSpec,
    epochs: usize,
    sgd: &LocalSgd,
    rng: &mut R,
) -> Result<ParamVector<T>, ProtocolError> {
    let theta0 = init_params(client_model, rng);
    if epochs == 0 {
        return Ok(theta0);
    }
    let logits = if client_model.ends_with_softmax() { client_model.logits_spec() } else { client_model.clone() };
    let batch = sgd.batch.max(1);
    let steps = epochs * data.len().div_ceil(batch);
    local_sgd(&theta0, data, &logits, &LocalSgd { steps, ..*sgd }, rng)
}
