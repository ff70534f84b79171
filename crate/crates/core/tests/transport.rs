mod common;

use std::thread;

use common::tiny_setup;
use pefll_core::baselines::{fedavg_round, GlobalModelState};
use pefll_core::models::{
    build_client_model, build_embedding_net, build_hypernetwork, EmbeddingKind, ExampleBatch, HyperConfig, HyperSize,
};
use pefll_core::nn::{GradVector, ParamVector};
use pefll_core::protocol::{
    selection_rng, serve_predict, start_session, train_round, ClientLink, ClientNode, DirectLink, Envelope, Message,
    MessageKind, ProtocolError, RoundConfig, ServerState, SessionConfig, SessionKind,
};
use pefll_core::transport::{
    connect_client, decode_frame, decode_message, encode_frame, encode_message, run_client, run_server, Frame,
    LoopbackLink, Meter, TcpServer, HEADER_LEN,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Tiny32 {
    client: pefll_core::nn::NetworkSpec,
    state: ServerState<f32>,
    data: Vec<ExampleBatch<f32>>,
}

fn tiny32(seed: u64, clients: usize) -> Tiny32 {
    let t = tiny_setup(seed, clients, 7);
    let cast = |p: &ParamVector<f64>| ParamVector(p.iter().map(|&x| x as f32).collect());
    let state = ServerState::new(
        t.state.hyper.clone(),
        t.state.embed.clone(),
        EmbeddingKind::LenetConv,
        cast(&t.state.eta_h),
        cast(&t.state.eta_v),
    )
    .unwrap();
    Tiny32 { client: t.client, state, data: t.data.iter().map(|d| d.cast()).collect() }
}

impl Tiny32 {
    fn nodes(&self) -> Vec<ClientNode<f32>> {
        self.data
            .iter()
            .enumerate()
            .map(|(i, d)| {
                ClientNode::new(i as u32, d.clone(), &self.client, self.state.embed.clone(), EmbeddingKind::LenetConv)
                    .unwrap()
            })
            .collect()
    }
}

fn config(c: usize) -> RoundConfig {
    RoundConfig { local_steps: 3, local_batch: 4, descriptor_batch: 5, clients_per_round: c, ..RoundConfig::default() }
}

fn run_rounds<L: ClientLink<f32>>(state: &mut ServerState<f32>, links: &mut [L], cfg: &RoundConfig, rounds: u32) {
    start_session(links, &SessionConfig::new(SessionKind::Pefll, 5, cfg), 0).unwrap();
    for r in 0..rounds {
        train_round(state, links, cfg, &mut selection_rng(5, r)).unwrap();
    }
}

fn kind_strategy() -> impl Strategy<Value = MessageKind> {
    (1u8..=7).prop_map(|c| MessageKind::from_code(c).unwrap())
}

proptest! {
    #[test]
    fn frames_round_trip(kind in kind_strategy(), round: u32, client: u32, payload in prop::collection::vec(any::<u8>(), 0..300)) {
        let frame = Frame { kind, round, client_id: client, payload };
        let bytes = encode_frame(&frame).unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + frame.payload.len());
        let (back, used) = decode_frame(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, frame);
    }

    #[test]
    fn tensor_messages_round_trip(kind in 1u8..=6, round: u32, client: u32, values in prop::collection::vec(-1e6f32..1e6, 0..64)) {
        let message = match kind {
            1 => Message::EmbedWeights(ParamVector(values)),
            2 => Message::Descriptor(pefll_core::models::Descriptor(values)),
            3 => Message::PersonalModel(ParamVector(values)),
            4 => Message::ModelDelta(GradVector(values)),
            5 => Message::DescriptorGrad(GradVector(values)),
            _ => Message::EmbedDelta(GradVector(values)),
        };
        let env = Envelope::new(round, client, message);
        let frame = encode_message(&env);
        prop_assert_eq!(frame.kind.code(), kind);
        let bytes = encode_frame(&frame).unwrap();
        let back: Envelope<f32> = decode_message(&decode_frame(&bytes).unwrap().0).unwrap();
        prop_assert_eq!(back, env);
    }
}

#[test]
fn loopback_matches_direct_links_bitwise() {
    let t = tiny32(3, 4);
    let cfg = config(2);
    let mut direct_state = t.state.clone();
    let mut direct: Vec<_> = t.nodes().into_iter().map(DirectLink::new).collect();
    run_rounds(&mut direct_state, &mut direct, &cfg, 3);

    let meter = Meter::new();
    let mut loop_state = t.state.clone();
    let mut looped: Vec<_> = t.nodes().into_iter().map(|n| LoopbackLink::new(n, meter.clone())).collect();
    run_rounds(&mut loop_state, &mut looped, &cfg, 3);

    assert_eq!(direct_state, loop_state);
    let logged = direct.iter().flat_map(|l| l.log.iter().copied()).filter(|(_, k)| *k != MessageKind::RoundControl).count();
    let metered = meter.records().iter().filter(|r| r.kind != MessageKind::RoundControl).count();
    assert_eq!(logged, metered);
    assert_eq!(metered, 3 * 2 * 6);
}

#[test]
fn tcp_matches_loopback_bitwise() {
    let t = tiny32(8, 3);
    let cfg = config(2);
    let rounds = 2;

    let loop_meter = Meter::new();
    let mut loop_state = t.state.clone();
    let mut looped: Vec<_> = t.nodes().into_iter().map(|n| LoopbackLink::new(n, loop_meter.clone())).collect();
    run_rounds(&mut loop_state, &mut looped, &cfg, rounds);

    let server = TcpServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap();
    let handles: Vec<_> = t
        .nodes()
        .into_iter()
        .rev()
        .map(|node| thread::spawn(move || run_client(connect_client(addr, 100).unwrap(), node).unwrap()))
        .collect();
    let tcp_meter = Meter::new();
    let mut tcp_state = t.state.clone();
    run_server(&server, 3, &tcp_meter, |links| {
        assert_eq!(links.iter().map(|l| l.client_id()).collect::<Vec<_>>(), vec![0, 1, 2]);
        run_rounds(&mut tcp_state, links, &cfg, rounds);
        Ok(())
    })
    .unwrap();
    for h in handles {
        h.join().unwrap();
    }

    assert_eq!(tcp_state, loop_state);
    let strip = |m: &Meter| m.records().into_iter().filter(|r| r.kind != MessageKind::RoundControl).collect::<Vec<_>>();
    assert_eq!(strip(&tcp_meter), strip(&loop_meter));
    assert_eq!(tcp_meter.by_round(), loop_meter.by_round());
}

#[test]
fn tcp_client_errors_surface_as_link_failures() {
    let t = tiny32(9, 1);
    let server = TcpServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr().unwrap();
    let node = t.nodes().pop().unwrap();
    let handle = thread::spawn(move || run_client(connect_client(addr, 100).unwrap(), node));
    let meter = Meter::new();
    let result = run_server::<f32, _>(&server, 1, &meter, |links| {
        // A model delta is never valid server-to-client traffic.
        links[0].request(Envelope::new(0, 0, Message::ModelDelta(GradVector(vec![1.0]))))
    });
    assert!(matches!(result, Err(pefll_core::transport::TransportError::Protocol(ProtocolError::Link { client: 0, .. }))));
    assert!(matches!(handle.join().unwrap(), Err(pefll_core::transport::TransportError::Protocol(ProtocolError::Sequence { .. }))));
}

#[test]
fn predict_exchange_is_three_frames() {
    let t = tiny32(4, 1);
    let meter = Meter::new();
    let mut link = LoopbackLink::new(t.nodes().pop().unwrap(), meter.clone());
    let theta = serve_predict(&t.state, &mut link, 0).unwrap();
    let records = meter.records();
    assert_eq!(records.iter().map(|r| r.kind.code()).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(records.iter().map(|r| r.upload).collect::<Vec<_>>(), vec![false, true, false]);
    let vec_frame = |n: usize| HEADER_LEN + 8 + 4 * n;
    assert_eq!(records[0].bytes, vec_frame(t.state.eta_v.len()));
    assert_eq!(records[1].bytes, vec_frame(t.state.descriptor_dim()));
    assert_eq!(records[2].bytes, vec_frame(t.client.param_count()));
    assert_eq!(link.node.model(), Some(&theta));
}

#[test]
fn fedavg_uses_only_model_frames() {
    let t = tiny32(5, 3);
    let cfg = config(3);
    let meter = Meter::new();
    let mut links: Vec<_> = t.nodes().into_iter().map(|n| LoopbackLink::new(n, meter.clone())).collect();
    let mut state = GlobalModelState::<f32>::initialize(&t.client, &mut ChaCha8Rng::seed_from_u64(1));
    start_session(&mut links, &SessionConfig::new(SessionKind::FedAvg, 1, &cfg), 0).unwrap();
    for r in 0..2 {
        fedavg_round(&mut state, &mut links, &cfg, &mut selection_rng(1, r)).unwrap();
    }
    let kinds: std::collections::BTreeSet<_> = meter
        .records()
        .iter()
        .filter(|r| r.kind != MessageKind::RoundControl)
        .map(|r| r.kind.code())
        .collect();
    assert_eq!(kinds.into_iter().collect::<Vec<_>>(), vec![3, 4]);
    assert_eq!(meter.by_round()[&1].frames, 6);
}

#[test]
fn full_size_round_costs_about_twice_fedavg() {
    let classes = 10;
    let client = build_client_model(classes).unwrap();
    let dim = 25;
    let embed = build_embedding_net(EmbeddingKind::LenetConv, classes, dim).unwrap();
    let hyper = build_hypernetwork(&HyperConfig::new(HyperSize::Small, dim, client.param_count())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let state = ServerState::<f32>::initialize(hyper, embed.clone(), EmbeddingKind::LenetConv, &client, &mut rng).unwrap();
    let pixels: Vec<f32> = (0..4 * 3 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let data = ExampleBatch::labeled([3, 32, 32], pixels, vec![0, 1, 2, 3]).unwrap();
    let node = || ClientNode::new(0, data.clone(), &client, embed.clone(), EmbeddingKind::LenetConv).unwrap();
    let cfg = RoundConfig { local_steps: 1, local_batch: 4, descriptor_batch: 4, ..RoundConfig::default() };

    let pefll_meter = Meter::new();
    let mut links = vec![LoopbackLink::new(node(), pefll_meter.clone())];
    let mut s = state.clone();
    run_rounds(&mut s, &mut links, &cfg, 1);

    let fedavg_meter = Meter::new();
    let mut links = vec![LoopbackLink::new(node(), fedavg_meter.clone())];
    let mut g = GlobalModelState::<f32>::initialize(&client, &mut rng);
    start_session(&mut links, &SessionConfig::new(SessionKind::FedAvg, 0, &cfg), 0).unwrap();
    fedavg_round(&mut g, &mut links, &cfg, &mut rng).unwrap();

    let total = |m: &Meter| {
        let t = m.round(0);
        (t.up + t.down) as f64
    };
    let ratio = total(&pefll_meter) / total(&fedavg_meter);
    assert!((1.8..=2.3).contains(&ratio), "ratio {ratio}");
}
