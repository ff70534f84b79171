#![allow(dead_code)]

use pefll_core::models::{EmbeddingKind, ExampleBatch};
use pefll_core::nn::{init_params, LayerSpec, NetworkSpec, ParamVector, Shape};
use pefll_core::protocol::{ClientNode, DirectLink, ServerState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CLASSES: usize = 3;
pub const SIDE: usize = 6;

/// 47-parameter convolutional client model on 1×6×6 images.
pub fn tiny_client() -> NetworkSpec {
    NetworkSpec::new(
        Shape::new(vec![1, SIDE, SIDE]).unwrap(),
        vec![
            LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 8, outputs: CLASSES },
            LayerSpec::SoftmaxOutput,
        ],
    )
    .unwrap()
}

/// Convolutional embedding over image plus one-hot label planes.
pub fn tiny_embed(dim: usize) -> NetworkSpec {
    NetworkSpec::new(
        Shape::new(vec![1 + CLASSES, SIDE, SIDE]).unwrap(),
        vec![
            LayerSpec::Conv2d { in_channels: 1 + CLASSES, out_channels: 2, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 8, outputs: dim },
        ],
    )
    .unwrap()
}

pub fn tiny_hyper(dim: usize, out: usize) -> NetworkSpec {
    NetworkSpec::new(
        Shape::new(vec![dim]).unwrap(),
        vec![LayerSpec::Dense { inputs: dim, outputs: 10 }, LayerSpec::Relu, LayerSpec::Dense { inputs: 10, outputs: out }],
    )
    .unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> ExampleBatch<f64> {
    let pixels = (0..n * SIDE * SIDE).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..CLASSES)).collect();
    ExampleBatch::labeled([1, SIDE, SIDE], pixels, labels).unwrap()
}

pub struct Tiny {
    pub client: NetworkSpec,
    pub state: ServerState<f64>,
    pub data: Vec<ExampleBatch<f64>>,
}

pub fn tiny_setup(seed: u64, clients: usize, per_client: usize) -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let client = tiny_client();
    let embed = tiny_embed(3);
    let hyper = tiny_hyper(3, client.param_count());
    let eta_v: ParamVector<f64> = jitter(init_params(&embed, &mut rng), &mut rng);
    let eta_h: ParamVector<f64> = jitter(init_params(&hyper, &mut rng), &mut rng);
    let state = ServerState::new(hyper, embed, EmbeddingKind::LenetConv, eta_h, eta_v).unwrap();
    let data = (0..clients).map(|_| random_batch(&mut rng, per_client)).collect();
    Tiny { client, state, data }
}

fn jitter(mut p: ParamVector<f64>, rng: &mut ChaCha8Rng) -> ParamVector<f64> {
    for v in p.iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    p
}

impl Tiny {
    pub fn links(&self) -> Vec<DirectLink<f64>> {
        self.data
            .iter()
            .enumerate()
            .map(|(i, d)| {
                DirectLink::new(
                    ClientNode::new(i as u32, d.clone(), &self.client, self.state.embed.clone(), EmbeddingKind::LenetConv)
                        .unwrap(),
                )
            })
            .collect()
    }
}
