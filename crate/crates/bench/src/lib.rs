//! Shared fixtures for the benchmarks.

use diffirm::config::{Method, TrainConfig};
use diffirm::nn::standard_normal;
use diffirm::scm::{generate_graph_scm, graph_train_config, GraphScmSpec};
use diffirm::trainer::{prepare, TrainData};
use diffirm::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    standard_normal(&mut ChaCha8Rng::seed_from_u64(seed), shape)
}

/// Training data and config on the default planted-causal graph.
pub fn graph_fixture(method: Method) -> (TrainData, TrainConfig) {
    let spec = GraphScmSpec::default();
    let scm = generate_graph_scm(&spec).expect("fixture");
    let cfg = graph_train_config(&spec, method, 0);
    let prep = prepare(&scm.dataset, &scm.split, &cfg).expect("prepare");
    (prep.data, cfg)
}
