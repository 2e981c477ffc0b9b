mod common;

use common::{fixture, loss_objective, perturbed_point};
use seqrec_core::kernel::grad_check;
use seqrec_core::model::ModelConfig;
use seqrec_core::trainer::{GraphTerm, TrainConfig};

fn toy_model() -> ModelConfig {
    ModelConfig { dim: 8, max_len: 6, num_blocks: 1, dropout: 0.0, ..Default::default() }
}

#[test]
fn full_loss_matches_central_differences() {
    let model = toy_model();
    let train = TrainConfig { kd_weight: 0.1, l2_weight: 1e-3, ..Default::default() };
    for seed in 0..5 {
        let fx = fixture(seed, &model, 20, 8);
        let point = perturbed_point(&fx.params, &model, seed, 0.5);
        let err = grad_check(loss_objective(&fx, &model, &train), &point, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn short_only_and_neighbor_term_gradients() {
    let short = ModelConfig { short_only: true, ..toy_model() };
    let neighbor = TrainConfig {
        kd_weight: 0.05,
        graph_term: GraphTerm::NeighborDistance { neighbors: 2 },
        ..Default::default()
    };
    for (model, train) in [(short, TrainConfig::default()), (ModelConfig { alpha: 0.0, ..toy_model() }, neighbor)] {
        let fx = fixture(11, &model, 12, 5);
        let point = perturbed_point(&fx.params, &model, 11, 0.5);
        let err = grad_check(loss_objective(&fx, &model, &train), &point, 1e-5).unwrap();
        assert!(err < 1e-4, "{model:?}: relative error {err:e}");
    }
}
