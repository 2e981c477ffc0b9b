#![allow(dead_code)]

use rand::Rng as _;
use seqrec_core::dataio::{batch_iter, leave_one_out_split, Batch, InteractionDataset, SplitDataset, UserSequence};
use seqrec_core::kernel::{seeded_rng, KernelError, Tape, Tensor};
use seqrec_core::model::{bind, init_params, DropoutRngs, ModelConfig, ModelParams};
use seqrec_core::trainer::{batch_loss, TrainConfig};
use seqrec_core::transition::{build_transition_graph, TransitionGraph};

/// Random sequences over items `1..=item_count`.
pub fn random_corpus(seed: u64, item_count: usize, users: usize, min_len: usize, max_len: usize) -> InteractionDataset {
    let mut rng = seeded_rng(seed);
    let seqs = (0..users)
        .map(|u| {
            let len = rng.random_range(min_len..=max_len);
            UserSequence { user: u as u64, items: (0..len).map(|_| rng.random_range(1..=item_count)).collect() }
        })
        .collect();
    let mut ds = InteractionDataset::from_sequences(seqs).expect("non-empty");
    ds.item_count = item_count;
    ds
}

pub struct Fixture {
    pub split: SplitDataset,
    pub graph: TransitionGraph,
    pub batch: Batch,
    pub params: ModelParams,
}

pub fn fixture(seed: u64, model: &ModelConfig, item_count: usize, users: usize) -> Fixture {
    let ds = random_corpus(seed, item_count, users, 4, model.max_len + 3);
    let split = leave_one_out_split(&ds);
    let graph = build_transition_graph(split.train_sequences(), item_count, 1).unwrap();
    let batch = batch_iter(&split, model.max_len, users, &mut seeded_rng(seed)).remove(0);
    let params = init_params(model, item_count, &mut seeded_rng(seed)).unwrap();
    Fixture { split, graph, batch, params }
}

/// The full training loss as a function of the active parameter tensors.
pub fn loss_objective<'a>(
    fx: &'a Fixture,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
) -> impl Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>), KernelError> + 'a {
    move |point: &[Tensor]| {
        let mut params = fx.params.clone();
        for (slot, value) in params.active_tensors_mut(model).into_iter().zip(point) {
            *slot = value.clone();
        }
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params, model, true);
        let mut rngs = DropoutRngs::from_seed(0);
        let terms = batch_loss(&mut tape, &bound, model, train, &fx.batch, &fx.graph, &mut rngs, false)
            .map_err(|e| KernelError::Contract(e.to_string()))?;
        let value = tape.value(terms.total).data()[0];
        tape.backward(terms.total)?;
        Ok((value, bound.vars().into_iter().map(|v| tape.grad_tensor(v)).collect()))
    }
}

pub fn active_point(params: &ModelParams, model: &ModelConfig) -> Vec<Tensor> {
    params.active_tensors(model).into_iter().cloned().collect()
}

/// Active tensors with Gaussian noise of standard deviation `scale` added,
/// padding embedding row left at zero.
pub fn perturbed_point(params: &ModelParams, model: &ModelConfig, seed: u64, scale: f64) -> Vec<Tensor> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, scale).unwrap();
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let mut point = active_point(params, model);
    for (i, t) in point.iter_mut().enumerate() {
        let skip = if i == 0 { t.cols() } else { 0 };
        for v in &mut t.data_mut()[skip..] {
            *v += normal.sample(&mut rng);
        }
    }
    point
}
