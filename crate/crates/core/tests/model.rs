use std::rc::Rc;

use proptest::prelude::*;
use rand::Rng as _;
use seqrec_core::kernel::{seeded_rng, KernelError, Tape, Tensor};
use seqrec_core::model::{
    bind, branch_forward, causal_attention, embed_sequence, ges_matrix, ges_smooth, ges_smooth_var, grareg_edges,
    grareg_loss, init_params, item_logits, kd_loss, l2_penalty, l2_penalty_var, load_checkpoint, long_query_pool,
    mqsa_forward, rec_loss, save_checkpoint, score_items, total_loss, DropoutRngs, ModelConfig, ModelParams,
    QuerySource, SeqBatch,
};
use seqrec_core::transition::{build_transition_graph, TransitionGraph};

fn cfg() -> ModelConfig {
    ModelConfig { dim: 6, max_len: 5, num_blocks: 2, long_query_len: 3, dropout: 0.0, ..Default::default() }
}

fn graph(seqs: &[Vec<usize>], items: usize) -> TransitionGraph {
    build_transition_graph(seqs.iter().map(Vec::as_slice), items, 1).unwrap()
}

/// Weights scaled up so attention is far from uniform.
fn params(config: &ModelConfig, items: usize, seed: u64) -> ModelParams {
    let mut p = init_params(config, items, &mut seeded_rng(seed)).unwrap();
    let mut rng = seeded_rng(seed + 1000);
    for t in p.active_tensors_mut(&ModelConfig { short_only: false, ..config.clone() }) {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    p.item_embeddings.row_mut(0).fill(0.0);
    p
}

fn forward_reps(p: &ModelParams, config: &ModelConfig, seq: &SeqBatch) -> (Tensor, Option<Tensor>, Option<Tensor>) {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, p, config, false);
    let out = mqsa_forward(&mut tape, &bound, config, seq, &mut DropoutRngs::from_seed(0), false).unwrap();
    let get = |v: Option<_>| v.map(|v| tape.value(v).clone());
    (tape.value(out.seq_reps).clone(), get(out.short), get(out.long))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn sample_seq() -> SeqBatch {
    SeqBatch::new(3, 5, vec![0, 0, 3, 1, 4, 2, 5, 1, 1, 3, 0, 0, 0, 0, 6]).unwrap()
}

#[test]
fn embedding_examples() {
    let config = cfg();
    let mut p = params(&config, 6, 1);
    let seq = SeqBatch::new(2, 5, vec![0, 0, 3, 1, 4, 0, 0, 0, 0, 0]).unwrap();

    let mut tape = Tape::new();
    let bound = bind(&mut tape, &p, &config, false);
    let ev = embed_sequence(&mut tape, &bound, &seq).unwrap();
    let e = tape.value(ev).clone();
    for (pos, &item) in [0usize, 0, 3, 1, 4].iter().enumerate() {
        for c in 0..6 {
            let want = p.item_embeddings.get(item, c) + p.positional_embeddings.get(pos, c);
            assert_eq!(e.get(pos, c), want);
        }
    }
    for pos in 0..5 {
        assert_eq!(e.row(5 + pos), p.positional_embeddings.row(pos));
    }

    p.positional_embeddings = Tensor::zeros(vec![5, 6]);
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &p, &config, false);
    let ev = embed_sequence(&mut tape, &bound, &seq).unwrap();
    let e = tape.value(ev).clone();
    assert_eq!(e.row(3), p.item_embeddings.row(1));

    let bad = SeqBatch::new(1, 5, vec![0, 0, 0, 0, 7]).unwrap();
    assert!(matches!(embed_sequence(&mut tape, &bound, &bad), Err(KernelError::Index(_))));
}

/// Mean over real positions in `[t - window + 1, t]`, or the row itself if none.
fn windowed_mean(x: &Tensor, seq: &SeqBatch, window: usize) -> Tensor {
    let (n, d) = (seq.max_len, x.cols());
    let mut out = Tensor::zeros(vec![seq.batch * n, d]);
    for b in 0..seq.batch {
        for t in 0..n {
            let real: Vec<usize> =
                (0..=t).filter(|&s| t - s < window && seq.items[b * n + s] != 0).collect();
            let src: Vec<usize> = if real.is_empty() { vec![t] } else { real };
            for c in 0..d {
                let mean = src.iter().map(|&s| x.get(b * n + s, c)).sum::<f64>() / src.len() as f64;
                out.row_mut(b * n + t)[c] = mean;
            }
        }
    }
    out
}

#[test]
fn pooling_matches_windowed_mean() {
    let seq = sample_seq();
    let mut rng = seeded_rng(2);
    let x = Tensor::new(vec![15, 4], (0..60).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());

    let one = long_query_pool(&mut tape, xv, &seq, 1).unwrap();
    assert_eq!(tape.value(one), &x);

    let two = long_query_pool(&mut tape, xv, &seq, 2).unwrap();
    for c in 0..4 {
        let want = (x.get(2, c) + x.get(3, c)) / 2.0;
        assert!((tape.value(two).get(3, c) - want).abs() < 1e-15);
    }

    let three = long_query_pool(&mut tape, xv, &seq, 3).unwrap();
    let oracle = windowed_mean(&x, &seq, 3);
    for (a, b) in tape.value(three).data().iter().zip(oracle.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(matches!(long_query_pool(&mut tape, xv, &seq, 0), Err(KernelError::Parameter(_))));
}

#[test]
fn attention_hand_oracle() {
    let seq = SeqBatch::new(1, 2, vec![1, 2]).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0]]).unwrap());
    let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let out = causal_attention(&mut tape, x, x, eye, eye, eye, &seq).unwrap();
    let out = tape.value(out);
    assert_eq!(out.row(0), &[1.0, 0.0]);
    assert!((out.get(1, 0) - 0.532_943_679_499_457_2).abs() < 1e-10);
    assert!((out.get(1, 1) - 1.868_225_282_002_171).abs() < 1e-10);
}

#[test]
fn single_position_attends_to_itself() {
    let seq = SeqBatch::new(1, 1, vec![3]).unwrap();
    let mut rng = seeded_rng(5);
    let mut rand = |r, c| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (xv, wq, wk, wv) = (rand(1, 3), rand(3, 3), rand(3, 3), rand(3, 3));
    let mut tape = Tape::new();
    let x = tape.constant(xv.clone());
    let (q, k, v) = (tape.constant(wq), tape.constant(wk), tape.constant(wv.clone()));
    let out = causal_attention(&mut tape, x, x, q, k, v, &seq).unwrap();
    for c in 0..3 {
        let want: f64 = (0..3).map(|j| xv.get(0, j) * wv.get(j, c)).sum();
        assert!((tape.value(out).get(0, c) - want).abs() < 1e-15);
    }
}

#[test]
fn causality() {
    let config = cfg();
    let p = params(&config, 6, 3);
    let base = vec![2usize, 5, 1, 3, 4];
    let (reps, _, _) = forward_reps(&p, &config, &SeqBatch::new(1, 5, base.clone()).unwrap());
    for t in 0..4 {
        let mut changed = base.clone();
        for (s, v) in changed.iter_mut().enumerate().skip(t + 1) {
            *v = (*v + s) % 6 + 1;
        }
        let (other, _, _) = forward_reps(&p, &config, &SeqBatch::new(1, 5, changed).unwrap());
        for s in 0..=t {
            let same = reps.row(s).iter().zip(other.row(s)).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "t={t} s={s}");
        }
    }
}

#[test]
fn branch_mixing() {
    let seq = sample_seq();
    let full = ModelConfig { alpha: 0.5, ..cfg() };
    let p = params(&full, 6, 4);
    let (mixed, short, long) = forward_reps(&p, &full, &seq);
    let (short, long) = (short.unwrap(), long.unwrap());
    for ((m, s), l) in mixed.data().iter().zip(short.data()).zip(long.data()) {
        assert!((m - 0.5 * (s + l)).abs() < 1e-15);
    }

    let (only_short, _, none) = forward_reps(&p, &ModelConfig { alpha: 1.0, ..full.clone() }, &seq);
    assert!(none.is_none());
    assert_eq!(bits(&only_short), bits(&short));
    let (only_long, none, _) = forward_reps(&p, &ModelConfig { alpha: 0.0, ..full.clone() }, &seq);
    assert!(none.is_none());
    assert_eq!(bits(&only_long), bits(&long));

    let sasrec = ModelConfig { short_only: true, ..full.clone() };
    let mut p_short = p.clone();
    p_short.long_branch = None;
    let (s2, _, _) = forward_reps(&p_short, &sasrec, &seq);
    assert_eq!(bits(&s2), bits(&short));
}

#[test]
fn unit_window_long_branch_equals_short() {
    let config = ModelConfig { long_query_len: 1, alpha: 0.3, ..cfg() };
    let mut p = params(&config, 6, 6);
    p.long_branch = Some(p.short_branch.clone());
    let (_, short, long) = forward_reps(&p, &config, &sample_seq());
    for (a, b) in short.unwrap().data().iter().zip(long.unwrap().data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn dropout_only_in_training() {
    let config = ModelConfig { dropout: 0.5, ..cfg() };
    let p = params(&config, 6, 7);
    let seq = sample_seq();
    let run = |training: bool, seed: u64| {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &p, &config, false);
        let embedded = embed_sequence(&mut tape, &bound, &seq).unwrap();
        let blocks = bound.short.as_ref().unwrap();
        let out = branch_forward(&mut tape, embedded, &seq, blocks, QuerySource::Own, 0.5, &mut seeded_rng(seed), training)
            .unwrap();
        tape.value(out).clone()
    };
    assert_eq!(bits(&run(false, 1)), bits(&run(false, 2)));
    assert_ne!(bits(&run(true, 1)), bits(&run(true, 2)));
    assert_eq!(bits(&run(true, 3)), bits(&run(true, 3)));
}

#[test]
fn scoring() {
    let p = params(&cfg(), 6, 8);
    let e3 = p.item_embeddings.row(3).to_vec();
    let scores = score_items(&e3, &p);
    assert_eq!(scores.len(), 6);
    assert!((scores[2] - e3.iter().map(|v| v * v).sum::<f64>()).abs() < 1e-15);
    assert!(score_items(&[0.0; 6], &p).iter().all(|&s| s == 0.0));

    let mut rng = seeded_rng(9);
    let rep: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::new(vec![1, 6], rep.clone()).unwrap());
    let e = tape.constant(p.item_embeddings.clone());
    let logits = item_logits(&mut tape, r, e).unwrap();
    let fast = score_items(&rep, &p);
    for j in 1..=6 {
        let mut naive = 0.0;
        for c in 0..6 {
            naive += rep[c] * p.item_embeddings.get(j, c);
        }
        assert!((fast[j - 1] - naive).abs() < 1e-12);
        assert!((tape.value(logits).get(0, j - 1) - naive).abs() < 1e-12);
    }
}

#[test]
fn rec_loss_examples() {
    let mut tape = Tape::new();
    let zeros = tape.constant(Tensor::zeros(vec![2, 20]));
    let loss = rec_loss(&mut tape, zeros, &[0, 7], &[false, true]).unwrap();
    assert!((tape.value(loss).data()[0] - 20f64.ln()).abs() < 1e-12);

    let mut peaked = vec![0.0; 20];
    peaked[4] = 30.0;
    let peaked = tape.constant(Tensor::new(vec![1, 20], peaked).unwrap());
    let loss = rec_loss(&mut tape, peaked, &[5], &[true]).unwrap();
    assert!(tape.value(loss).data()[0] < 1e-9);

    assert!(matches!(rec_loss(&mut tape, zeros, &[0, 7], &[true, true]), Err(KernelError::Contract(_))));

    let mut rng = seeded_rng(10);
    let raw: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
    let targets = [2, 0, 5, 1, 3, 4];
    let mask = [true, false, true, true, true, true];
    let logits = tape.constant(Tensor::new(vec![6, 5], raw.clone()).unwrap());
    let loss = rec_loss(&mut tape, logits, &targets, &mask).unwrap();
    let mut direct = 0.0;
    for r in 0..6 {
        if !mask[r] {
            continue;
        }
        let row = &raw[r * 5..(r + 1) * 5];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        direct -= (row[targets[r] - 1].exp() / z).ln();
    }
    assert!((tape.value(loss).data()[0] - direct).abs() < 1e-10);

    let shifted: Vec<f64> = raw.iter().map(|v| v + 12.5).collect();
    let shifted = tape.constant(Tensor::new(vec![6, 5], shifted).unwrap());
    let loss2 = rec_loss(&mut tape, shifted, &targets, &mask).unwrap();
    assert!((tape.value(loss2).data()[0] - tape.value(loss).data()[0]).abs() < 1e-10);
}

fn kd_value(table: &Tensor, g: &TransitionGraph, tau: f64, subset: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let e = tape.constant(table.clone());
    let loss = kd_loss(&mut tape, e, g, tau, subset, 0.0, &mut seeded_rng(0), false).unwrap();
    tape.value(loss).data()[0]
}

#[test]
fn kd_loss_examples() {
    let table = Tensor::from_rows(&[
        vec![0.0, 0.0],
        vec![0.2, -0.1],
        vec![0.5, 0.3],
        vec![-0.4, 0.1],
        vec![0.0, 0.6],
    ])
    .unwrap();
    let mut seqs = vec![vec![1, 2]; 3];
    seqs.push(vec![1, 3]);
    let g = graph(&seqs, 4);
    assert!((kd_value(&table, &g, 0.5, &[1]) - 1.322_128_104_711_100_8).abs() < 1e-10);
    assert_eq!(kd_value(&table, &g, 0.5, &[2, 3, 4]), 0.0);

    let scaled: Vec<Vec<usize>> = seqs.iter().flat_map(|s| std::iter::repeat_n(s.clone(), 7)).collect();
    let g7 = graph(&scaled, 4);
    assert!((kd_value(&table, &g7, 0.5, &[1]) - kd_value(&table, &g, 0.5, &[1])).abs() < 1e-12);
}

#[test]
fn soft_cross_entropy_minimum_is_teacher_entropy() {
    let teacher = [0.5, 0.3, 0.15, 0.05];
    let tau = 0.4;
    let entropy: f64 = -teacher.iter().map(|p: &f64| p * p.ln()).sum::<f64>();
    let at = |logits: Vec<f64>| {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 4], logits).unwrap());
        let t = Tensor::new(vec![1, 4], teacher.to_vec()).unwrap();
        let l = tape.soft_cross_entropy(x, &t, tau).unwrap();
        tape.value(l).data()[0]
    };
    let matched: Vec<f64> = teacher.iter().map(|p| tau * p.ln()).collect();
    assert!((at(matched.clone()) - entropy).abs() < 1e-12);
    let mut rng = seeded_rng(11);
    for _ in 0..20 {
        let other: Vec<f64> = matched.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        assert!(at(other) >= entropy - 1e-12);
    }
}

#[test]
fn total_and_l2() {
    let mut tape = Tape::new();
    let rec = tape.constant(Tensor::scalar(1.0));
    let kd = tape.constant(Tensor::scalar(2.0));
    let l2 = tape.constant(Tensor::scalar(0.0));
    let t = total_loss(&mut tape, rec, kd, l2, 0.0, 0.0).unwrap();
    assert_eq!(tape.value(t).data()[0], 1.0);
    let t = total_loss(&mut tape, rec, kd, l2, 0.1, 0.0).unwrap();
    assert!((tape.value(t).data()[0] - 1.2).abs() < 1e-15);
    assert!(total_loss(&mut tape, rec, kd, l2, -0.1, 0.0).is_err());

    let config = ModelConfig { dim: 2, max_len: 2, num_blocks: 1, short_only: true, ..Default::default() };
    let mut p = init_params(&config, 2, &mut seeded_rng(0)).unwrap();
    let mut known = 0.0;
    for (k, t) in p.active_tensors_mut(&config).into_iter().enumerate() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = 0.1 * (k as f64 + 1.0) + 0.01 * i as f64;
        }
    }
    p.item_embeddings.row_mut(0).fill(0.0);
    for (k, t) in p.active_tensors(&config).into_iter().enumerate() {
        let start = if k == 0 { 2 } else { 0 };
        for i in start..t.numel() {
            let v = 0.1 * (k as f64 + 1.0) + 0.01 * i as f64;
            known += v * v;
        }
    }
    assert!((l2_penalty(&p, &config) - known).abs() < 1e-12);
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &p, &config, true);
    let l2 = l2_penalty_var(&mut tape, &bound).unwrap();
    let rec = tape.constant(Tensor::scalar(3.0));
    let kd = tape.constant(Tensor::scalar(0.0));
    let t = total_loss(&mut tape, rec, kd, l2, 0.1, 1e-4).unwrap();
    assert!((tape.value(t).data()[0] - (3.0 + 1e-4 * known)).abs() < 1e-12);
}

#[test]
fn grareg_examples() {
    let g = graph(&[vec![1, 2], vec![1, 2]], 2);
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap());
    let l = grareg_loss(&mut tape, e, &g, 1).unwrap();
    assert_eq!(tape.value(l).data()[0], 4.0);
    let same = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![0.3, 0.2], vec![0.3, 0.2]]).unwrap());
    let l = grareg_loss(&mut tape, same, &g, 1).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);
    assert!(grareg_loss(&mut tape, same, &g, 0).is_err());
}

#[test]
fn ges_examples() {
    let table = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let line = graph(&[vec![1, 2, 3]], 3);
    assert_eq!(ges_smooth(&table, &line, 0), table);
    let edgeless = graph(&[vec![1], vec![2]], 3);
    assert_eq!(ges_smooth(&table, &edgeless, 3), table);

    let out = ges_smooth(&table, &line, 1);
    let expected = [
        [0.0, 0.0],
        [0.5, 0.408_248_290_463_863],
        [0.816_496_580_927_726, 0.741_581_623_797_196_3],
        [0.5, 0.908_248_290_463_863],
    ];
    for (r, row) in expected.iter().enumerate() {
        for c in 0..2 {
            assert!((out.get(r, c) - row[c]).abs() < 1e-10, "({r},{c})");
        }
    }

    let mut tape = Tape::new();
    let e = tape.constant(table.clone());
    let v = ges_smooth_var(&mut tape, e, &Rc::new(ges_matrix(&line)), 2).unwrap();
    assert_eq!(tape.value(v), &ges_smooth(&table, &line, 2));
}

#[test]
fn checkpoint_file_round_trip() {
    let config = cfg();
    let p = params(&config, 6, 12);
    let path = std::env::temp_dir().join(format!("seqrec-model-{}.bin", std::process::id()));
    save_checkpoint(&path, &config, &p).unwrap();
    let (c2, p2) = load_checkpoint(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(c2, config);
    assert_eq!(p2, p);
}

proptest! {
    #[test]
    fn grareg_matches_edge_sum(
        seqs in prop::collection::vec(prop::collection::vec(1usize..=8, 0..10), 1..20),
        k in 1usize..4,
        seed in 0u64..1000,
    ) {
        let g = graph(&seqs, 8);
        let mut rng = seeded_rng(seed);
        let mut table = Tensor::new(vec![9, 3], (0..27).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        table.row_mut(0).fill(0.0);
        let mut oracle = 0.0;
        for i in 1..=8 {
            let Some(row) = g.row(i) else { continue };
            let mut nbrs: Vec<(usize, u32)> = row.iter().map(|(&j, &c)| (j, c)).collect();
            nbrs.sort_by_key(|&(j, c)| (std::cmp::Reverse(c), j));
            for (j, c) in nbrs.into_iter().take(k) {
                let d2: f64 = (0..3).map(|x| (table.get(i, x) - table.get(j, x)).powi(2)).sum();
                oracle += c as f64 * d2;
            }
        }
        prop_assert!(grareg_edges(&g, k).iter().all(|&(_, _, w)| w >= 1.0));
        let mut tape = Tape::new();
        let e = tape.constant(table);
        let l = grareg_loss(&mut tape, e, &g, k).unwrap();
        prop_assert!((tape.value(l).data()[0] - oracle).abs() < 1e-10);
    }
}
