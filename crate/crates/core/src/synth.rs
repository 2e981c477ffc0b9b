//! Synthetic interaction corpora mixing static cluster preferences with
//! injected first-order item transitions.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::dataio::{InteractionDataset, UserSequence};
use crate::kernel::seeded_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub item_count: usize,
    pub user_count: usize,
    /// Items are split into this many equal contiguous clusters.
    pub clusters: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Items are split at random into bundles of this size; a short
    /// remainder joins the previous bundle.
    pub bundle_size: usize,
    /// Draw bundles inside each cluster instead of across the catalogue.
    pub local_bundles: bool,
    /// Probability that the next item is another member of the current item's bundle.
    pub transition_prob: f64,
    /// Probability that the next item is drawn uniformly from all items.
    pub noise_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            item_count: 200,
            user_count: 2000,
            clusters: 4,
            min_len: 100,
            max_len: 200,
            bundle_size: 2,
            local_bundles: false,
            transition_prob: 0.3,
            noise_prob: 0.1,
            seed: 0,
        }
    }
}

/// Each user prefers one cluster. A step moves to a uniformly chosen other
/// member of the current item's bundle with `transition_prob`, jumps to a
/// random item with `noise_prob`, and otherwise samples from the preferred
/// cluster.
pub fn generate(cfg: &SyntheticConfig) -> InteractionDataset {
    assert!(cfg.clusters >= 1 && cfg.item_count >= cfg.clusters, "need at least one item per cluster");
    assert!(cfg.bundle_size >= 2, "bundles need at least two items");
    assert!(cfg.min_len >= 1 && cfg.min_len <= cfg.max_len, "bad length range");
    let mut rng = seeded_rng(cfg.seed);
    let per_cluster = cfg.item_count / cfg.clusters;
    let cluster_items = |c: usize| -> Vec<usize> {
        let lo = c * per_cluster + 1;
        let hi = if c + 1 == cfg.clusters { cfg.item_count } else { lo + per_cluster - 1 };
        (lo..=hi).collect()
    };
    let mut bundle_mates = vec![Vec::new(); cfg.item_count + 1];
    let groups: Vec<Vec<usize>> = if cfg.local_bundles {
        (0..cfg.clusters).map(cluster_items).collect()
    } else {
        vec![(1..=cfg.item_count).collect()]
    };
    for mut group in groups {
        group.shuffle(&mut rng);
        assign_bundles(&group, cfg.bundle_size, &mut bundle_mates);
    }
    let users = (0..cfg.user_count)
        .map(|u| {
            let pool = cluster_items(rng.random_range(0..cfg.clusters));
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut items = vec![*pool.choose(&mut rng).expect("non-empty cluster")];
            while items.len() < len {
                let cur = *items.last().expect("non-empty");
                let roll: f64 = rng.random();
                let next = if roll < cfg.transition_prob {
                    match bundle_mates[cur].choose(&mut rng) {
                        Some(&j) => j,
                        None => cur,
                    }
                } else if roll < cfg.transition_prob + cfg.noise_prob {
                    rng.random_range(1..=cfg.item_count)
                } else {
                    *pool.choose(&mut rng).expect("non-empty cluster")
                };
                items.push(next);
            }
            UserSequence { user: u as u64 + 1, items }
        })
        .collect();
    let mut ds = InteractionDataset::from_sequences(users).expect("generator emits valid sequences");
    ds.item_count = cfg.item_count;
    ds
}

/// Splits `order` into consecutive bundles of `size`, folding a short tail
/// into the previous bundle.
fn assign_bundles(order: &[usize], size: usize, mates: &mut [Vec<usize>]) {
    let mut bundles: Vec<&[usize]> = order.chunks(size).collect();
    if bundles.len() > 1 && bundles[bundles.len() - 1].len() < size {
        let tail = bundles.pop().expect("non-empty");
        let last = bundles.pop().expect("non-empty");
        bundles.push(&order[order.len() - last.len() - tail.len()..]);
    }
    for bundle in bundles {
        for &i in bundle {
            mates[i] = bundle.iter().copied().filter(|&j| j != i).collect();
        }
    }
}
