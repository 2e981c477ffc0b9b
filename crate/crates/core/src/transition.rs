//! Global item-transition graph built from training sequences, the
//! pseudo-labels derived from it, and the item-transition recommender.

use std::collections::BTreeMap;
use std::io::{self, Write};

use crate::kernel::softmax_in_place;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransitionError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("item {0} has no outgoing transitions")]
    NoTransitionRow(usize),
    #[error("item {item} out of range 1..={item_count}")]
    ItemOutOfRange { item: usize, item_count: usize },
}

/// Directed transition counts `a[i][j]`: how often `j` follows `i` within
/// `span` positions in a training sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitionGraph {
    item_count: usize,
    span: usize,
    // Indexed by source id; slot 0 (padding) stays empty.
    rows: Vec<BTreeMap<usize, u32>>,
}

impl TransitionGraph {
    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn span(&self) -> usize {
        self.span
    }

    pub fn row(&self, source: usize) -> Option<&BTreeMap<usize, u32>> {
        self.rows.get(source)
    }

    pub fn has_transitions(&self, source: usize) -> bool {
        self.rows.get(source).is_some_and(|r| !r.is_empty())
    }

    pub fn edge_count(&self) -> usize {
        self.rows.iter().map(BTreeMap::len).sum()
    }

    pub fn total_count(&self) -> u64 {
        self.rows.iter().flat_map(|r| r.values()).map(|&c| c as u64).sum()
    }

    /// Every stored edge as `(source, target, count)`, sorted by source then target.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        self.rows.iter().enumerate().flat_map(|(s, r)| r.iter().map(move |(&t, &c)| (s, t, c)))
    }

    /// Writes `source<TAB>target<TAB>count` lines.
    pub fn write_tsv(&self, mut out: impl Write) -> io::Result<()> {
        for (s, t, c) in self.edges() {
            writeln!(out, "{s}\t{t}\t{c}")?;
        }
        Ok(())
    }
}

pub fn build_transition_graph<'a>(
    sequences: impl IntoIterator<Item = &'a [usize]>,
    item_count: usize,
    span: usize,
) -> Result<TransitionGraph, TransitionError> {
    if span < 1 {
        return Err(TransitionError::Parameter(format!("time span must be at least 1, got {span}")));
    }
    let mut rows = vec![BTreeMap::new(); item_count + 1];
    for seq in sequences {
        for (t, &src) in seq.iter().enumerate() {
            for &dst in seq.iter().skip(t + 1).take(span) {
                for &id in &[src, dst] {
                    if id == 0 || id > item_count {
                        return Err(TransitionError::ItemOutOfRange { item: id, item_count });
                    }
                }
                *rows[src].entry(dst).or_insert(0) += 1;
            }
        }
    }
    Ok(TransitionGraph { item_count, span, rows })
}

/// Stored counts divided by the row maximum, ascending by target.
pub fn row_normalize(graph: &TransitionGraph, source: usize) -> Vec<(usize, f64)> {
    let Some(row) = graph.row(source) else { return Vec::new() };
    let Some(&max) = row.values().max() else { return Vec::new() };
    row.iter().map(|(&j, &c)| (j, c as f64 / max as f64)).collect()
}

/// Teacher distribution over all items for one source item.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelRow {
    pub source: usize,
    pub temperature: f64,
    /// Entry `j - 1` holds the probability of item `j`.
    pub probabilities: Vec<f64>,
}

/// Softmax with temperature over the row-normalized counts (zeros for
/// absent targets), spread over all items.
pub fn pseudo_label_row(graph: &TransitionGraph, source: usize, tau: f64) -> Result<PseudoLabelRow, TransitionError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(TransitionError::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let normalized = row_normalize(graph, source);
    if normalized.is_empty() {
        return Err(TransitionError::NoTransitionRow(source));
    }
    let mut probabilities = vec![0.0; graph.item_count];
    for (j, v) in normalized {
        probabilities[j - 1] = v;
    }
    softmax_in_place(&mut probabilities, tau);
    Ok(PseudoLabelRow { source, temperature: tau, probabilities })
}

pub fn transition_frequency(graph: &TransitionGraph, from: usize, to: usize) -> u32 {
    graph.row(from).and_then(|r| r.get(&to)).copied().unwrap_or(0)
}

/// Top-`top_n` items by transition frequency from `current`; ties and the
/// zero-frequency tail are ordered by ascending id.
pub fn transition_recommend(
    graph: &TransitionGraph,
    current: usize,
    top_n: usize,
    exclusions: &[usize],
) -> Vec<usize> {
    let excluded = |i: &usize| exclusions.contains(i);
    let mut ranked: Vec<(usize, u32)> = graph
        .row(current)
        .map(|r| r.iter().map(|(&j, &c)| (j, c)).filter(|(j, _)| !excluded(j)).collect())
        .unwrap_or_default();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = ranked.into_iter().map(|(j, _)| j).take(top_n).collect();
    if out.len() < top_n {
        let row = graph.row(current);
        out.extend(
            (1..=graph.item_count)
                .filter(|j| !excluded(j) && row.is_none_or(|r| !r.contains_key(j)))
                .take(top_n - out.len()),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(seqs: &[&[usize]], items: usize, k: usize) -> TransitionGraph {
        build_transition_graph(seqs.iter().copied(), items, k).unwrap()
    }

    #[test]
    fn hand_counts() {
        let g = graph(&[&[1, 2]], 2, 1);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(1, 2, 1)]);
        let g = graph(&[&[1, 2, 1, 2]], 2, 1);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(1, 2, 2), (2, 1, 1)]);
        assert_eq!(transition_frequency(&g, 1, 2), 2);
        assert_eq!(transition_frequency(&g, 2, 2), 0);
    }

    #[test]
    fn span_must_be_positive() {
        assert!(build_transition_graph(std::iter::empty(), 3, 0).is_err());
    }

    #[test]
    fn row_normalization() {
        let g = graph(&[&[1, 2, 1, 2, 1, 2, 1, 2, 1, 3, 1, 3]], 3, 1);
        // row 1 = {2:4, 3:2}
        assert_eq!(row_normalize(&g, 1), vec![(2, 1.0), (3, 0.5)]);
        assert!(row_normalize(&g, 3).len() == 1);
        let empty = graph(&[&[1]], 5, 1);
        assert!(row_normalize(&empty, 1).is_empty());
        let single = graph(&[&[1, 5, 1, 5, 1, 5, 1, 5, 1, 5, 1, 5, 1, 5]], 5, 1);
        assert_eq!(row_normalize(&single, 1), vec![(5, 1.0)]);
    }

    #[test]
    fn empty_row_has_no_pseudo_label() {
        let g = graph(&[&[1, 2]], 3, 1);
        assert_eq!(pseudo_label_row(&g, 2, 0.1), Err(TransitionError::NoTransitionRow(2)));
        assert!(pseudo_label_row(&g, 1, 0.0).is_err());
    }

    #[test]
    fn uniform_counts_give_uniform_labels() {
        let g = graph(&[&[1, 1, 2, 1, 3, 1]], 3, 1);
        for tau in [0.05, 1.0, 10.0] {
            let row = pseudo_label_row(&g, 1, tau).unwrap();
            for p in row.probabilities {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn recommend_orders_by_count_then_id() {
        let mut seqs = Vec::new();
        for _ in 0..5 {
            seqs.push(vec![1, 2]);
        }
        for _ in 0..3 {
            seqs.push(vec![1, 7]);
        }
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let g = graph(&refs, 9, 1);
        assert_eq!(transition_recommend(&g, 1, 2, &[]), vec![2, 7]);
        assert_eq!(transition_recommend(&g, 1, 4, &[2]), vec![7, 1, 3, 4]);
    }
}
