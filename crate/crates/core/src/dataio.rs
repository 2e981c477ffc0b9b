//! Interaction sequences: loading, leave-one-out splitting and batching.
//!
//! Sequence files hold one user per line, `user_id<TAB>item item ...`, with
//! item ids as positive base-10 integers in chronological order. Id 0 is
//! reserved for padding.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::kernel::Rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: u64,
    pub items: Vec<usize>,
}

/// Per-user chronological item sequences over items `1..=item_count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionDataset {
    pub item_count: usize,
    pub users: Vec<UserSequence>,
}

impl InteractionDataset {
    /// Builds a dataset, taking `item_count` as the largest id present.
    pub fn from_sequences(users: Vec<UserSequence>) -> Result<Self, DataError> {
        if users.is_empty() {
            return Err(DataError::Dataset("no sequences".into()));
        }
        for (i, u) in users.iter().enumerate() {
            if u.items.is_empty() {
                return Err(DataError::Validation { line: i + 1, message: format!("user {} has no items", u.user) });
            }
            if u.items.contains(&0) {
                return Err(DataError::Validation { line: i + 1, message: "item id 0 is reserved for padding".into() });
            }
        }
        let item_count = users.iter().flat_map(|u| u.items.iter().copied()).max().unwrap_or(0);
        Ok(Self { item_count, users })
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn action_count(&self) -> usize {
        self.users.iter().map(|u| u.items.len()).sum()
    }
}

pub fn load_sequences(path: impl AsRef<Path>) -> Result<InteractionDataset, DataError> {
    let file = fs::File::open(path)?;
    parse_sequences(BufReader::new(file))
}

pub fn parse_sequences(reader: impl BufRead) -> Result<InteractionDataset, DataError> {
    let mut users = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (user, rest) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            line: line_no,
            message: "expected `user_id<TAB>items`".into(),
        })?;
        let user: u64 = user.trim().parse().map_err(|_| DataError::Parse {
            line: line_no,
            message: format!("invalid user id {user:?}"),
        })?;
        let mut items = Vec::new();
        for tok in rest.split_whitespace() {
            let id: i64 = tok.parse().map_err(|_| DataError::Parse {
                line: line_no,
                message: format!("invalid item id {tok:?}"),
            })?;
            if id < 1 {
                return Err(DataError::Validation { line: line_no, message: format!("item id {id} is not positive") });
            }
            items.push(id as usize);
        }
        if items.is_empty() {
            return Err(DataError::Parse { line: line_no, message: "empty item sequence".into() });
        }
        users.push(UserSequence { user, items });
    }
    InteractionDataset::from_sequences(users)
}

pub fn write_sequences(ds: &InteractionDataset, mut out: impl Write) -> io::Result<()> {
    for u in &ds.users {
        let items: Vec<String> = u.items.iter().map(usize::to_string).collect();
        writeln!(out, "{}\t{}", u.user, items.join(" "))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitUser {
    pub user: u64,
    pub train: Vec<usize>,
    pub valid: Option<usize>,
    pub test: Option<usize>,
}

impl SplitUser {
    /// Model input history for a phase: the train prefix, plus the
    /// validation item when predicting the test item.
    pub fn history(&self, phase: Phase) -> Vec<usize> {
        let mut h = self.train.clone();
        if phase == Phase::Test {
            h.extend(self.valid);
        }
        h
    }

    pub fn target(&self, phase: Phase) -> Option<usize> {
        match phase {
            Phase::Valid => self.valid,
            Phase::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Valid,
    Test,
}

impl std::str::FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "valid" | "validation" => Ok(Phase::Valid),
            "test" => Ok(Phase::Test),
            other => Err(format!("unknown phase {other:?} (expected valid or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDataset {
    pub item_count: usize,
    pub users: Vec<SplitUser>,
}

impl SplitDataset {
    pub fn train_sequences(&self) -> impl Iterator<Item = &[usize]> {
        self.users.iter().map(|u| u.train.as_slice())
    }

    /// Users holding both a validation and a test target.
    pub fn eligible_users(&self) -> impl Iterator<Item = &SplitUser> {
        self.users.iter().filter(|u| u.valid.is_some() && u.test.is_some())
    }
}

/// Last item to test, second-last to validation, rest to train. Sequences
/// shorter than three items stay entirely in train.
pub fn leave_one_out_split(ds: &InteractionDataset) -> SplitDataset {
    let users = ds
        .users
        .iter()
        .map(|u| {
            let n = u.items.len();
            if n < 3 {
                SplitUser { user: u.user, train: u.items.clone(), valid: None, test: None }
            } else {
                SplitUser {
                    user: u.user,
                    train: u.items[..n - 2].to_vec(),
                    valid: Some(u.items[n - 2]),
                    test: Some(u.items[n - 1]),
                }
            }
        })
        .collect();
    SplitDataset { item_count: ds.item_count, users }
}

/// A left-padded mini-batch, stored row-major as `batch_size × max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub max_len: usize,
    pub item_matrix: Vec<usize>,
    pub target_matrix: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    /// Distinct non-padding items appearing in the input matrix, ascending.
    pub fn distinct_items(&self) -> Vec<usize> {
        let mut items: Vec<usize> = self.item_matrix.iter().copied().filter(|&i| i != 0).collect();
        items.sort_unstable();
        items.dedup();
        items
    }
}

/// Left-pads (or keeps the most recent `max_len` of) `seq` into a row.
pub fn pad_left(seq: &[usize], max_len: usize) -> Vec<usize> {
    let tail = &seq[seq.len().saturating_sub(max_len)..];
    let mut row = vec![0; max_len - tail.len()];
    row.extend_from_slice(tail);
    row
}

fn training_row(seq: &[usize], max_len: usize) -> (Vec<usize>, Vec<usize>) {
    let window = &seq[seq.len().saturating_sub(max_len + 1)..];
    let inputs = pad_left(&window[..window.len() - 1], max_len);
    let targets = pad_left(&window[1..], max_len);
    (inputs, targets)
}

/// One epoch of shuffled training batches. Only users whose train prefix
/// has at least two items (one input-target pair) take part.
pub fn batch_iter(split: &SplitDataset, max_len: usize, batch_size: usize, rng: &mut Rng) -> Vec<Batch> {
    assert!(max_len >= 1 && batch_size >= 1, "max_len and batch_size must be positive");
    let mut order: Vec<usize> = (0..split.users.len()).filter(|&u| split.users[u].train.len() >= 2).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut item_matrix = Vec::with_capacity(chunk.len() * max_len);
            let mut target_matrix = Vec::with_capacity(chunk.len() * max_len);
            for &u in chunk {
                let (inputs, targets) = training_row(&split.users[u].train, max_len);
                item_matrix.extend(inputs);
                target_matrix.extend(targets);
            }
            let mask = target_matrix.iter().map(|&t| t != 0).collect();
            Batch { batch_size: chunk.len(), max_len, item_matrix, target_matrix, mask }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub actions: usize,
    pub density: f64,
    pub avg_len: f64,
}

pub fn dataset_stats(ds: &InteractionDataset) -> DatasetStats {
    let users = ds.user_count();
    let actions = ds.action_count();
    DatasetStats {
        users,
        items: ds.item_count,
        actions,
        density: actions as f64 / (users as f64 * ds.item_count as f64),
        avg_len: actions as f64 / users as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::seeded_rng;

    fn ds(seqs: &[&[usize]]) -> InteractionDataset {
        let users = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| UserSequence { user: i as u64 + 1, items: s.to_vec() })
            .collect();
        InteractionDataset::from_sequences(users).unwrap()
    }

    #[test]
    fn parses_single_line() {
        let d = parse_sequences("1\t5 3 5\n".as_bytes()).unwrap();
        assert_eq!(d.user_count(), 1);
        assert_eq!(d.users[0].items, vec![5, 3, 5]);
        assert_eq!(d.item_count, 5);
    }

    #[test]
    fn empty_file_is_dataset_error() {
        let err = parse_sequences("".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("no sequences"), "{err}");
    }

    #[test]
    fn malformed_and_nonpositive_lines_report_line_numbers() {
        let err = parse_sequences("1\t1 2\n2\t3 x\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err:?}");
        let err = parse_sequences("1\t1 2\n2\t3 0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Validation { line: 2, .. }), "{err:?}");
        let err = parse_sequences("1 2 3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 1, .. }));
    }

    #[test]
    fn split_rules() {
        let s = leave_one_out_split(&ds(&[&[1, 2, 3], &[7, 9]]));
        assert_eq!(s.users[0].train, vec![1]);
        assert_eq!(s.users[0].valid, Some(2));
        assert_eq!(s.users[0].test, Some(3));
        assert_eq!(s.users[1].train, vec![7, 9]);
        assert_eq!(s.users[1].valid, None);
        assert_eq!(s.users[1].test, None);
        assert_eq!(s.eligible_users().count(), 1);
        assert_eq!(s.users[0].history(Phase::Test), vec![1, 2]);
    }

    #[test]
    fn batch_padding_and_targets() {
        let split = leave_one_out_split(&ds(&[&[1, 2, 3, 8, 9]]));
        let mut rng = seeded_rng(0);
        let b = &batch_iter(&split, 5, 4, &mut rng)[0];
        assert_eq!(b.item_matrix, vec![0, 0, 0, 1, 2]);
        assert_eq!(b.target_matrix, vec![0, 0, 0, 2, 3]);
        assert_eq!(b.mask, vec![false, false, false, true, true]);
    }

    #[test]
    fn truncation_keeps_most_recent_items() {
        let split = leave_one_out_split(&ds(&[&[1, 2, 3, 4, 5, 6, 7, 8, 9]]));
        let b = &batch_iter(&split, 3, 1, &mut seeded_rng(0))[0];
        // train = 1..=7, most recent 4 items are 4 5 6 7
        assert_eq!(b.item_matrix, vec![4, 5, 6]);
        assert_eq!(b.target_matrix, vec![5, 6, 7]);
        assert!(b.mask.iter().all(|&m| m));
    }

    #[test]
    fn fixed_seed_gives_identical_batches() {
        let seqs: Vec<Vec<usize>> = (0..40).map(|u| (1..=(u % 7 + 3)).collect()).collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let split = leave_one_out_split(&ds(&refs));
        let a = batch_iter(&split, 4, 8, &mut seeded_rng(11));
        let b = batch_iter(&split, 4, 8, &mut seeded_rng(11));
        assert_eq!(a, b);
        let c = batch_iter(&split, 4, 8, &mut seeded_rng(12));
        assert_ne!(a, c);
    }

    #[test]
    fn stats() {
        let s = dataset_stats(&ds(&[&[1, 2]]));
        assert_eq!(s.density, 1.0);
        assert_eq!(s.avg_len, 2.0);
    }
}
