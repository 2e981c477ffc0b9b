//! Raw `user<TAB>item<TAB>timestamp` logs to remapped sequences.

use std::collections::HashMap;
use std::fmt::Write as _;

use anyhow::{anyhow, bail, Result};
use seqrec_core::dataio::{InteractionDataset, UserSequence};

#[derive(Debug)]
pub struct Prepared {
    pub dataset: InteractionDataset,
    /// Raw user ids in remapped order; user `k` is `users[k - 1]`.
    pub users: Vec<String>,
    pub items: Vec<String>,
}

/// Users and items are numbered from 1 in order of first appearance.
pub fn prepare(text: &str) -> Result<Prepared> {
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let (mut users, mut items) = (Vec::new(), Vec::new());
    let mut events: Vec<Vec<(f64, usize)>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [user, item, ts] = fields[..] else {
            bail!("line {line_no}: expected user<TAB>item<TAB>timestamp, found {} fields", fields.len());
        };
        if user.is_empty() || item.is_empty() {
            bail!("line {line_no}: empty user or item id");
        }
        let ts: f64 = ts.parse().ok().filter(|t: &f64| t.is_finite()).ok_or_else(|| anyhow!("line {line_no}: bad timestamp {ts:?}"))?;
        let u = *user_ids.entry(user).or_insert_with(|| {
            users.push(user.to_string());
            events.push(Vec::new());
            users.len()
        });
        let i = *item_ids.entry(item).or_insert_with(|| {
            items.push(item.to_string());
            items.len()
        });
        events[u - 1].push((ts, i));
    }
    if users.is_empty() {
        bail!("no interactions in input");
    }
    let sequences = events
        .into_iter()
        .enumerate()
        .map(|(k, mut ev)| {
            ev.sort_by(|a, b| a.0.total_cmp(&b.0));
            UserSequence { user: k as u64 + 1, items: ev.into_iter().map(|(_, i)| i).collect() }
        })
        .collect();
    let dataset = InteractionDataset::from_sequences(sequences)?;
    Ok(Prepared { dataset, users, items })
}

impl Prepared {
    pub fn remap_tsv(&self) -> String {
        let mut out = String::from("kind\traw\tid\n");
        for (kind, ids) in [("user", &self.users), ("item", &self.items)] {
            for (k, raw) in ids.iter().enumerate() {
                writeln!(out, "{kind}\t{raw}\t{}", k + 1).unwrap();
            }
        }
        out
    }
}
