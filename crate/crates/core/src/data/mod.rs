//! Interaction logs, k-core filtering, leave-one-out sequences and batching.
//!
//! Item indices are 1-based; index 0 is the padding id and never appears as
//! a target. Sequences are left-padded so the most recent item always sits
//! in the last column.

mod synth;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::bail;
use crate::rng::SeededRng;
use crate::Result;

pub use synth::{synth_generate, Population, SynthSpec, SyntheticCorpus, SyntheticUser};

/// Reserved item index for padding.
pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Raw log in input order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn new(records: Vec<Interaction>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Drops exact `(user, item, timestamp)` repeats, keeping the first.
    pub fn dedup(&self) -> Self {
        let mut seen = BTreeMap::new();
        let records = self
            .records
            .iter()
            .filter(|r| seen.insert((&r.user, &r.item, r.timestamp), ()).is_none())
            .cloned()
            .collect();
        Self { records }
    }

    fn counts(&self) -> (BTreeMap<&str, usize>, BTreeMap<&str, usize>) {
        let mut users = BTreeMap::new();
        let mut items = BTreeMap::new();
        for r in &self.records {
            *users.entry(r.user.as_str()).or_insert(0) += 1;
            *items.entry(r.item.as_str()).or_insert(0) += 1;
        }
        (users, items)
    }
}

/// Which side a k-core pass prunes first. The fixed point does not depend
/// on it; the option exists so that can be checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoreOrder {
    UsersFirst,
    ItemsFirst,
}

/// Iteratively removes users and items with fewer than `k` interactions
/// until nothing changes.
pub fn k_core(log: &InteractionLog, k: usize, order: CoreOrder) -> Result<InteractionLog> {
    if log.is_empty() {
        bail!(Data, "interaction log is empty");
    }
    let (u0, i0) = log.counts();
    let (n_users, n_items, n_records) = (u0.len(), i0.len(), log.len());
    let mut current = log.records.clone();
    loop {
        let before = current.len();
        for side in match order {
            CoreOrder::UsersFirst => [true, false],
            CoreOrder::ItemsFirst => [false, true],
        } {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &current {
                let key = if side { r.user.as_str() } else { r.item.as_str() };
                *counts.entry(key).or_insert(0) += 1;
            }
            let keep: Vec<bool> = current
                .iter()
                .map(|r| counts[if side { r.user.as_str() } else { r.item.as_str() }] >= k)
                .collect();
            let mut it = keep.into_iter();
            current.retain(|_| it.next().unwrap_or(false));
        }
        if current.len() == before {
            break;
        }
    }
    if current.is_empty() {
        bail!(
            Data,
            "{k}-core filtering removed everything (input: {n_users} users, {n_items} items, {n_records} interactions)"
        );
    }
    Ok(InteractionLog { records: current })
}

/// Five-core filtering, users pruned first.
pub fn five_core(log: &InteractionLog) -> Result<InteractionLog> {
    k_core(log, 5, CoreOrder::UsersFirst)
}

/// Which leave-one-out view to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Train input minus its last item, predicting that item.
    Train,
    /// Train input predicting the second-to-last item.
    Valid,
    /// Everything but the last item, predicting the last.
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl core::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => bail!(Config, "unknown split '{other}' (expected train, valid or test)"),
        }
    }
}

/// One prediction problem: a chronological context and the next item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Example<'a> {
    pub user: usize,
    pub context: &'a [usize],
    pub target: usize,
}

/// Chronological per-user item sequences with deterministic id maps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceDataset {
    /// Raw user ids, sorted; position is the user index.
    pub users: Vec<String>,
    /// Raw item ids, sorted; item index `i` is `items[i - 1]`.
    pub items: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
    /// Users left out because they had fewer than three interactions.
    pub dropped_users: Vec<String>,
}

/// The five statistics reported for a preprocessed corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
}

impl SequenceDataset {
    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.as_str().cmp(raw)).ok()
    }

    /// All items but the validation and test targets.
    pub fn train_input(&self, user: usize) -> &[usize] {
        let s = &self.sequences[user];
        &s[..s.len() - 2]
    }

    pub fn valid_target(&self, user: usize) -> usize {
        let s = &self.sequences[user];
        s[s.len() - 2]
    }

    pub fn test_target(&self, user: usize) -> usize {
        let s = &self.sequences[user];
        s[s.len() - 1]
    }

    /// The example of `user` in `split`, or `None` when its context would
    /// be empty.
    pub fn example(&self, user: usize, split: Split) -> Option<Example<'_>> {
        let s = &self.sequences[user];
        let cut = match split {
            Split::Train => s.len().checked_sub(3)?,
            Split::Valid => s.len() - 2,
            Split::Test => s.len() - 1,
        };
        (cut > 0).then(|| Example { user, context: &s[..cut], target: s[cut] })
    }

    pub fn examples(&self, split: Split) -> Vec<Example<'_>> {
        (0..self.num_users()).filter_map(|u| self.example(u, split)).collect()
    }

    /// Every prefix of each train input predicting its next item.
    pub fn all_position_examples(&self) -> Vec<Example<'_>> {
        let mut out = Vec::new();
        for u in 0..self.num_users() {
            let input = self.train_input(u);
            for cut in 1..input.len() {
                out.push(Example { user: u, context: &input[..cut], target: input[cut] });
            }
        }
        out
    }

    pub fn stats(&self) -> DatasetStats {
        let users = self.num_users();
        let items = self.num_items();
        let interactions: usize = self.sequences.iter().map(Vec::len).sum();
        let avg_length = if users == 0 { 0.0 } else { interactions as f64 / users as f64 };
        let cells = users as f64 * items as f64;
        let sparsity = if cells == 0.0 { 1.0 } else { 1.0 - interactions as f64 / cells };
        DatasetStats { users, items, interactions, avg_length, sparsity }
    }

    /// Interaction counts per item index (index 0 unused), over train
    /// inputs only.
    pub fn train_item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_items() + 1];
        for u in 0..self.num_users() {
            for &i in self.train_input(u) {
                counts[i] += 1;
            }
        }
        counts
    }
}

/// Builds sorted id maps and chronological sequences. Ties on timestamp
/// keep input order; users with fewer than three interactions are dropped.
pub fn build_sequences(log: &InteractionLog) -> Result<SequenceDataset> {
    let log = log.dedup();
    if log.is_empty() {
        bail!(Data, "cannot build sequences from an empty log");
    }
    let mut items: Vec<String> = log.records.iter().map(|r| r.item.clone()).collect();
    items.sort();
    items.dedup();
    let mut per_user: BTreeMap<&str, Vec<(i64, usize)>> = BTreeMap::new();
    for r in &log.records {
        let idx = items.binary_search(&r.item).expect("item collected above") + 1;
        per_user.entry(r.user.as_str()).or_default().push((r.timestamp, idx));
    }
    let mut users = Vec::new();
    let mut sequences = Vec::new();
    let mut dropped_users = Vec::new();
    for (user, mut events) in per_user {
        if events.len() < 3 {
            dropped_users.push(String::from(user));
            continue;
        }
        events.sort_by_key(|&(ts, _)| ts);
        users.push(String::from(user));
        sequences.push(events.into_iter().map(|(_, i)| i).collect());
    }
    if sequences.is_empty() {
        bail!(Data, "no user has the three interactions needed for a leave-one-out split");
    }
    // items only referenced by dropped users are unreachable but keep their
    // index so the map stays a pure function of the log
    Ok(SequenceDataset { users, items, sequences, dropped_users })
}

/// Padded batch of contexts, shape `(batch, n)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub n: usize,
    pub lengths: Vec<usize>,
    pub targets: Vec<usize>,
    pub users: Vec<usize>,
}

impl SequenceBatch {
    pub fn from_examples(examples: &[Example<'_>], n: usize) -> Result<Self> {
        if n == 0 {
            bail!(Config, "maximum sequence length must be positive");
        }
        let mut ids = Vec::with_capacity(examples.len() * n);
        let mut lengths = Vec::with_capacity(examples.len());
        for ex in examples {
            if ex.context.is_empty() {
                bail!(Data, "user {} has an empty context", ex.user);
            }
            if ex.target == PAD {
                bail!(Data, "user {} has the padding id as target", ex.user);
            }
            let row = pad_left(ex.context, n);
            lengths.push(ex.context.len().min(n));
            ids.extend(row);
        }
        Ok(Self {
            ids,
            batch: examples.len(),
            n,
            lengths,
            targets: examples.iter().map(|e| e.target).collect(),
            users: examples.iter().map(|e| e.user).collect(),
        })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.n..(b + 1) * self.n]
    }
}

/// Most recent `n` items, left-padded with [`PAD`].
pub fn pad_left(context: &[usize], n: usize) -> Vec<usize> {
    let keep = &context[context.len().saturating_sub(n)..];
    let mut row = vec![PAD; n - keep.len()];
    row.extend_from_slice(keep);
    row
}

/// Splits a split's examples into batches. The train split is shuffled
/// with `seed`; the others keep user order.
pub fn make_batches(
    ds: &SequenceDataset,
    n: usize,
    batch_size: usize,
    seed: u64,
    split: Split,
    all_positions: bool,
) -> Result<Vec<SequenceBatch>> {
    if batch_size == 0 {
        bail!(Config, "batch size must be positive");
    }
    let mut examples = if split == Split::Train && all_positions {
        ds.all_position_examples()
    } else {
        ds.examples(split)
    };
    if split == Split::Train {
        SeededRng::new(seed).shuffle(&mut examples);
    }
    examples.chunks(batch_size).map(|chunk| SequenceBatch::from_examples(chunk, n)).collect()
}

#[cfg(test)]
mod tests;
