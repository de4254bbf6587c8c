//! Click-log ingestion and the session preprocessing protocol: group clicks
//! into sessions, iteratively drop length-1 sessions and rare items until the
//! corpus is stable, hold out the final time window as the test split, and
//! expand sessions into (prefix, next-item) training pairs.

mod io;

pub use io::{load_clicks, DataFormat, LoadOutcome};

use crate::error::{Error, Result};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// One interaction from a raw click log.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickEvent {
    pub session_key: String,
    /// Fractional seconds since the Unix epoch; never negative.
    pub timestamp: f64,
    pub item_key: String,
}

/// Chronological item indices; indices are internal, 1-based, 0 is padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Session {
    pub items: Vec<usize>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub clicks: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub items: usize,
    pub avg_session_length: f64,
    pub filter_iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PreprocessConfig {
    /// Items observed fewer times than this are dropped (together with
    /// length-1 sessions) until a fixed point is reached.
    pub min_item_support: usize,
    /// The final `test_days` of the log become the test split.
    pub test_days: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_item_support: 5,
            test_days: 1.0,
        }
    }
}

const CACHE_VERSION: u32 = 1;

/// A preprocessed corpus: vocabulary, train and test sessions, statistics.
/// Internal index i maps to `vocab[i - 1]`; index 0 is reserved for padding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCorpus {
    pub version: u32,
    pub vocab: Vec<String>,
    pub train: Vec<Session>,
    pub test: Vec<Session>,
    pub stats: CorpusStats,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl SessionCorpus {
    /// Assemble a corpus directly from parts (synthetic corpora, tests).
    pub fn from_parts(vocab: Vec<String>, train: Vec<Session>, test: Vec<Session>) -> Self {
        let stats = compute_stats(&train, &test, vocab.len(), 0);
        let mut corpus = SessionCorpus {
            version: CACHE_VERSION,
            vocab,
            train,
            test,
            stats,
            index: HashMap::new(),
        };
        corpus.rebuild_index();
        corpus
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i + 1))
            .collect();
    }

    pub fn n_items(&self) -> usize {
        self.vocab.len()
    }

    /// Internal index of an external item key, if it is in the vocabulary.
    pub fn item_index(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn item_key(&self, index: usize) -> Option<&str> {
        if index == 0 {
            return None;
        }
        self.vocab.get(index - 1).map(|s| s.as_str())
    }

    /// FNV-1a over the vocabulary in index order; checkpoints embed it so a
    /// model cannot be evaluated against the wrong item universe.
    pub fn vocab_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for key in &self.vocab {
            for &b in key.as_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Config(format!("corpus serialization failed: {e}")))?;
        std::fs::write(path, json).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut corpus: SessionCorpus = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("corpus cache {} is invalid: {e}", path.display()))
        })?;
        if corpus.version != CACHE_VERSION {
            return Err(Error::Config(format!(
                "corpus cache version {} unsupported (expected {CACHE_VERSION})",
                corpus.version
            )));
        }
        corpus.rebuild_index();
        Ok(corpus)
    }
}

/// Apply the preprocessing protocol to raw click events.
pub fn preprocess(events: &[ClickEvent], config: &PreprocessConfig) -> Result<SessionCorpus> {
    let mut stages: Vec<(String, usize)> = vec![("events".into(), events.len())];
    if events.is_empty() {
        return Err(Error::EmptyCorpus { stages });
    }

    // Group clicks by session key; order within a session by timestamp with
    // arrival order as a stable tiebreak.
    let mut grouped: HashMap<String, Vec<(f64, usize, String)>> = HashMap::new();
    for (arrival, ev) in events.iter().enumerate() {
        grouped.entry(ev.session_key.clone()).or_default().push((
            ev.timestamp,
            arrival,
            ev.item_key.clone(),
        ));
    }
    let mut sessions: Vec<(f64, String, Vec<String>)> = grouped
        .into_iter()
        .map(|(key, mut clicks)| {
            clicks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let end_ts = clicks.last().map(|c| c.0).unwrap_or(0.0);
            let items = clicks.into_iter().map(|(_, _, item)| item).collect();
            (end_ts, key, items)
        })
        .collect();
    sessions.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    stages.push(("sessions".into(), sessions.len()));

    // Iterate the two filters to a fixed point so the result does not depend
    // on which filter runs first.
    let mut iterations = 0usize;
    loop {
        iterations += 1;
        let before_sessions = sessions.len();
        let before_clicks: usize = sessions.iter().map(|s| s.2.len()).sum();

        sessions.retain(|s| s.2.len() >= 2);

        let mut support: HashMap<&str, usize> = HashMap::new();
        for (_, _, items) in &sessions {
            for item in items {
                *support.entry(item.as_str()).or_default() += 1;
            }
        }
        let keep: std::collections::HashSet<String> = support
            .iter()
            .filter(|(_, &c)| c >= config.min_item_support)
            .map(|(k, _)| k.to_string())
            .collect();
        for (_, _, items) in &mut sessions {
            items.retain(|item| keep.contains(item));
        }

        let after_clicks: usize = sessions.iter().map(|s| s.2.len()).sum();
        if sessions.len() == before_sessions && after_clicks == before_clicks {
            break;
        }
        if sessions.is_empty() {
            stages.push((format!("filter-iteration-{iterations}"), 0));
            return Err(Error::EmptyCorpus { stages });
        }
    }
    sessions.retain(|s| s.2.len() >= 2);
    stages.push(("after-filtering".into(), sessions.len()));
    if sessions.is_empty() {
        return Err(Error::EmptyCorpus { stages });
    }

    // Final time window becomes the test split.
    let max_end = sessions.last().map(|s| s.0).unwrap_or(0.0);
    let cutoff = max_end - config.test_days * 86_400.0;
    let (test_raw, train_raw): (Vec<_>, Vec<_>) = sessions.into_iter().partition(|s| s.0 > cutoff);
    stages.push(("train".into(), train_raw.len()));
    stages.push(("test-raw".into(), test_raw.len()));
    if train_raw.is_empty() {
        return Err(Error::EmptyCorpus { stages });
    }

    // Vocabulary: first appearance over the chronologically ordered training
    // sessions; indices start at 1.
    let mut vocab: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut train: Vec<Session> = Vec::new();
    for (_, _, items) in &train_raw {
        let mapped = items
            .iter()
            .map(|item| {
                *index.entry(item.clone()).or_insert_with(|| {
                    vocab.push(item.clone());
                    vocab.len()
                })
            })
            .collect();
        train.push(Session { items: mapped });
    }

    // Test sessions: unseen items are dropped, then too-short sessions.
    let mut test: Vec<Session> = Vec::new();
    for (_, _, items) in &test_raw {
        let mapped: Vec<usize> = items
            .iter()
            .filter_map(|item| index.get(item).copied())
            .collect();
        if mapped.len() >= 2 {
            test.push(Session { items: mapped });
        }
    }
    stages.push(("test".into(), test.len()));

    let stats = compute_stats(&train, &test, vocab.len(), iterations);
    let mut corpus = SessionCorpus {
        version: CACHE_VERSION,
        vocab,
        train,
        test,
        stats,
        index: HashMap::new(),
    };
    corpus.rebuild_index();
    Ok(corpus)
}

fn compute_stats(
    train: &[Session],
    test: &[Session],
    items: usize,
    filter_iterations: usize,
) -> CorpusStats {
    let clicks: usize = train.iter().chain(test).map(|s| s.len()).sum();
    let sessions = train.len() + test.len();
    CorpusStats {
        clicks,
        train_sessions: train.len(),
        test_sessions: test.len(),
        items,
        avg_session_length: if sessions == 0 {
            0.0
        } else {
            clicks as f64 / sessions as f64
        },
        filter_iterations,
    }
}

/// Expand each session into its (prefix, next item) pairs: a session of
/// length t yields exactly t - 1 pairs, prefixes in original order.
pub fn prefix_split(sessions: &[Session]) -> Vec<(Vec<usize>, usize)> {
    let mut pairs = Vec::new();
    for session in sessions {
        for cut in 1..session.items.len() {
            pairs.push((session.items[..cut].to_vec(), session.items[cut]));
        }
    }
    pairs
}

/// A padded minibatch. Valid positions are left-aligned; column j of row i is
/// valid iff `j < lengths[i]`, and padding cells hold item 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The valid item indices of row i, in chronological order.
    pub fn valid_items(&self, row: usize) -> &[usize] {
        &self.items[row][..self.lengths[row]]
    }
}

/// Shuffle pairs with a seeded permutation and emit padded batches; prefixes
/// longer than `l_max` keep only their most recent `l_max` items. The final
/// partial batch is emitted.
pub fn batchify(
    pairs: &[(Vec<usize>, usize)],
    batch_size: usize,
    l_max: usize,
    shuffle_seed: u64,
) -> impl Iterator<Item = Batch> + '_ {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    assert!(l_max >= 1, "l_max must be at least 1");
    let order = rng::shuffle_indices(&mut rng::rng_from_seed(shuffle_seed), pairs.len());
    BatchStream {
        pairs,
        order,
        cursor: 0,
        batch_size,
        l_max,
    }
}

struct BatchStream<'a> {
    pairs: &'a [(Vec<usize>, usize)],
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    l_max: usize,
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let mut batch = Batch {
            items: Vec::with_capacity(end - self.cursor),
            mask: Vec::with_capacity(end - self.cursor),
            lengths: Vec::with_capacity(end - self.cursor),
            targets: Vec::with_capacity(end - self.cursor),
        };
        for &idx in &self.order[self.cursor..end] {
            let (prefix, target) = &self.pairs[idx];
            let tail_start = prefix.len().saturating_sub(self.l_max);
            let kept = &prefix[tail_start..];
            let mut row = vec![0usize; self.l_max];
            row[..kept.len()].copy_from_slice(kept);
            let mask: Vec<bool> = (0..self.l_max).map(|j| j < kept.len()).collect();
            batch.lengths.push(kept.len());
            batch.items.push(row);
            batch.mask.push(mask);
            batch.targets.push(*target);
        }
        self.cursor = end;
        Some(batch)
    }
}

/// Truncate a raw prefix the same way `batchify` does: keep the most recent
/// `l_max` items in original order.
pub fn truncate_prefix(prefix: &[usize], l_max: usize) -> &[usize] {
    &prefix[prefix.len().saturating_sub(l_max)..]
}
