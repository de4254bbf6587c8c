//! Ranking metrics: Recall@N and MRR@N over prefix-split test pairs, with a
//! per-session-length breakdown.
//!
//! Ties are broken toward the smaller item index, so ranks are deterministic
//! and the fast path stays exactly consistent with a full stable sort.

use crate::dataset::{prefix_split, truncate_prefix, Session};
use crate::error::{Error, Result};
use crate::model::{score_session, ModelParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Rank of the target item among all candidates, 1-based. `scores[j]` is the
/// score of item `j + 1`; ties count items with a smaller index first.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    if target == 0 || target > scores.len() {
        return Err(Error::contract(format!(
            "target {target} outside candidate range 1..={}",
            scores.len()
        )));
    }
    let ts = scores[target - 1];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if s > ts || (s == ts && j + 1 < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Fraction of examples whose target ranked within the cutoff.
pub fn recall_at_n(ranks: &[usize], n: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64
}

/// Mean reciprocal rank, zeroed below the cutoff.
pub fn mrr_at_n(ranks: &[usize], n: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let sum: f64 = ranks
        .iter()
        .map(|&r| if r <= n { 1.0 / r as f64 } else { 0.0 })
        .sum();
    sum / ranks.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub recall: f64,
    pub mrr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: f64,
    pub mrr: f64,
    pub n_cutoff: usize,
    /// Keyed by prefix length 1..=l_max; longer prefixes pool into the top bucket.
    pub per_length: BTreeMap<usize, BucketStats>,
    pub example_count: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,recall,mrr,count\n");
        out.push_str(&format!(
            "all,{:.6},{:.6},{}\n",
            self.recall, self.mrr, self.example_count
        ));
        for (len, stats) in &self.per_length {
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                len, stats.recall, stats.mrr, stats.count
            ));
        }
        out
    }
}

/// Evaluate on explicit (prefix, target) pairs. Prefixes are truncated to
/// their most recent `l_max` items, exactly like training batches; the bucket
/// key is the pre-truncation prefix length, pooled at `l_max`.
///
/// Pairs are sharded across worker threads against the read-only parameters
/// and merged back in shard order, so the report is identical to a
/// sequential pass.
pub fn evaluate_pairs(
    params: &ModelParams,
    pairs: &[(Vec<usize>, usize)],
    n_cutoff: usize,
    l_max: usize,
) -> Result<EvalReport> {
    let per_pair = rank_pairs(params, pairs, l_max)?;
    let mut ranks = Vec::with_capacity(pairs.len());
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (bucket, rank) in per_pair {
        ranks.push(rank);
        buckets.entry(bucket).or_default().push(rank);
    }
    let per_length = buckets
        .into_iter()
        .map(|(len, ranks)| {
            (
                len,
                BucketStats {
                    recall: recall_at_n(&ranks, n_cutoff),
                    mrr: mrr_at_n(&ranks, n_cutoff),
                    count: ranks.len(),
                },
            )
        })
        .collect();
    Ok(EvalReport {
        recall: recall_at_n(&ranks, n_cutoff),
        mrr: mrr_at_n(&ranks, n_cutoff),
        n_cutoff,
        per_length,
        example_count: ranks.len(),
    })
}

/// (bucket length, rank) per pair, in input order.
fn rank_pairs(
    params: &ModelParams,
    pairs: &[(Vec<usize>, usize)],
    l_max: usize,
) -> Result<Vec<(usize, usize)>> {
    let rank_one = |(prefix, target): &(Vec<usize>, usize)| -> Result<(usize, usize)> {
        let scores = score_session(params, truncate_prefix(prefix, l_max))?;
        Ok((prefix.len().min(l_max), rank_of_target(&scores, *target)?))
    };

    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8);
    if workers <= 1 || pairs.len() < 64 {
        return pairs.iter().map(rank_one).collect();
    }

    let chunk = pairs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|shard| {
                scope.spawn(move || shard.iter().map(rank_one).collect::<Result<Vec<_>>>())
            })
            .collect();
        let mut merged = Vec::with_capacity(pairs.len());
        for handle in handles {
            merged.extend(handle.join().expect("evaluation shard panicked")?);
        }
        Ok(merged)
    })
}

/// Evaluate every prefix-split pair of the given sessions.
pub fn evaluate(
    params: &ModelParams,
    sessions: &[Session],
    n_cutoff: usize,
    l_max: usize,
) -> Result<EvalReport> {
    evaluate_pairs(params, &prefix_split(sessions), n_cutoff, l_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams, Variant};
    use crate::rng::{rng_from_seed, uniform_vec};
    use proptest::prelude::*;

    /// Brute-force oracle: full sort by (score desc, index asc), then find
    /// the target's position. IEEE equality (-0.0 == 0.0) keeps the oracle's
    /// tie semantics identical to the fast path's.
    fn rank_by_full_sort(scores: &[f64], target: usize) -> usize {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("finite scores")
                .then(a.cmp(&b))
        });
        order.iter().position(|&j| j + 1 == target).unwrap() + 1
    }

    #[test]
    fn unique_max_ranks_first() {
        let scores = [0.1, 0.9, 0.3];
        assert_eq!(rank_of_target(&scores, 2).unwrap(), 1);
        assert_eq!(rank_of_target(&scores, 3).unwrap(), 2);
        assert_eq!(rank_of_target(&scores, 1).unwrap(), 3);
    }

    #[test]
    fn all_equal_scores_break_by_index() {
        let scores = [0.5; 6];
        assert_eq!(rank_of_target(&scores, 1).unwrap(), 1);
        assert_eq!(rank_of_target(&scores, 4).unwrap(), 4);
        assert_eq!(rank_of_target(&scores, 6).unwrap(), 6);
    }

    #[test]
    fn recall_examples() {
        assert!((recall_at_n(&[1, 2, 21], 20) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_n(&[1, 1, 1], 20), 1.0);
    }

    #[test]
    fn mrr_examples() {
        let got = mrr_at_n(&[1, 2, 21], 20);
        assert!((got - 0.5).abs() < 1e-15);
        // boundary: rank exactly at the cutoff still counts
        assert!((mrr_at_n(&[20], 20) - 0.05).abs() < 1e-15);
        assert_eq!(mrr_at_n(&[21], 20), 0.0);
    }

    #[test]
    fn fast_rank_equals_sort_oracle_with_ties() {
        let mut rng = rng_from_seed(71);
        for case in 0..500 {
            let n = 200;
            let mut scores = uniform_vec(&mut rng, n, -1.0, 1.0);
            // quantize a share of entries so ties actually happen
            if case % 2 == 0 {
                for s in scores.iter_mut() {
                    *s = (*s * 4.0).round() / 4.0;
                }
            }
            let target = 1 + (case * 37) % n;
            assert_eq!(
                rank_of_target(&scores, target).unwrap(),
                rank_by_full_sort(&scores, target),
                "case {case}"
            );
        }
    }

    #[test]
    fn metrics_match_brute_force_on_random_vectors() {
        let mut rng = rng_from_seed(72);
        let n = 200;
        let mut fast = Vec::new();
        let mut slow = Vec::new();
        for case in 0..500 {
            let scores = uniform_vec(&mut rng, n, 0.0, 1.0);
            let target = 1 + (case * 13) % n;
            fast.push(rank_of_target(&scores, target).unwrap());
            slow.push(rank_by_full_sort(&scores, target));
        }
        assert_eq!(recall_at_n(&fast, 20), recall_at_n(&slow, 20));
        assert_eq!(mrr_at_n(&fast, 20), mrr_at_n(&slow, 20));
    }

    fn tiny_model(n_items: usize) -> ModelParams {
        let config = ModelConfig {
            d: 4,
            l: 3,
            variant: Variant::Iem,
            ..ModelConfig::default()
        };
        ModelParams::init(config, n_items, 0, 51)
    }

    #[test]
    fn bucket_counts_sum_to_example_count() {
        let params = tiny_model(9);
        let sessions: Vec<Session> = vec![
            Session {
                items: vec![1, 2, 3, 4],
            },
            Session { items: vec![5, 6] },
            Session {
                items: vec![7, 8, 9, 1, 2, 3],
            },
        ];
        let report = evaluate(&params, &sessions, 5, 4).unwrap();
        let total: usize = report.per_length.values().map(|b| b.count).sum();
        assert_eq!(total, report.example_count);
        assert_eq!(report.example_count, 3 + 1 + 5);
        // prefixes longer than l_max pool into the top bucket
        assert!(report.per_length.keys().all(|&k| (1..=4).contains(&k)));
    }

    #[test]
    fn cutoff_covering_vocabulary_gives_full_recall() {
        let params = tiny_model(9);
        let sessions = vec![Session {
            items: vec![1, 2, 3],
        }];
        let report = evaluate(&params, &sessions, 9, 10).unwrap();
        assert_eq!(report.recall, 1.0);
    }

    #[test]
    fn evaluation_is_pure() {
        let params = tiny_model(7);
        let sessions = vec![
            Session {
                items: vec![1, 2, 3],
            },
            Session { items: vec![4, 5] },
        ];
        let a = evaluate(&params, &sessions, 3, 10).unwrap();
        let b = evaluate(&params, &sessions, 3, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sharded_evaluation_matches_a_sequential_pass() {
        // enough pairs to engage the worker threads
        let params = tiny_model(9);
        let sessions: Vec<Session> = (0..60)
            .map(|i| Session {
                items: (1..=(2 + i % 7)).map(|j| (i + j) % 9 + 1).collect(),
            })
            .collect();
        let pairs = crate::dataset::prefix_split(&sessions);
        assert!(pairs.len() >= 64);

        let report = evaluate_pairs(&params, &pairs, 5, 10).unwrap();
        let mut ranks = Vec::new();
        for (prefix, target) in &pairs {
            let scores = crate::model::score_session(&params, prefix).unwrap();
            ranks.push(rank_of_target(&scores, *target).unwrap());
        }
        assert_eq!(report.example_count, ranks.len());
        assert_eq!(report.recall, recall_at_n(&ranks, 5));
        assert_eq!(report.mrr, mrr_at_n(&ranks, 5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mrr_never_exceeds_recall(ranks in proptest::collection::vec(1usize..50, 1..40), n in 1usize..30) {
            let r = recall_at_n(&ranks, n);
            let m = mrr_at_n(&ranks, n);
            prop_assert!(m <= r + 1e-15);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!((0.0..=1.0).contains(&m));
        }

        #[test]
        fn ranking_is_shift_and_scale_invariant(
            raw in proptest::collection::vec(-50i32..50, 10..40),
            shift in -10.0..10.0f64,
            scale_steps in 1u32..80,
            pick in 0usize..10,
        ) {
            // quantized scores keep transformed gaps far above f64 rounding,
            // so no new ties can appear
            let scores: Vec<f64> = raw.iter().map(|&v| v as f64 / 10.0).collect();
            let scale = scale_steps as f64 * 0.1;
            let target = 1 + pick % scores.len();
            let base = rank_of_target(&scores, target).unwrap();
            let moved: Vec<f64> = scores.iter().map(|s| s * scale + shift).collect();
            prop_assert_eq!(rank_of_target(&moved, target).unwrap(), base);
        }
    }
}
