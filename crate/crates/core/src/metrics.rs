//! Ranking metrics: NDCG@N and Hit@N over full-catalog rankings.
//!
//! Evaluation protocol: score every catalog item for the test context,
//! optionally exclude the user's training history from the candidates, rank
//! descending (ties broken by ascending item id), and score the single held
//! out target. With one relevant item IDCG is 1, so NDCG@N reduces to
//! `1 / log2(rank + 1)` when the target ranks within the top N and 0
//! otherwise. Per-user metrics are averaged in test-case order.

use alloc::vec::Vec;

use crate::data::{ItemId, TestCase};
use crate::math;

/// Top-N item ids in descending score order; ties resolve to the lower id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedList {
    pub items: Vec<ItemId>,
}

/// Rank the `n` best-scoring items, skipping any id where `excluded` is
/// true. `excluded` may be empty (nothing excluded).
pub fn rank_top_n(scores: &[f64], n: usize, excluded: &[bool]) -> RankedList {
    assert!(excluded.is_empty() || excluded.len() == scores.len());
    let mut idx: Vec<usize> = (0..scores.len())
        .filter(|&i| excluded.is_empty() || !excluded[i])
        .collect();
    let take = n.min(idx.len());
    idx.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(take);
    RankedList { items: idx }
}

/// `1 / log2(rank + 1)` for the target's 1-based rank in the list, 0 when it
/// is absent or ranked below N. IDCG is 1 for a single relevant item.
pub fn ndcg_at_n(ranked: &RankedList, target: ItemId, n: usize) -> f64 {
    assert!(n >= 1);
    match ranked.items.iter().take(n).position(|&i| i == target) {
        Some(pos) => 1.0 / math::log2((pos + 2) as f64),
        None => 0.0,
    }
}

/// 1 when the target appears in the top N, else 0.
pub fn hit_at_n(ranked: &RankedList, target: ItemId, n: usize) -> f64 {
    assert!(n >= 1);
    if ranked.items.iter().take(n).any(|&i| i == target) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub ndcg: f64,
    pub hit: f64,
    pub n_cases: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError<E> {
    EmptyTestSplit,
    Scorer(E),
}

impl<E: core::fmt::Display> core::fmt::Display for EvalError<E> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvalError::EmptyTestSplit => write!(f, "empty test split"),
            EvalError::Scorer(e) => write!(f, "scorer failed: {e}"),
        }
    }
}

/// Mean NDCG@N / Hit@N over the test cases. `score` returns one score per
/// catalog item for a case; `exclude_context` removes the user's training
/// history (the case context) from the candidate set. Cases accumulate in
/// their given order, so the result is deterministic for a fixed test list.
pub fn evaluate<E>(
    test: &[TestCase],
    n_items: usize,
    n: usize,
    exclude_context: bool,
    mut score: impl FnMut(&TestCase) -> Result<Vec<f64>, E>,
) -> Result<MetricSummary, EvalError<E>> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    let mut ndcg_sum = 0.0;
    let mut hit_sum = 0.0;
    let mut excluded = alloc::vec![false; n_items];
    for case in test {
        let scores = score(case).map_err(EvalError::Scorer)?;
        debug_assert_eq!(scores.len(), n_items);
        let ranked = if exclude_context {
            for &i in &case.context {
                excluded[i] = true;
            }
            // The target itself is never excluded even if it repeats in the
            // history.
            excluded[case.target] = false;
            let r = rank_top_n(&scores, n, &excluded);
            for &i in &case.context {
                excluded[i] = false;
            }
            r
        } else {
            rank_top_n(&scores, n, &[])
        };
        ndcg_sum += ndcg_at_n(&ranked, case.target, n);
        hit_sum += hit_at_n(&ranked, case.target, n);
    }
    let m = test.len() as f64;
    Ok(MetricSummary { ndcg: ndcg_sum / m, hit: hit_sum / m, n_cases: test.len() })
}
