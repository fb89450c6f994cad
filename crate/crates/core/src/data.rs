//! Interaction-log ingestion and dataset transforms.
//!
//! Pipeline: parse (tab or double-colon grammar) → positivity filter →
//! iterated k-core filter → chronological split (leave-one-out, or an
//! 80/20 user holdout for out-of-distribution evaluation) → sliding-window
//! training samples. Ids are re-indexed to dense `[0, n)` ranges after every
//! filtering step, assigned in ascending original-id order so the mapping is
//! reproducible. Within a user, records order by timestamp with original
//! file order breaking ties (interaction logs commonly carry duplicate
//! timestamps).
//!
//! Two clearly-labelled synthetic generators live here as well: a
//! deterministic next-item walk for trainer smoke tests, and a clustered
//! preference simulator used when no real dataset file is available. Neither
//! is benchmark data.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::Fnv;
use crate::rng::Rng;

pub type UserId = usize;
pub type ItemId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub user: UserId,
    pub item: ItemId,
    pub rating: f64,
    pub timestamp: i64,
}

/// A parsed, densely re-indexed interaction log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionLog {
    pub records: Vec<Record>,
    pub n_users: usize,
    pub n_items: usize,
    /// Dense id → original file id.
    pub user_origin: Vec<u64>,
    pub item_origin: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp`
    Tab,
    /// `user::item::rating::timestamp`
    DoubleColon,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    Malformed { line: usize, detail: String },
    SingleInteractionUser { user: UserId },
    EmptyTrainingSplit,
}

impl core::fmt::Display for DataError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DataError::Malformed { line, detail } => {
                write!(f, "line {line}: {detail}")
            }
            DataError::SingleInteractionUser { user } => {
                write!(f, "user {user} has a single interaction")
            }
            DataError::EmptyTrainingSplit => write!(f, "empty training split"),
        }
    }
}

/// Parse raw interaction text. Every line must match the declared grammar;
/// the first offending line aborts with its 1-based number. An empty input
/// parses to an empty log.
pub fn parse_interactions(text: &str, format: FileFormat) -> Result<InteractionLog, DataError> {
    let mut raw: Vec<(u64, u64, f64, i64)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = match format {
            FileFormat::Tab => line.split('\t').collect(),
            FileFormat::DoubleColon => line.split("::").collect(),
        };
        if fields.len() != 4 {
            return Err(DataError::Malformed {
                line: line_no,
                detail: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let user: u64 = fields[0].trim().parse().map_err(|_| DataError::Malformed {
            line: line_no,
            detail: format!("non-integer user id {:?}", fields[0]),
        })?;
        let item: u64 = fields[1].trim().parse().map_err(|_| DataError::Malformed {
            line: line_no,
            detail: format!("non-integer item id {:?}", fields[1]),
        })?;
        let rating: f64 = fields[2].trim().parse().map_err(|_| DataError::Malformed {
            line: line_no,
            detail: format!("non-numeric rating {:?}", fields[2]),
        })?;
        let timestamp: i64 = fields[3].trim().parse().map_err(|_| DataError::Malformed {
            line: line_no,
            detail: format!("non-integer timestamp {:?}", fields[3]),
        })?;
        raw.push((user, item, rating, timestamp));
    }
    Ok(reindex(raw))
}

/// Dense re-indexing in ascending original-id order.
fn reindex(raw: Vec<(u64, u64, f64, i64)>) -> InteractionLog {
    let mut users: Vec<u64> = raw.iter().map(|r| r.0).collect();
    users.sort_unstable();
    users.dedup();
    let mut items: Vec<u64> = raw.iter().map(|r| r.1).collect();
    items.sort_unstable();
    items.dedup();
    let user_map: BTreeMap<u64, usize> = users.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let item_map: BTreeMap<u64, usize> = items.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let records = raw
        .into_iter()
        .map(|(u, i, r, t)| Record {
            user: user_map[&u],
            item: item_map[&i],
            rating: r,
            timestamp: t,
        })
        .collect();
    InteractionLog {
        records,
        n_users: users.len(),
        n_items: items.len(),
        user_origin: users,
        item_origin: items,
    }
}

impl InteractionLog {
    /// FNV-1a digest of the full record stream; keys split caches.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.n_users as u64);
        h.write_u64(self.n_items as u64);
        for r in &self.records {
            h.write_u64(self.user_origin[r.user]);
            h.write_u64(self.item_origin[r.item]);
            h.write_u64(r.rating.to_bits());
            h.write_u64(r.timestamp as u64);
        }
        h.finish()
    }

    /// Per-user item sequences, each ordered by (timestamp, file order).
    pub fn user_sequences(&self) -> Vec<Vec<ItemId>> {
        let mut per_user: Vec<Vec<(i64, usize, ItemId)>> = vec![Vec::new(); self.n_users];
        for (pos, r) in self.records.iter().enumerate() {
            per_user[r.user].push((r.timestamp, pos, r.item));
        }
        per_user
            .into_iter()
            .map(|mut v| {
                v.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
                v.into_iter().map(|(_, _, item)| item).collect()
            })
            .collect()
    }

    fn filtered(&self, keep: &[bool]) -> InteractionLog {
        let raw: Vec<(u64, u64, f64, i64)> = self
            .records
            .iter()
            .zip(keep.iter())
            .filter(|(_, &k)| k)
            .map(|(r, _)| {
                (self.user_origin[r.user], self.item_origin[r.item], r.rating, r.timestamp)
            })
            .collect();
        reindex(raw)
    }
}

/// Keep records with `rating >= threshold` and re-index. A threshold at or
/// below the rating floor is the identity (minus any orphaned ids).
pub fn keep_positive(log: &InteractionLog, threshold: f64) -> InteractionLog {
    let keep: Vec<bool> = log.records.iter().map(|r| r.rating >= threshold).collect();
    log.filtered(&keep)
}

/// Iterated k-core: drop every user and item with degree < k, re-count,
/// repeat to the fixpoint, then re-index. An empty result is allowed.
pub fn kcore_filter(log: &InteractionLog, k: usize) -> InteractionLog {
    assert!(k >= 1);
    let mut keep: Vec<bool> = vec![true; log.records.len()];
    loop {
        let mut user_deg = vec![0usize; log.n_users];
        let mut item_deg = vec![0usize; log.n_items];
        for (i, r) in log.records.iter().enumerate() {
            if keep[i] {
                user_deg[r.user] += 1;
                item_deg[r.item] += 1;
            }
        }
        let mut changed = false;
        for (i, r) in log.records.iter().enumerate() {
            if keep[i] && (user_deg[r.user] < k || item_deg[r.item] < k) {
                keep[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    log.filtered(&keep)
}

// ── Splits ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitKind {
    /// Per user: chronologically last item is the test target, the rest
    /// train.
    LeaveOneOut,
    /// A seeded fraction of users train with their full sequences; the rest
    /// are test users whose last item is the target.
    UserHoldout { train_fraction: f64 },
}

/// Split parameters: the split kind plus the k-core threshold applied
/// upstream (20 for the MovieLens-style logs, 10 for sparser catalogs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub k_core: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub user: UserId,
    pub context: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    /// Training sequences (time-ordered item ids), one per training user.
    pub train_users: Vec<UserId>,
    pub train_seqs: Vec<Vec<ItemId>>,
    pub test: Vec<TestCase>,
    /// Users dropped for having fewer than two interactions.
    pub dropped: Vec<UserId>,
    pub n_users: usize,
    pub n_items: usize,
}

/// Split a (filtered) log. `seed` only matters for the user-holdout kind.
pub fn split(log: &InteractionLog, kind: SplitKind, seed: u64) -> SplitResult {
    let seqs = log.user_sequences();
    let mut dropped = Vec::new();
    match kind {
        SplitKind::LeaveOneOut => {
            let mut train_users = Vec::new();
            let mut train_seqs = Vec::new();
            let mut test = Vec::new();
            for (u, seq) in seqs.into_iter().enumerate() {
                if seq.len() < 2 {
                    dropped.push(u);
                    continue;
                }
                let target = *seq.last().unwrap();
                let context = seq[..seq.len() - 1].to_vec();
                train_users.push(u);
                train_seqs.push(context.clone());
                test.push(TestCase { user: u, context, target });
            }
            SplitResult {
                train_users,
                train_seqs,
                test,
                dropped,
                n_users: log.n_users,
                n_items: log.n_items,
            }
        }
        SplitKind::UserHoldout { train_fraction } => {
            let mut eligible: Vec<UserId> = Vec::new();
            for (u, seq) in seqs.iter().enumerate() {
                if seq.len() < 2 {
                    dropped.push(u);
                } else {
                    eligible.push(u);
                }
            }
            let mut order = eligible.clone();
            let mut rng = Rng::new(seed).derive(0x8020);
            rng.shuffle(&mut order);
            let n_train = (train_fraction * order.len() as f64) as usize;
            let mut train_set: Vec<UserId> = order[..n_train].to_vec();
            train_set.sort_unstable();
            let mut test_set: Vec<UserId> = order[n_train..].to_vec();
            test_set.sort_unstable();
            let train_seqs = train_set.iter().map(|&u| seqs[u].clone()).collect();
            let test = test_set
                .iter()
                .map(|&u| {
                    let seq = &seqs[u];
                    TestCase {
                        user: u,
                        context: seq[..seq.len() - 1].to_vec(),
                        target: *seq.last().unwrap(),
                    }
                })
                .collect();
            SplitResult {
                train_users: train_set,
                train_seqs,
                test,
                dropped,
                n_users: log.n_users,
                n_items: log.n_items,
            }
        }
    }
}

// ── Training samples ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index into the split's training-sequence list, not a raw user id.
    pub seq_index: usize,
    pub context: Vec<ItemId>,
    pub target: ItemId,
}

/// Sliding-window prefix samples: for a sequence of length `L`, one sample
/// per position (`L − 1` in total), each context truncated to the most
/// recent `max_len` items.
pub fn build_sequences(train_seqs: &[Vec<ItemId>], max_len: usize) -> Vec<Sample> {
    assert!(max_len >= 1);
    let mut out = Vec::new();
    for (si, seq) in train_seqs.iter().enumerate() {
        for t in 1..seq.len() {
            let lo = t.saturating_sub(max_len);
            out.push(Sample { seq_index: si, context: seq[lo..t].to_vec(), target: seq[t] });
        }
    }
    out
}

// ── Synthetic data (not benchmark data) ──────────────────────────────

/// Deterministic next-item toy: items form one permutation cycle and every
/// user walks it. The next item is a function of the last one, so a working
/// sequence model solves it exactly.
pub fn synthetic_markov(
    n_users: usize,
    n_items: usize,
    seq_len: usize,
    seed: u64,
) -> InteractionLog {
    assert!(seq_len < n_items, "walks must be shorter than the cycle");
    let mut rng = Rng::new(seed).derive(0x3A5);
    // Single n-cycle: conjugate a rotation by a random permutation.
    let mut perm: Vec<usize> = (0..n_items).collect();
    rng.shuffle(&mut perm);
    let mut succ = vec![0usize; n_items];
    for i in 0..n_items {
        succ[perm[i]] = perm[(i + 1) % n_items];
    }
    let mut raw = Vec::new();
    for u in 0..n_users {
        let mut item = rng.next_usize(n_items);
        for t in 0..seq_len {
            raw.push((u as u64, item as u64, 5.0, t as i64));
            item = succ[item];
        }
    }
    reindex(raw)
}

/// Knobs for the clustered-preference simulator.
#[derive(Debug, Clone, Copy)]
pub struct ClusteredConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_genres: usize,
    pub n_clusters: usize,
    /// Probability the next item stays in the current genre.
    pub stay_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ClusteredConfig {
    fn default() -> Self {
        ClusteredConfig {
            n_users: 943,
            n_items: 1100,
            n_genres: 12,
            n_clusters: 8,
            stay_prob: 0.55,
            min_len: 25,
            max_len: 140,
            seed: 100,
        }
    }
}

/// Clustered preference walk: items belong to genres; each user belongs to a
/// cluster with its own genre-preference profile; sequences hop genres with
/// cluster-specific probabilities and pick items by a popularity skew.
/// Ratings are higher inside preferred genres, so the positivity filter
/// trims cross-genre noise. This is the stand-in log used when no real
/// dataset file is supplied — shaped like a small MovieLens log, but
/// synthetic.
pub fn synthetic_clustered(cfg: &ClusteredConfig) -> InteractionLog {
    let mut rng = Rng::new(cfg.seed).derive(0xC1);
    let genre_of: Vec<usize> = (0..cfg.n_items).map(|i| i % cfg.n_genres).collect();
    let mut items_by_genre: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_genres];
    for (i, &g) in genre_of.iter().enumerate() {
        items_by_genre[g].push(i);
    }
    // Each cluster prefers a small set of genres, arranged so neighbouring
    // clusters overlap partially.
    let prefs: Vec<Vec<usize>> = (0..cfg.n_clusters)
        .map(|c| {
            let base = (c * cfg.n_genres) / cfg.n_clusters;
            vec![base % cfg.n_genres, (base + 1) % cfg.n_genres, (base + 2) % cfg.n_genres]
        })
        .collect();

    // Popularity skew within a genre: earlier items are more popular.
    let pick_item = |rng: &mut Rng, pool: &[usize]| -> usize {
        let r = rng.next_f64();
        let idx = ((r * r) * pool.len() as f64) as usize;
        pool[idx.min(pool.len() - 1)]
    };

    let mut raw = Vec::new();
    for u in 0..cfg.n_users {
        let cluster = rng.next_usize(cfg.n_clusters);
        let my_prefs = &prefs[cluster];
        let len = cfg.min_len + rng.next_usize(cfg.max_len - cfg.min_len + 1);
        let mut genre = my_prefs[rng.next_usize(my_prefs.len())];
        for t in 0..len {
            let in_pref = my_prefs.contains(&genre);
            let item = pick_item(&mut rng, &items_by_genre[genre]);
            // Preferred-genre picks rate high; strays rate low and mostly
            // fall to the positivity filter.
            let rating = if in_pref {
                4.0 + rng.next_usize(2) as f64
            } else {
                1.0 + rng.next_usize(3) as f64
            };
            raw.push((u as u64, item as u64, rating, t as i64));
            genre = if rng.next_f64() < cfg.stay_prob {
                genre
            } else if rng.next_f64() < 0.85 {
                my_prefs[rng.next_usize(my_prefs.len())]
            } else {
                rng.next_usize(cfg.n_genres)
            };
        }
    }
    reindex(raw)
}
