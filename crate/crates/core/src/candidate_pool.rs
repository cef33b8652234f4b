//! Bounded pool of the best-loss paths seen during training.
//!
//! Entries are kept in an ordered tree keyed by `(loss, inserted_at,
//! sequence)`, so the worst entry (largest loss, latest insertion among
//! equals) is evicted in `O(log n)`. A hash index gives `O(1)` membership
//! and a dense member list gives `O(1)` uniform sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::Path;

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    #[error("candidate pool is empty")]
    Empty,
    #[error("non-finite loss {loss} for path {path}")]
    NonFiniteLoss { path: Path, loss: f64 },
    #[error("pool file holds {found} entries, capacity is {capacity}")]
    OverCapacity { found: usize, capacity: usize },
    #[error("pool file lists path {0} twice")]
    Duplicate(Path),
    #[error("malformed pool file: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub path: Path,
    pub loss: f64,
    pub inserted_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key {
    loss: f64,
    inserted_at: u64,
    seq: u64,
}

impl Eq for Key {}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.loss
            .total_cmp(&other.loss)
            .then(self.inserted_at.cmp(&other.inserted_at))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
struct Slot {
    key: Key,
    member: usize,
}

/// Immutable copy of the pool's path set at some iteration.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PoolSnapshot {
    pub iteration: u64,
    pub paths: BTreeSet<Path>,
}

#[derive(Debug, Clone)]
pub struct CandidatePool {
    capacity: usize,
    order: BTreeMap<Key, Path>,
    index: HashMap<Path, Slot>,
    members: Vec<Path>,
    next_seq: u64,
}

impl PartialEq for CandidatePool {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity && self.entries() == other.entries()
    }
}

impl CandidatePool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "pool capacity must be positive");
        Self {
            capacity,
            order: BTreeMap::new(),
            index: HashMap::new(),
            members: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, path: &Path) -> bool {
        self.index.contains_key(path)
    }

    pub fn loss_of(&self, path: &Path) -> Option<f64> {
        self.index.get(path).map(|s| s.key.loss)
    }

    /// Entry that would be evicted next.
    pub fn worst(&self) -> Option<PoolEntry> {
        self.order.last_key_value().map(|(k, p)| PoolEntry {
            path: p.clone(),
            loss: k.loss,
            inserted_at: k.inserted_at,
        })
    }

    fn insert_new(&mut self, path: Path, loss: f64, inserted_at: u64) {
        let key = Key {
            loss,
            inserted_at,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        self.order.insert(key, path.clone());
        self.index.insert(
            path.clone(),
            Slot {
                key,
                member: self.members.len(),
            },
        );
        self.members.push(path);
    }

    fn remove_worst(&mut self) {
        let Some((_, path)) = self.order.pop_last() else {
            return;
        };
        let slot = self.index.remove(&path).expect("indexed");
        self.members.swap_remove(slot.member);
        if let Some(moved) = self.members.get(slot.member) {
            self.index.get_mut(moved).expect("indexed").member = slot.member;
        }
    }

    /// Applies `(path, loss)` pairs in order. A known path has its loss
    /// replaced; a new path is inserted while below capacity, otherwise
    /// only if its loss is strictly below the current worst, which is then
    /// evicted. Returns how many new paths entered.
    pub fn update(&mut self, entries: &[(Path, f64)], iteration: u64) -> Result<usize, PoolError> {
        if let Some((path, loss)) = entries.iter().find(|(_, l)| !l.is_finite()) {
            return Err(PoolError::NonFiniteLoss {
                path: path.clone(),
                loss: *loss,
            });
        }
        let mut inserted = 0;
        for (path, loss) in entries {
            if let Some(slot) = self.index.get_mut(path) {
                let old = slot.key;
                slot.key.loss = *loss;
                let new = slot.key;
                let p = self.order.remove(&old).expect("ordered");
                self.order.insert(new, p);
            } else if self.members.len() < self.capacity {
                self.insert_new(path.clone(), *loss, iteration);
                inserted += 1;
            } else if self
                .order
                .last_key_value()
                .is_some_and(|(k, _)| *loss < k.loss)
            {
                self.remove_worst();
                self.insert_new(path.clone(), *loss, iteration);
                inserted += 1;
            }
        }
        Ok(inserted)
    }

    /// Uniformly random member.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&Path, PoolError> {
        if self.members.is_empty() {
            return Err(PoolError::Empty);
        }
        Ok(&self.members[rng.random_range(0..self.members.len())])
    }

    /// Up to `n` entries, ascending loss, earlier insertion first on ties.
    pub fn top_n(&self, n: usize) -> Vec<PoolEntry> {
        self.order
            .iter()
            .take(n)
            .map(|(k, p)| PoolEntry {
                path: p.clone(),
                loss: k.loss,
                inserted_at: k.inserted_at,
            })
            .collect()
    }

    /// All entries in priority order.
    pub fn entries(&self) -> Vec<PoolEntry> {
        self.top_n(self.len())
    }

    pub fn snapshot(&self, iteration: u64) -> PoolSnapshot {
        PoolSnapshot {
            iteration,
            paths: self.members.iter().cloned().collect(),
        }
    }

    /// Fraction of current members absent from `snapshot`; 1 for an empty
    /// pool, 0 when the membership is unchanged.
    pub fn turnover(&self, snapshot: &PoolSnapshot) -> f64 {
        if self.members.is_empty() {
            return 1.0;
        }
        let kept = self
            .members
            .iter()
            .filter(|p| snapshot.paths.contains(*p))
            .count();
        1.0 - kept as f64 / self.members.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries()).expect("pool serializes")
    }

    /// Inverse of [`to_json`](Self::to_json); priority order is restored
    /// exactly, including ties.
    pub fn from_json(text: &str, capacity: usize) -> Result<Self, PoolError> {
        let entries: Vec<PoolEntry> =
            serde_json::from_str(text).map_err(|e| PoolError::Json(e.to_string()))?;
        Self::from_entries(entries, capacity)
    }

    pub fn from_entries(entries: Vec<PoolEntry>, capacity: usize) -> Result<Self, PoolError> {
        if entries.len() > capacity {
            return Err(PoolError::OverCapacity {
                found: entries.len(),
                capacity,
            });
        }
        let mut pool = Self::new(capacity);
        for e in entries {
            if !e.loss.is_finite() {
                return Err(PoolError::NonFiniteLoss {
                    path: e.path,
                    loss: e.loss,
                });
            }
            if pool.contains(&e.path) {
                return Err(PoolError::Duplicate(e.path));
            }
            pool.insert_new(e.path, e.loss, e.inserted_at);
        }
        Ok(pool)
    }
}

pub fn turnover(pool: &CandidatePool, snapshot: &PoolSnapshot) -> f64 {
    pool.turnover(snapshot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    fn p(i: usize) -> Path {
        Path(vec![i, i % 3])
    }

    #[test]
    fn insert_and_evict() {
        let mut pool = CandidatePool::new(3);
        pool.update(&[(p(1), 0.5), (p(2), 0.2)], 0).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.worst().unwrap().loss, 0.5);

        let mut pool = CandidatePool::new(3);
        pool.update(&[(p(1), 0.9), (p(2), 0.1), (p(3), 0.3)], 0)
            .unwrap();
        assert_eq!(pool.update(&[(p(4), 0.8)], 1).unwrap(), 1);
        assert!(!pool.contains(&p(1)));
        assert!(pool.contains(&p(4)));
        assert_eq!(pool.worst().unwrap().loss, 0.8);
        // Not strictly better than the worst: rejected.
        assert_eq!(pool.update(&[(p(5), 0.8)], 2).unwrap(), 0);
        assert!(!pool.contains(&p(5)));
    }

    #[test]
    fn refresh_overwrites_loss() {
        let mut pool = CandidatePool::new(2);
        pool.update(&[(p(1), 0.1), (p(2), 0.2)], 0).unwrap();
        pool.update(&[(p(1), 0.7)], 5).unwrap();
        assert_eq!(pool.len(), 2);
        let worst = pool.worst().unwrap();
        assert_eq!((worst.path, worst.loss, worst.inserted_at), (p(1), 0.7, 0));
    }

    #[test]
    fn top_n_order_and_ties() {
        let mut pool = CandidatePool::new(10);
        pool.update(&[(p(1), 0.3), (p(2), 0.1), (p(3), 0.2)], 0)
            .unwrap();
        let top: Vec<Path> = pool.top_n(2).into_iter().map(|e| e.path).collect();
        assert_eq!(top, vec![p(2), p(3)]);
        assert_eq!(pool.top_n(50).len(), 3);

        let mut pool = CandidatePool::new(10);
        pool.update(&[(p(7), 0.5)], 3).unwrap();
        pool.update(&[(p(8), 0.5)], 1).unwrap();
        let top: Vec<Path> = pool.top_n(2).into_iter().map(|e| e.path).collect();
        assert_eq!(top, vec![p(8), p(7)]);
    }

    #[test]
    fn sampling() {
        let mut pool = CandidatePool::new(10);
        assert_eq!(
            pool.sample_uniform(&mut substream(0, "s")),
            Err(PoolError::Empty)
        );
        pool.update(&[(p(4), 0.4)], 0).unwrap();
        let mut rng = substream(0, "s");
        for _ in 0..10 {
            assert_eq!(pool.sample_uniform(&mut rng).unwrap(), &p(4));
        }
    }

    #[test]
    fn sampling_is_uniform_and_seeded() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut pool = CandidatePool::new(10);
        let entries: Vec<(Path, f64)> = (0..10).map(|i| (p(i), i as f64 * 0.1)).collect();
        pool.update(&entries, 0).unwrap();
        let mut rng = substream(5, "u");
        let draws = 100_000;
        let mut counts = HashMap::new();
        for _ in 0..draws {
            *counts
                .entry(pool.sample_uniform(&mut rng).unwrap().clone())
                .or_insert(0usize) += 1;
        }
        let e = draws as f64 / 10.0;
        let stat: f64 = counts.values().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(
            stat < ChiSquared::new(9.0).unwrap().inverse_cdf(0.99),
            "{stat}"
        );

        let a: Vec<Path> = (0..20)
            .map(|_| pool.sample_uniform(&mut substream(1, "x")).unwrap().clone())
            .collect();
        let mut r1 = substream(1, "x");
        let mut r2 = substream(1, "x");
        let s1: Vec<Path> = (0..20)
            .map(|_| pool.sample_uniform(&mut r1).unwrap().clone())
            .collect();
        let s2: Vec<Path> = (0..20)
            .map(|_| pool.sample_uniform(&mut r2).unwrap().clone())
            .collect();
        assert_eq!(s1, s2);
        assert!(a.iter().all(|x| x == &a[0]));
    }

    #[test]
    fn turnover_counts() {
        let mut pool = CandidatePool::new(10);
        assert_eq!(pool.turnover(&PoolSnapshot::default()), 1.0);
        let first: Vec<(Path, f64)> = (0..10).map(|i| (p(i), 0.5 + i as f64 * 0.01)).collect();
        pool.update(&first, 0).unwrap();
        let snap = pool.snapshot(0);
        assert_eq!(pool.turnover(&snap), 0.0);
        let half: Vec<(Path, f64)> = (100..105).map(|i| (p(i), 0.1)).collect();
        pool.update(&half, 1).unwrap();
        assert_eq!(pool.turnover(&snap), 0.5);
        let rest: Vec<(Path, f64)> = (200..210).map(|i| (p(i), 0.01)).collect();
        pool.update(&rest, 2).unwrap();
        assert_eq!(pool.turnover(&snap), 1.0);
    }

    #[test]
    fn json_round_trip_preserves_priority_order() {
        let mut pool = CandidatePool::new(6);
        pool.update(&[(p(1), 0.5), (p(2), 0.5), (p(3), 0.25), (p(4), 0.5)], 2)
            .unwrap();
        pool.update(&[(p(5), 0.5)], 1).unwrap();
        let text = pool.to_json();
        let back = CandidatePool::from_json(&text, 6).unwrap();
        assert_eq!(back.entries(), pool.entries());
        assert_eq!(back.to_json(), text);
        assert!(matches!(
            CandidatePool::from_json(&text, 2),
            Err(PoolError::OverCapacity { .. })
        ));
        let dup = r#"[{"path":"1,1","loss":0.1,"inserted_at":0},{"path":"1,1","loss":0.2,"inserted_at":0}]"#;
        assert!(matches!(
            CandidatePool::from_json(dup, 5),
            Err(PoolError::Duplicate(_))
        ));
        assert!(pool.update(&[(p(9), f64::NAN)], 3).is_err());
    }

    proptest! {
        #[test]
        fn capacity_and_uniqueness_hold(
            cap in 1usize..12,
            stream in prop::collection::vec((0usize..30, 0u32..20), 0..200),
        ) {
            let mut pool = CandidatePool::new(cap);
            for (i, (id, loss)) in stream.iter().enumerate() {
                pool.update(&[(p(*id), *loss as f64 / 10.0)], i as u64).unwrap();
                prop_assert!(pool.len() <= cap);
                let entries = pool.entries();
                let set: BTreeSet<_> = entries.iter().map(|e| e.path.clone()).collect();
                prop_assert_eq!(set.len(), entries.len());
                prop_assert!(entries.windows(2).all(|w| w[0].loss <= w[1].loss));
                prop_assert_eq!(pool.turnover(&pool.snapshot(0)), 0.0);
            }
        }
    }
}
