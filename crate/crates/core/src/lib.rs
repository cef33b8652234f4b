//! Greedy one-shot architecture search.
//!
//! A supernet holds one parameter block per (layer, choice) pair and every
//! architecture in the space is a single path through it. Training samples
//! `m` paths per round, ranks them by loss on a small validation subset and
//! only optimizes the best `k`. Paths that survive filtering are kept in a
//! bounded candidate pool which is reused for exploitation sampling, for an
//! adaptive stopping rule and for seeding the evolutionary search that
//! picks the final architecture.
//!
//! Two interchangeable backends score paths: a small trainable
//! affine/ReLU supernet ([`evaluator::SupernetBackend`]) and a synthetic
//! tabular oracle with a known good/weak partition
//! ([`evaluator::OracleBackend`]) that makes exhaustive verification
//! possible.

pub mod candidate_pool;
pub mod evaluator;
pub mod evolution;
pub mod greedy_filter;
pub mod metrics;
pub mod rng;
pub mod search_space;
pub mod trainer;

pub use candidate_pool::{CandidatePool, PoolEntry, PoolSnapshot};
pub use evaluator::{EvaluationRecord, Evaluator, OracleBackend, SupernetBackend, Trainable};
pub use search_space::{Constraint, CostSummary, Path, SearchSpace};
