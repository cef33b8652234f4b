//! Multi-path sampling with rejection: draw `m` paths from the
//! exploration/exploitation mixture, score them on a small validation
//! subset and keep the `k` best.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate_pool::CandidatePool;
use crate::evaluator::{EvalError, EvaluationRecord, Evaluator};
use crate::search_space::{Path, SearchSpace};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter config: {0}")]
    Config(String),
    #[error("evaluating path {path}: {source}")]
    Evaluation { path: Path, source: EvalError },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Paths sampled per round.
    pub m: usize,
    /// Paths kept per round.
    pub k: usize,
    /// Validation examples per round; `None` picks [`default_subset_size`].
    #[serde(default)]
    pub val_subset_size: Option<usize>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            m: 10,
            k: 5,
            val_subset_size: None,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.k == 0 || self.k > self.m {
            return Err(FilterError::Config(format!(
                "need 1 <= k <= m, got k={} m={}",
                self.k, self.m
            )));
        }
        if self.val_subset_size == Some(0) {
            return Err(FilterError::Config(
                "val_subset_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn subset_size(&self, val_len: usize) -> usize {
        self.val_subset_size
            .unwrap_or_else(|| default_subset_size(val_len))
            .min(val_len)
    }
}

/// `max(64, 2% of the validation split)`, capped at the split size.
pub fn default_subset_size(val_len: usize) -> usize {
    (val_len / 50).max(64).min(val_len)
}

/// Which statistic orders the candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    #[default]
    Loss,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub path: Path,
    pub from_pool: bool,
}

/// `m` independent draws from `(1 - eps) U(A) + eps U(P)`. Each draw picks
/// the pool with probability `epsilon`; an empty pool always falls back to
/// the whole space.
pub fn sample_mixture<R: Rng + ?Sized>(
    space: &SearchSpace,
    pool: &CandidatePool,
    epsilon: f64,
    m: usize,
    rng: &mut R,
) -> Vec<Candidate> {
    let epsilon = epsilon.clamp(0.0, 1.0);
    (0..m)
        .map(|_| {
            if !pool.is_empty() && rng.random::<f64>() < epsilon {
                let path = pool.sample_uniform(rng).expect("non-empty pool").clone();
                Candidate {
                    path,
                    from_pool: true,
                }
            } else {
                Candidate {
                    path: space.uniform_sample(rng),
                    from_pool: false,
                }
            }
        })
        .collect()
}

/// Validation subset for one filter round, drawn without replacement and
/// sorted.
pub fn draw_val_subset<R: Rng + ?Sized>(val_len: usize, size: usize, rng: &mut R) -> Vec<usize> {
    let mut v = index::sample(rng, val_len, size.min(val_len)).into_vec();
    v.sort_unstable();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPath {
    pub path: Path,
    pub loss: f64,
    pub accuracy: f64,
    /// Index in the candidate list.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Evaluation of every candidate, in candidate order.
    pub evaluations: Vec<EvaluationRecord>,
    /// The `k` survivors, best first.
    pub kept: Vec<ScoredPath>,
}

/// Scores all candidates concurrently on `val_batch` and keeps the `k`
/// best (smallest loss, or largest accuracy), ties going to the earlier
/// candidate.
pub fn filter_paths<E: Evaluator + ?Sized>(
    candidates: &[Path],
    evaluator: &E,
    val_batch: &[usize],
    k: usize,
    rank_by: RankBy,
) -> Result<FilterOutcome, FilterError> {
    if k > candidates.len() {
        return Err(FilterError::Config(format!(
            "cannot keep {k} of {} candidates",
            candidates.len()
        )));
    }
    let results: Vec<Result<EvaluationRecord, EvalError>> = candidates
        .par_iter()
        .map(|p| evaluator.evaluate(p, val_batch))
        .collect();
    let mut evaluations = Vec::with_capacity(results.len());
    for (path, r) in candidates.iter().zip(results) {
        evaluations.push(r.map_err(|source| FilterError::Evaluation {
            path: path.clone(),
            source,
        })?);
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // Stable sort keeps earlier candidates ahead on ties.
    match rank_by {
        RankBy::Loss => order.sort_by(|&a, &b| evaluations[a].loss.total_cmp(&evaluations[b].loss)),
        RankBy::Accuracy => {
            order.sort_by(|&a, &b| evaluations[b].accuracy.total_cmp(&evaluations[a].accuracy))
        }
    }
    let kept = order
        .into_iter()
        .take(k)
        .map(|i| ScoredPath {
            path: candidates[i].clone(),
            loss: evaluations[i].loss,
            accuracy: evaluations[i].accuracy,
            position: i,
        })
        .collect();
    Ok(FilterOutcome { evaluations, kept })
}

fn ln_binomial_terms(m: u64, q: f64) -> Vec<f64> {
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let mut ln_c = 0.0;
    (0..=m)
        .map(|j| {
            if j > 0 {
                ln_c += ((m - j + 1) as f64).ln() - (j as f64).ln();
            }
            ln_c + j as f64 * ln_q + (m - j) as f64 * ln_1mq
        })
        .collect()
}

/// `P[X = j]` for `X ~ Binomial(m, q)`.
pub fn binomial_pmf(m: u64, j: u64, q: f64) -> f64 {
    if j > m {
        return 0.0;
    }
    if q <= 0.0 {
        return if j == 0 { 1.0 } else { 0.0 };
    }
    if q >= 1.0 {
        return if j == m { 1.0 } else { 0.0 };
    }
    ln_binomial_terms(m, q)[j as usize].exp()
}

/// Probability that at least `k` of `m` i.i.d. draws are good when each
/// is good with probability `q`: `sum_{j=k}^{m} C(m,j) q^j (1-q)^(m-j)`.
///
/// Summed as a log-sum-exp over log-domain terms, so large `m` neither
/// overflows the binomial coefficients nor underflows the powers.
pub fn confidence(m: u64, k: u64, q: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > m {
        return 0.0;
    }
    let q = q.clamp(0.0, 1.0);
    if q == 0.0 {
        return 0.0;
    }
    if q == 1.0 {
        return 1.0;
    }
    let terms = ln_binomial_terms(m, q);
    let tail = &terms[k as usize..];
    let max = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = tail.iter().map(|t| (t - max).exp()).sum();
    (max + sum.ln()).exp().clamp(0.0, 1.0)
}

/// Good-path probability under mixture sampling when the pool only holds
/// good paths: `eps + (1 - eps) * base_q`.
pub fn effective_q(epsilon: f64, base_q: f64) -> f64 {
    epsilon + (1.0 - epsilon) * base_q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{make_oracle_space, OracleBackend, OracleSpec};
    use crate::rng::substream;

    #[test]
    fn confidence_reference_values() {
        assert!((confidence(10, 5, 0.6) - 0.8338).abs() < 5e-5);
        assert!((confidence(10, 5, 0.8) - 0.9936).abs() < 5e-5);
        assert!((confidence(10, 5, effective_q(0.5, 0.6)) - 0.9936).abs() < 5e-5);
        for q in [0.0, 0.3, 1.0] {
            assert_eq!(confidence(10, 0, q), 1.0);
        }
        assert_eq!(confidence(10, 11, 0.5), 0.0);
        assert_eq!(confidence(10, 1, 0.0), 0.0);
        assert_eq!(confidence(10, 10, 1.0), 1.0);
        // Large m stays finite and in range.
        let c = confidence(5000, 2600, 0.5);
        assert!(c > 0.0 && c < 0.01, "{c}");
    }

    #[test]
    fn confidence_matches_statrs() {
        use statrs::distribution::{Binomial, DiscreteCDF};
        for m in [1u64, 5, 10, 37, 200] {
            for &q in &[0.01, 0.2, 0.5, 0.6, 0.93] {
                let b = Binomial::new(q, m).unwrap();
                for k in 1..=m {
                    let expected = b.sf(k - 1);
                    assert!(
                        (confidence(m, k, q) - expected).abs() < 1e-10,
                        "m={m} k={k} q={q}"
                    );
                }
            }
        }
    }

    #[test]
    fn pmf_sums_to_one_and_tail_is_monotone() {
        for m in [1u64, 10, 50, 300] {
            for i in 0..=20 {
                let q = i as f64 / 20.0;
                let s: f64 = (0..=m).map(|j| binomial_pmf(m, j, q)).sum();
                assert!((s - 1.0).abs() < 1e-12, "m={m} q={q} sum={s}");
                for k in 1..=m {
                    assert!(confidence(m, k, q) <= confidence(m, k - 1, q) + 1e-12);
                    if i > 0 {
                        assert!(
                            confidence(m, k, q) + 1e-12 >= confidence(m, k, (i - 1) as f64 / 20.0)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn effective_q_cases() {
        assert!((effective_q(0.5, 0.6) - 0.8).abs() < 1e-15);
        assert_eq!(effective_q(0.0, 0.37), 0.37);
        assert_eq!(effective_q(1.0, 0.37), 1.0);
        for e in 0..=10 {
            for b in 0..10 {
                let (e, b) = (e as f64 / 10.0, b as f64 / 10.0);
                assert!(effective_q(e, b + 0.1) >= effective_q(e, b));
                assert!(effective_q((e + 0.1).min(1.0), b) >= effective_q(e, b));
            }
        }
    }

    #[test]
    fn mixture_edge_cases() {
        let space = SearchSpace::uniform(4, 2, &[1.0, 2.0, 3.0], false).unwrap();
        let mut pool = CandidatePool::new(5);
        let mut rng = substream(0, "mix");
        // Empty pool falls back to uniform even at eps = 1.
        assert!(sample_mixture(&space, &pool, 1.0, 20, &mut rng)
            .iter()
            .all(|c| !c.from_pool));
        let only = Path(vec![2, 1, 0, 2]);
        pool.update(&[(only.clone(), 0.1)], 0).unwrap();
        let draws = sample_mixture(&space, &pool, 1.0, 50, &mut rng);
        assert!(draws.iter().all(|c| c.from_pool && c.path == only));
        assert!(sample_mixture(&space, &pool, 0.0, 50, &mut rng)
            .iter()
            .all(|c| !c.from_pool));
    }

    #[test]
    fn pool_fraction_matches_epsilon() {
        let space = SearchSpace::uniform(4, 2, &[1.0, 2.0, 3.0], false).unwrap();
        let mut pool = CandidatePool::new(5);
        pool.update(
            &[(Path(vec![0, 0, 0, 0]), 0.1), (Path(vec![1, 1, 1, 1]), 0.2)],
            0,
        )
        .unwrap();
        let n = 100_000;
        let draws = sample_mixture(&space, &pool, 0.8, n, &mut substream(4, "frac"));
        let frac = draws.iter().filter(|c| c.from_pool).count() as f64 / n as f64;
        let sigma = (0.8f64 * 0.2 / n as f64).sqrt();
        assert!((frac - 0.8).abs() < 3.0 * sigma, "{frac}");
    }

    #[test]
    fn filter_keeps_lowest_losses() {
        let (space, oracle) = make_oracle_space(&OracleSpec::new(5, 3, 3, 0.5)).unwrap();
        let backend = OracleBackend::new(space.clone(), oracle.clone()).unwrap();
        let mut rng = substream(1, "f");
        let cands: Vec<Path> = (0..10).map(|_| space.uniform_sample(&mut rng)).collect();
        let out = filter_paths(&cands, &backend, &[0, 1], 5, RankBy::Loss).unwrap();
        let mut losses: Vec<(f64, usize)> = cands
            .iter()
            .enumerate()
            .map(|(i, p)| (oracle.loss(p), i))
            .collect();
        losses.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = losses.iter().take(5).map(|x| x.1).collect();
        assert_eq!(
            out.kept.iter().map(|s| s.position).collect::<Vec<_>>(),
            expected
        );
        let worst_kept = out.kept.last().unwrap().loss;
        assert!(out
            .evaluations
            .iter()
            .enumerate()
            .filter(|(i, _)| !expected.contains(i))
            .all(|(_, e)| e.loss >= worst_kept));

        // m == k returns everything sorted.
        let all = filter_paths(&cands, &backend, &[0], 10, RankBy::Loss).unwrap();
        assert_eq!(all.kept.len(), 10);
        assert!(all.kept.windows(2).all(|w| w[0].loss <= w[1].loss));
    }

    #[test]
    fn ties_go_to_earlier_candidate() {
        let (space, oracle) = make_oracle_space(&OracleSpec::new(3, 3, 3, 0.5)).unwrap();
        let backend = OracleBackend::new(space, oracle.clone()).unwrap();
        let best = oracle.best_choice_path();
        let mut worse = best.clone();
        worse.0[0] = (worse.0[0] + 1) % 3;
        let tied = best.clone();
        // [worse, best, tied-best] keeping 1 -> position 1 wins over 2.
        let out = filter_paths(&[worse, best, tied], &backend, &[0], 1, RankBy::Loss).unwrap();
        assert_eq!(out.kept[0].position, 1);
        let out = filter_paths(
            &vec![out.kept[0].path.clone(); 3],
            &backend,
            &[0],
            2,
            RankBy::Accuracy,
        )
        .unwrap();
        assert_eq!(
            out.kept.iter().map(|s| s.position).collect::<Vec<_>>(),
            vec![0, 1]
        );
    }

    #[test]
    fn evaluation_error_names_path() {
        let (space, oracle) = make_oracle_space(&OracleSpec::new(3, 3, 3, 0.5)).unwrap();
        let backend = OracleBackend::new(space, oracle).unwrap();
        let bad = Path(vec![0, 7, 0]);
        let err = filter_paths(
            &[Path(vec![0, 0, 0]), bad.clone()],
            &backend,
            &[0],
            1,
            RankBy::Loss,
        )
        .unwrap_err();
        match err {
            FilterError::Evaluation { path, .. } => assert_eq!(path, bad),
            other => panic!("{other:?}"),
        }
        assert!(filter_paths(&[Path(vec![0, 0, 0])], &backend, &[0], 2, RankBy::Loss).is_err());
    }

    #[test]
    fn config_validation_and_subset_size() {
        assert!(FilterConfig::default().validate().is_ok());
        assert!(FilterConfig {
            m: 3,
            k: 4,
            val_subset_size: None
        }
        .validate()
        .is_err());
        assert!(FilterConfig {
            m: 3,
            k: 0,
            val_subset_size: None
        }
        .validate()
        .is_err());
        assert_eq!(default_subset_size(1000), 64);
        assert_eq!(default_subset_size(10_000), 200);
        assert_eq!(default_subset_size(30), 30);
        let s = draw_val_subset(100, 10, &mut substream(0, "v"));
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
}
