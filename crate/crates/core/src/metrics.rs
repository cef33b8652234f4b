//! Rank correlations and the subset-evaluation consistency experiment.
//!
//! Ties get average ranks. Kendall's tau counts only pairs that are untied
//! in both rankings: `(C - D) / (C + D)`, which is tau-a when nothing ties.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{EvalError, EvaluationRecord, Evaluator};
use crate::greedy_filter::{draw_val_subset, RankBy};
use crate::search_space::Path;

/// Recorded next to correlation outputs.
pub const TIE_CONVENTION: &str =
    "average ranks for ties; kendall tau over pairs untied in both rankings";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {need} values, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("rankings differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("a ranking has zero variance; correlation is undefined")]
    ZeroVariance,
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error("evaluating path {path}: {source}")]
    Evaluation { path: Path, source: EvalError },
}

/// Ascending 1-based ranks; tied values share the mean of their positions.
pub fn rank_scores(values: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::TooShort { need: 1, got: 0 });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end share their mean.
        let mean = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean;
        }
        start = end;
    }
    Ok(ranks)
}

fn check_pair(r: &[f64], s: &[f64]) -> Result<(), MetricsError> {
    if r.len() != s.len() {
        return Err(MetricsError::Length(r.len(), s.len()));
    }
    if r.len() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: r.len(),
        });
    }
    for v in [r, s] {
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(MetricsError::NonFinite(i));
        }
    }
    Ok(())
}

fn is_permutation_ranking(r: &[f64]) -> bool {
    let n = r.len();
    let mut seen = vec![false; n];
    r.iter().all(|&v| {
        let i = v as usize;
        v == v.trunc() && v >= 1.0 && i <= n && !std::mem::replace(&mut seen[i - 1], true)
    })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho of two rankings: `1 - 6 sum d^2 / (n (n^2 - 1))` when
/// both are permutations of `1..=n`, Pearson correlation of the ranks
/// otherwise.
pub fn spearman_rho(r: &[f64], s: &[f64]) -> Result<f64, MetricsError> {
    check_pair(r, s)?;
    if is_permutation_ranking(r) && is_permutation_ranking(s) {
        let n = r.len() as f64;
        let d2: f64 = r.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
        return Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)));
    }
    pearson(r, s)
}

/// Number of pairs `(i < j)` within each run of equal keys, summed.
fn tied_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for v in sorted {
        if prev.as_ref() == Some(&v) {
            run += 1;
        } else {
            total += run * (run.saturating_sub(1)) / 2;
            run = 1;
        }
        prev = Some(v);
    }
    total + run * run.saturating_sub(1) / 2
}

/// Stable merge sort of `v` counting inversions (strictly greater before
/// smaller).
fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf.push(v[i]);
            i += 1;
        } else {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall's tau in `O(n log n)`.
pub fn kendall_tau(r: &[f64], s: &[f64]) -> Result<f64, MetricsError> {
    check_pair(r, s)?;
    let n = r.len() as u64;
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(s[a].total_cmp(&s[b])));
    let tied_r = tied_pairs(order.iter().map(|&i| r[i]));
    let tied_both = tied_pairs(order.iter().map(|&i| (r[i], s[i])));
    let mut ys: Vec<f64> = order.iter().map(|&i| s[i]).collect();
    let mut buf = Vec::with_capacity(ys.len());
    let discordant = count_inversions(&mut ys, &mut buf);
    let tied_s = tied_pairs(ys.iter().copied());
    let total = n * (n - 1) / 2;
    if tied_r == total || tied_s == total {
        return Err(MetricsError::ZeroVariance);
    }
    let untied = total + tied_both - tied_r - tied_s;
    if untied == 0 {
        return Err(MetricsError::ZeroVariance);
    }
    let concordant = untied - discordant;
    Ok((concordant as f64 - discordant as f64) / untied as f64)
}

/// Spearman's rho of raw scores.
pub fn spearman_of_scores(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    spearman_rho(&rank_scores(x)?, &rank_scores(y)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationConfig {
    pub n_paths: usize,
    pub subset_sizes: Vec<usize>,
    /// Validation examples defining the reference ranking; capped at the
    /// split size.
    pub full_eval_size: usize,
    /// Statistic that orders paths on each subset. The reference always
    /// uses accuracy on the full set.
    #[serde(default)]
    pub rank_by: RankBy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub subset_size: usize,
    pub spearman_rho: f64,
    pub kendall_tau: f64,
    pub n_paths: usize,
    pub seed: u64,
}

fn evaluate_all<E: Evaluator + ?Sized>(
    evaluator: &E,
    paths: &[Path],
    batch: &[usize],
) -> Result<Vec<EvaluationRecord>, MetricsError> {
    let results: Vec<_> = paths
        .par_iter()
        .map(|p| evaluator.evaluate(p, batch))
        .collect();
    paths
        .iter()
        .zip(results)
        .map(|(p, r)| {
            r.map_err(|source| MetricsError::Evaluation {
                path: p.clone(),
                source,
            })
        })
        .collect()
}

/// Samples `n_paths` distinct paths (as far as the space allows), ranks
/// them on random validation subsets of each size and correlates that
/// with the ranking by accuracy on the first `full_eval_size` validation
/// examples. Positive values mean agreement.
pub fn correlation_experiment<E: Evaluator + ?Sized, R: Rng + ?Sized>(
    evaluator: &E,
    config: &CorrelationConfig,
    rng: &mut R,
) -> Result<Vec<CorrelationRow>, MetricsError> {
    if config.n_paths < 10 {
        return Err(MetricsError::Config(format!(
            "n_paths must be at least 10, got {}",
            config.n_paths
        )));
    }
    let full = config.full_eval_size.min(evaluator.val_len());
    if full == 0 || config.subset_sizes.contains(&0) {
        return Err(MetricsError::Config(
            "evaluation sizes must be positive".into(),
        ));
    }
    let space = evaluator.space();
    let mut seen = std::collections::HashSet::new();
    let mut paths = Vec::with_capacity(config.n_paths);
    for _ in 0..config.n_paths.saturating_mul(100) {
        if paths.len() == config.n_paths {
            break;
        }
        let p = space.uniform_sample(rng);
        if seen.insert(p.clone()) {
            paths.push(p);
        }
    }
    if paths.len() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: paths.len(),
        });
    }
    let full_batch: Vec<usize> = (0..full).collect();
    let reference: Vec<f64> = evaluate_all(evaluator, &paths, &full_batch)?
        .iter()
        .map(|r| -r.accuracy)
        .collect();
    let reference = rank_scores(&reference)?;
    let mut rows = Vec::with_capacity(config.subset_sizes.len());
    for &size in &config.subset_sizes {
        let batch = if size >= full {
            full_batch.clone()
        } else {
            draw_val_subset(full, size, rng)
        };
        let records = evaluate_all(evaluator, &paths, &batch)?;
        let scores: Vec<f64> = match config.rank_by {
            RankBy::Loss => records.iter().map(|r| r.loss).collect(),
            RankBy::Accuracy => records.iter().map(|r| -r.accuracy).collect(),
        };
        let ranks = rank_scores(&scores)?;
        rows.push(CorrelationRow {
            subset_size: batch.len(),
            spearman_rho: spearman_rho(&ranks, &reference)?,
            kendall_tau: kendall_tau(&ranks, &reference)?,
            n_paths: paths.len(),
            seed: config.seed,
        });
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[CorrelationRow]) -> String {
    let mut out = String::from("subset_size,spearman_rho,kendall_tau,n_paths,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.subset_size, r.spearman_rho, r.kendall_tau, r.n_paths, r.seed
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::evaluator::{
        make_oracle_space, Dataset, OracleBackend, OracleSpec, SupernetBackend, SyntheticSpec,
    };
    use crate::rng::substream;
    use crate::search_space::SearchSpace;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn brute_kendall(r: &[f64], s: &[f64]) -> Option<f64> {
        let (mut c, mut d) = (0i64, 0i64);
        for i in 0..r.len() {
            for j in i + 1..r.len() {
                let prod = (r[i] - r[j]) * (s[i] - s[j]);
                if prod > 0.0 {
                    c += 1;
                } else if prod < 0.0 {
                    d += 1;
                }
            }
        }
        (c + d > 0).then(|| (c - d) as f64 / (c + d) as f64)
    }

    fn sort_ranks(values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|v| {
                let below = values.iter().filter(|w| *w < v).count() as f64;
                let equal = values.iter().filter(|w| *w == v).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_scores(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(rank_scores(&[5.0, 5.0, 1.0]).unwrap(), vec![2.5, 2.5, 1.0]);
        assert!(matches!(
            rank_scores(&[1.0, f64::NAN]),
            Err(MetricsError::NonFinite(1))
        ));
        assert!(rank_scores(&[]).is_err());
    }

    #[test]
    fn coefficient_examples() {
        let id = [1.0, 2.0, 3.0, 4.0];
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(spearman_rho(&id, &id).unwrap(), 1.0);
        assert_eq!(spearman_rho(&id, &rev).unwrap(), -1.0);
        assert_eq!(kendall_tau(&id, &id).unwrap(), 1.0);
        assert_eq!(kendall_tau(&id, &rev).unwrap(), -1.0);
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((kendall_tau(&id, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!(matches!(
            spearman_rho(&id, &[2.0; 4]),
            Err(MetricsError::ZeroVariance)
        ));
        assert!(matches!(
            kendall_tau(&id, &[2.0; 4]),
            Err(MetricsError::ZeroVariance)
        ));
        assert!(matches!(
            kendall_tau(&id, &id[..3]),
            Err(MetricsError::Length(4, 3))
        ));
        assert!(matches!(
            kendall_tau(&[1.0], &[1.0]),
            Err(MetricsError::TooShort { .. })
        ));
        // Only the first-last pair is untied in both, and it is concordant.
        assert_eq!(
            kendall_tau(&[1.0, 1.0, 2.0], &[1.0, 2.0, 2.0]).unwrap(),
            1.0
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kendall_matches_pairwise(n in 2usize..500, levels in 2u32..50, seed in any::<u64>()) {
            let mut rng = substream(seed, "kendall");
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
            match (kendall_tau(&r, &s), brute_kendall(&r, &s)) {
                (Ok(fast), Some(slow)) => prop_assert!((fast - slow).abs() <= 1e-12, "{} vs {}", fast, slow),
                (Err(_), None) => {}
                (Err(MetricsError::ZeroVariance), Some(_)) => unreachable!("zero variance implies no untied pair"),
                (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
            }
        }

        #[test]
        fn spearman_closed_form_equals_pearson(n in 2usize..500, seed in any::<u64>()) {
            let mut rng = substream(seed, "spearman");
            let x: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let (rx, ry) = (rank_scores(&x).unwrap(), rank_scores(&y).unwrap());
            let closed = spearman_rho(&rx, &ry).unwrap();
            let direct = pearson(&rx, &ry).unwrap();
            prop_assert!((closed - direct).abs() <= 1e-12);
            prop_assert!((closed - spearman_rho(&ry, &rx).unwrap()).abs() <= 1e-15);
            prop_assert!((kendall_tau(&rx, &ry).unwrap() - kendall_tau(&ry, &rx).unwrap()).abs() <= 1e-15);
        }

        #[test]
        fn ranks_match_sort_oracle(values in prop::collection::vec(-5i32..5, 1..60)) {
            let values: Vec<f64> = values.into_iter().map(f64::from).collect();
            prop_assert_eq!(rank_scores(&values).unwrap(), sort_ranks(&values));
        }

        #[test]
        fn invariant_under_monotone_maps(values in prop::collection::vec(-100.0f64..100.0, 3..80), other in prop::collection::vec(-100.0f64..100.0, 80)) {
            let other = &other[..values.len()];
            let mapped: Vec<f64> = values.iter().map(|v| (v / 40.0).exp() * 3.0 + 1.0).collect();
            let (ro, rv, rm) = (rank_scores(other).unwrap(), rank_scores(&values).unwrap(), rank_scores(&mapped).unwrap());
            if let (Ok(a), Ok(b)) = (kendall_tau(&rv, &ro), kendall_tau(&rm, &ro)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            if let (Ok(a), Ok(b)) = (spearman_rho(&rv, &ro), spearman_rho(&rm, &ro)) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn oracle_experiment_is_exact() {
        let (space, oracle) =
            make_oracle_space(&OracleSpec::new(5, 4, 3, 0.2).with_noise(0.1)).unwrap();
        let b = OracleBackend::new(space, oracle).unwrap();
        let config = CorrelationConfig {
            n_paths: 200,
            subset_sizes: vec![10, 100, 1000],
            full_eval_size: 1000,
            rank_by: RankBy::Loss,
            seed: 1,
        };
        let rows = correlation_experiment(&b, &config, &mut substream(1, "corr")).unwrap();
        for r in &rows {
            assert_eq!(r.kendall_tau, 1.0);
            assert_eq!(r.spearman_rho, 1.0);
        }
        let csv = rows_to_csv(&rows);
        assert!(csv.starts_with("subset_size,spearman_rho,kendall_tau,n_paths,seed\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn full_subset_same_statistic_is_self_consistent() {
        let space = SearchSpace::uniform(3, 4, &[0.5, 1.0, 2.0], true).unwrap();
        let data = Dataset::synthetic(&SyntheticSpec {
            num_classes: 3,
            dim: 4,
            train: 30,
            val: 200,
            test: 0,
            separation: 1.0,
            seed: 2,
        })
        .unwrap();
        let b = SupernetBackend::init(space, Arc::new(data), &mut substream(2, "init")).unwrap();
        let config = CorrelationConfig {
            n_paths: 40,
            subset_sizes: vec![200],
            full_eval_size: 200,
            rank_by: RankBy::Accuracy,
            seed: 2,
        };
        let rows = correlation_experiment(&b, &config, &mut substream(2, "corr")).unwrap();
        assert_eq!(rows[0].spearman_rho, 1.0);
        assert_eq!(rows[0].kendall_tau, 1.0);
    }

    #[test]
    fn rejects_small_experiments() {
        let (space, oracle) = make_oracle_space(&OracleSpec::new(3, 3, 3, 0.2)).unwrap();
        let b = OracleBackend::new(space, oracle).unwrap();
        let config = CorrelationConfig {
            n_paths: 5,
            subset_sizes: vec![10],
            full_eval_size: 100,
            rank_by: RankBy::Loss,
            seed: 1,
        };
        assert!(matches!(
            correlation_experiment(&b, &config, &mut substream(1, "c")),
            Err(MetricsError::Config(_))
        ));
    }
}
