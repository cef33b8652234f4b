//! Synthetic tabular oracle with a known good/weak partition.
//!
//! `loss(path) = -sum_l quality[l][o_l]
//!               + interaction_scale * sum_l pair(l, o_l, o_{l+1})
//!               + noise_sigma * z(path)`
//!
//! where `pair` is a hashed value in `[-1, 1]` and `z` a hashed standard
//! normal, both keyed by `interaction_seed`. The loss is a pure function of
//! the path. Paths with loss below `threshold` form the good set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EvalError, EvaluationRecord, Evaluator, Trainable};
use crate::rng::{digest64, substream};
use crate::search_space::{Layer, OperationChoice, Path, SearchSpace, SpaceError};

/// Spaces up to this many paths get an exactly enumerated threshold.
pub const EXACT_ENUMERATION_LIMIT: u64 = 400_000;
const THRESHOLD_SAMPLES: usize = 100_000;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("good fraction {0} must lie in (0, 1]")]
    Fraction(f64),
    #[error("good fraction {fraction} is not achievable: nearest realizable is {realized} over {total} paths")]
    Infeasible {
        fraction: f64,
        realized: f64,
        total: u64,
    },
    #[error("oracle spec needs at least one layer and one choice")]
    EmptySpace,
    #[error("noise and interaction scales must be finite and non-negative")]
    Scale,
    #[error("oracle table does not match search space")]
    Mismatch,
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularOracle {
    /// `quality[layer][choice]`, higher is better.
    pub quality: Vec<Vec<f64>>,
    pub interaction_seed: u64,
    #[serde(default)]
    pub interaction_scale: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    pub threshold: f64,
}

fn unit_interval(key: u64) -> f64 {
    (key >> 11) as f64 / (1u64 << 53) as f64
}

fn path_bytes(path: &Path) -> Vec<u8> {
    path.ops()
        .iter()
        .flat_map(|&o| (o as u64).to_le_bytes())
        .collect()
}

impl TabularOracle {
    fn pair_term(&self, layer: usize, a: usize, b: usize) -> f64 {
        let key = digest64(&[
            b"pair",
            &self.interaction_seed.to_le_bytes(),
            &(layer as u64).to_le_bytes(),
            &(a as u64).to_le_bytes(),
            &(b as u64).to_le_bytes(),
        ]);
        2.0 * unit_interval(key) - 1.0
    }

    fn noise_term(&self, path: &Path) -> f64 {
        let key = digest64(&[
            b"noise",
            &self.interaction_seed.to_le_bytes(),
            &path_bytes(path),
        ]);
        ChaCha8Rng::seed_from_u64(key).sample(StandardNormal)
    }

    /// Loss with `threshold` ignored; callers validate the path.
    pub fn loss(&self, path: &Path) -> f64 {
        let ops = path.ops();
        let mut loss = -ops
            .iter()
            .enumerate()
            .map(|(l, &o)| self.quality[l][o])
            .sum::<f64>();
        if self.interaction_scale != 0.0 {
            loss += self.interaction_scale
                * ops
                    .windows(2)
                    .enumerate()
                    .map(|(l, w)| self.pair_term(l, w[0], w[1]))
                    .sum::<f64>();
        }
        if self.noise_sigma != 0.0 {
            loss += self.noise_sigma * self.noise_term(path);
        }
        loss
    }

    /// Strictly decreasing map of loss onto `(0, 1)`.
    pub fn accuracy_of_loss(loss: f64) -> f64 {
        1.0 / (1.0 + loss.exp())
    }

    pub fn accuracy(&self, path: &Path) -> f64 {
        Self::accuracy_of_loss(self.loss(path))
    }

    pub fn is_good(&self, path: &Path) -> bool {
        self.loss(path) < self.threshold
    }

    pub fn matches(&self, space: &SearchSpace) -> bool {
        self.quality.len() == space.num_layers()
            && self
                .quality
                .iter()
                .enumerate()
                .all(|(l, q)| q.len() == space.num_choices(l))
    }

    /// Path of per-layer best quality; the loss minimizer when noise and
    /// interactions are off.
    pub fn best_choice_path(&self) -> Path {
        Path(
            self.quality
                .iter()
                .map(|q| (0..q.len()).fold(0, |best, i| if q[i] > q[best] { i } else { best }))
                .collect(),
        )
    }
}

pub fn oracle_loss(oracle: &TabularOracle, path: &Path) -> f64 {
    oracle.loss(path)
}

/// Parameters for generating a space/oracle pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub num_layers: usize,
    pub num_choices: usize,
    pub seed: u64,
    pub good_fraction: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub interaction_scale: f64,
    /// Feature width of the generated space (affects flops only).
    #[serde(default = "default_dim")]
    pub dim: usize,
}

fn default_dim() -> usize {
    8
}

impl OracleSpec {
    pub fn new(num_layers: usize, num_choices: usize, seed: u64, good_fraction: f64) -> Self {
        Self {
            num_layers,
            num_choices,
            seed,
            good_fraction,
            noise_sigma: 0.0,
            interaction_scale: 0.0,
            dim: default_dim(),
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_interactions(mut self, scale: f64) -> Self {
        self.interaction_scale = scale;
        self
    }
}

/// Space with `num_choices` affine blocks of growing width per layer, and
/// an oracle whose good set covers `good_fraction` of it.
///
/// Quality mixes a random per-choice term with a bonus for wider blocks,
/// so accuracy trades off against flops. With at most
/// [`EXACT_ENUMERATION_LIMIT`] paths the threshold is placed by exhaustive
/// enumeration and the realized fraction is within `1/|A|` of the target;
/// larger spaces use a sampled quantile.
pub fn make_oracle_space(spec: &OracleSpec) -> Result<(SearchSpace, TabularOracle), OracleError> {
    if !(spec.good_fraction > 0.0 && spec.good_fraction <= 1.0) {
        return Err(OracleError::Fraction(spec.good_fraction));
    }
    if spec.num_layers == 0 || spec.num_choices == 0 || spec.dim == 0 {
        return Err(OracleError::EmptySpace);
    }
    if !(spec.noise_sigma.is_finite()
        && spec.noise_sigma >= 0.0
        && spec.interaction_scale.is_finite()
        && spec.interaction_scale >= 0.0)
    {
        return Err(OracleError::Scale);
    }
    let o = spec.num_choices;
    let layers = (0..spec.num_layers)
        .map(|_| Layer {
            input_dim: spec.dim,
            output_dim: spec.dim,
            choices: (0..o)
                .map(|c| {
                    let w = 0.5 * (c + 1) as f64;
                    let flops = crate::search_space::affine_block_flops(spec.dim, spec.dim, w);
                    OperationChoice::affine(
                        c as u32,
                        spec.dim,
                        spec.dim,
                        w,
                        0.05 + flops as f64 * 1e-4,
                    )
                })
                .collect(),
        })
        .collect();
    let space = SearchSpace::new(layers)?;

    let mut rng = substream(spec.seed, "oracle-quality");
    let quality = (0..spec.num_layers)
        .map(|_| {
            (0..o)
                .map(|c| {
                    let width_bonus = if o > 1 {
                        c as f64 / (o - 1) as f64
                    } else {
                        0.0
                    };
                    0.6 * rng.random::<f64>() + 0.4 * width_bonus
                })
                .collect()
        })
        .collect();
    let mut oracle = TabularOracle {
        quality,
        interaction_seed: rng.random(),
        interaction_scale: spec.interaction_scale,
        noise_sigma: spec.noise_sigma,
        threshold: f64::INFINITY,
    };

    let (mut losses, exact) = match space.space_size_u64() {
        Some(n) if n <= EXACT_ENUMERATION_LIMIT => (
            space
                .enumerate()
                .map(|p| oracle.loss(&p))
                .collect::<Vec<_>>(),
            true,
        ),
        _ => {
            let mut srng = substream(spec.seed, "oracle-threshold");
            (
                (0..THRESHOLD_SAMPLES)
                    .map(|_| oracle.loss(&space.uniform_sample(&mut srng)))
                    .collect(),
                false,
            )
        }
    };
    losses.sort_by(f64::total_cmp);
    let n = losses.len();
    let target = ((spec.good_fraction * n as f64).round() as usize).min(n);
    oracle.threshold = if target >= n {
        losses[n - 1] + 1.0
    } else if target == 0 {
        return Err(OracleError::Infeasible {
            fraction: spec.good_fraction,
            realized: 0.0,
            total: n as u64,
        });
    } else if losses[target - 1] < losses[target] {
        0.5 * (losses[target - 1] + losses[target])
    } else {
        // Tied losses straddle the cut; move it to the nearest gap.
        let below = losses[..target].iter().rposition(|&l| l < losses[target]);
        let above = losses[target..]
            .iter()
            .position(|&l| l > losses[target - 1])
            .map(|i| i + target);
        let candidates = [below.map(|i| i + 1), above];
        let best = candidates
            .iter()
            .flatten()
            .min_by_key(|&&count| count.abs_diff(target))
            .copied()
            .ok_or(OracleError::Infeasible {
                fraction: spec.good_fraction,
                realized: 0.0,
                total: n as u64,
            })?;
        if exact && (best as f64 - target as f64).abs() > 1.0 {
            return Err(OracleError::Infeasible {
                fraction: spec.good_fraction,
                realized: best as f64 / n as f64,
                total: n as u64,
            });
        }
        if best == n {
            losses[n - 1] + 1.0
        } else {
            0.5 * (losses[best - 1] + losses[best])
        }
    };
    Ok((space, oracle))
}

/// Evaluator over a tabular oracle.
///
/// `val_len` and `train_len` size virtual splits so the trainer can draw
/// batches; training steps are no-ops that report the oracle loss. When
/// `subset_noise > 0` the loss on a batch gets extra noise
/// `subset_noise * z / sqrt(|batch|)` keyed by path and batch contents,
/// modelling a small validation subset.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    space: SearchSpace,
    pub oracle: TabularOracle,
    pub val_len: usize,
    pub train_len: usize,
    pub subset_noise: f64,
}

impl OracleBackend {
    pub fn new(space: SearchSpace, oracle: TabularOracle) -> Result<Self, OracleError> {
        if !oracle.matches(&space) {
            return Err(OracleError::Mismatch);
        }
        Ok(Self {
            space,
            oracle,
            val_len: 1000,
            train_len: 10_000,
            subset_noise: 0.0,
        })
    }

    pub fn with_subset_noise(mut self, sigma: f64) -> Self {
        self.subset_noise = sigma;
        self
    }

    fn batch_noise(&self, path: &Path, batch: &[usize]) -> f64 {
        let batch_bytes: Vec<u8> = batch
            .iter()
            .flat_map(|&i| (i as u64).to_le_bytes())
            .collect();
        let key = digest64(&[
            b"subset",
            &self.oracle.interaction_seed.to_le_bytes(),
            &path_bytes(path),
            &batch_bytes,
        ]);
        let z: f64 = ChaCha8Rng::seed_from_u64(key).sample(StandardNormal);
        self.subset_noise * z / (batch.len() as f64).sqrt()
    }
}

impl Evaluator for OracleBackend {
    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn val_len(&self) -> usize {
        self.val_len
    }

    fn evaluate(&self, path: &Path, val_batch: &[usize]) -> Result<EvaluationRecord, EvalError> {
        self.space.validate_path(path)?;
        if val_batch.is_empty() {
            return Err(EvalError::EmptyBatch);
        }
        if let Some(&bad) = val_batch.iter().find(|&&i| i >= self.val_len) {
            return Err(EvalError::BatchIndex {
                index: bad,
                len: self.val_len,
            });
        }
        let mut loss = self.oracle.loss(path);
        if self.subset_noise > 0.0 {
            loss += self.batch_noise(path, val_batch);
        }
        if !loss.is_finite() {
            return Err(EvalError::NonFiniteLoss {
                path: path.clone(),
                loss,
            });
        }
        Ok(EvaluationRecord {
            path: path.clone(),
            loss,
            accuracy: TabularOracle::accuracy_of_loss(loss),
            num_images: val_batch.len(),
        })
    }
}

impl Trainable for OracleBackend {
    fn train_len(&self) -> usize {
        self.train_len
    }

    fn train_step(
        &mut self,
        path: &Path,
        train_batch: &[usize],
        _lr: f64,
    ) -> Result<f64, EvalError> {
        self.space.validate_path(path)?;
        if train_batch.is_empty() {
            return Err(EvalError::EmptyBatch);
        }
        Ok(self.oracle.loss(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_choice_path_is_global_minimum_without_noise() {
        for seed in 0..5 {
            let (space, oracle) = make_oracle_space(&OracleSpec::new(5, 4, seed, 0.5)).unwrap();
            let best = oracle.best_choice_path();
            let min = space
                .enumerate()
                .map(|p| oracle.loss(&p))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(oracle.loss(&best), min);
        }
    }

    #[test]
    fn loss_is_pure() {
        let (space, oracle) = make_oracle_space(
            &OracleSpec::new(4, 3, 1, 0.5)
                .with_noise(0.3)
                .with_interactions(0.2),
        )
        .unwrap();
        for p in space.enumerate() {
            assert_eq!(oracle.loss(&p).to_bits(), oracle.loss(&p.clone()).to_bits());
        }
    }

    #[test]
    fn realized_fraction_matches_target() {
        let (space, oracle) = make_oracle_space(&OracleSpec::new(4, 3, 7, 0.6)).unwrap();
        let good = space.enumerate().filter(|p| oracle.is_good(p)).count();
        let q = good as f64 / 81.0;
        assert!((q - 0.6).abs() <= 1.0 / 81.0, "q = {q}");
    }

    #[test]
    fn partition_is_ordered() {
        let (space, oracle) = make_oracle_space(
            &OracleSpec::new(6, 3, 2, 0.3)
                .with_noise(0.1)
                .with_interactions(0.1),
        )
        .unwrap();
        let (good, weak): (Vec<_>, Vec<_>) = space.enumerate().partition(|p| oracle.is_good(p));
        let worst_good = good
            .iter()
            .map(|p| oracle.loss(p))
            .fold(f64::NEG_INFINITY, f64::max);
        let best_weak = weak
            .iter()
            .map(|p| oracle.loss(p))
            .fold(f64::INFINITY, f64::min);
        assert!(worst_good < best_weak);
        assert!(good
            .iter()
            .all(|p| oracle.accuracy(p)
                > weak.iter().map(|w| oracle.accuracy(w)).fold(0.0, f64::max)));
    }

    #[test]
    fn full_fraction_makes_everything_good() {
        let (space, oracle) = make_oracle_space(&OracleSpec::new(3, 3, 0, 1.0)).unwrap();
        assert!(space.enumerate().all(|p| oracle.is_good(&p)));
    }

    #[test]
    fn deterministic_generation_and_errors() {
        let spec = OracleSpec::new(4, 3, 11, 0.4).with_interactions(0.5);
        assert_eq!(
            make_oracle_space(&spec).unwrap(),
            make_oracle_space(&spec).unwrap()
        );
        assert_ne!(
            make_oracle_space(&spec).unwrap().1,
            make_oracle_space(&OracleSpec {
                seed: 12,
                ..spec.clone()
            })
            .unwrap()
            .1
        );
        assert_eq!(
            make_oracle_space(&OracleSpec::new(4, 3, 0, 0.0)).unwrap_err(),
            OracleError::Fraction(0.0)
        );
        assert_eq!(
            make_oracle_space(&OracleSpec::new(4, 3, 0, 1.5)).unwrap_err(),
            OracleError::Fraction(1.5)
        );
        assert!(matches!(
            make_oracle_space(&OracleSpec::new(2, 2, 0, 0.01)),
            Err(OracleError::Infeasible { .. })
        ));
    }

    #[test]
    fn large_space_uses_sampled_threshold() {
        let (space, oracle) = make_oracle_space(&OracleSpec::new(12, 4, 3, 0.25)).unwrap();
        let mut rng = substream(99, "check");
        let n = 20_000;
        let good = (0..n)
            .filter(|_| oracle.is_good(&space.uniform_sample(&mut rng)))
            .count();
        let q = good as f64 / n as f64;
        assert!((q - 0.25).abs() < 0.02, "{q}");
    }

    #[test]
    fn backend_subset_noise_depends_on_batch() {
        let (space, oracle) = make_oracle_space(&OracleSpec::new(3, 3, 0, 0.5)).unwrap();
        let clean = OracleBackend::new(space.clone(), oracle.clone()).unwrap();
        let noisy = OracleBackend::new(space, oracle.clone())
            .unwrap()
            .with_subset_noise(1.0);
        let p = Path(vec![1, 2, 0]);
        let r = clean.evaluate(&p, &[0, 1, 2]).unwrap();
        assert_eq!(r.loss, oracle.loss(&p));
        let a = noisy.evaluate(&p, &[0, 1, 2]).unwrap();
        let b = noisy.evaluate(&p, &[3, 4, 5]).unwrap();
        assert_ne!(a.loss, b.loss);
        assert_eq!(a, noisy.evaluate(&p, &[0, 1, 2]).unwrap());
        assert!(clean.evaluate(&p, &[]).is_err());
        assert!(clean.evaluate(&p, &[5000]).is_err());
    }
}
