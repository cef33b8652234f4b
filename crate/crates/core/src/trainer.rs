//! Greedy supernet training: a uniform warm-up, then rounds of
//! sample-filter-train with a growing share of pool candidates, stopped
//! once the pool stops changing.
//!
//! Units: an *iteration* is one optimizer step on one path. A *round* is
//! one filter call followed by up to `k` iterations.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate_pool::{CandidatePool, PoolError, PoolSnapshot};
use crate::evaluator::cosine_lr;
use crate::evaluator::{EvalError, Trainable};
use crate::greedy_filter::{
    draw_val_subset, filter_paths, sample_mixture, FilterConfig, FilterError, RankBy,
};
use crate::rng::{substream, Rng};
use crate::search_space::Path;

pub const DEFAULT_EVAL_COST_FACTOR: f64 = 3.33;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("training aborted at iteration {iter}: {source}")]
    Aborted {
        iter: u64,
        source: EvalError,
        partial: Box<TrainOutcome>,
    },
    #[error("checkpoint hook failed at iteration {iter}: {message}")]
    Checkpoint { iter: u64, message: String },
}

fn default_epsilon_target() -> f64 {
    0.8
}

fn default_alpha() -> f64 {
    0.08
}

fn default_pool_capacity() -> usize {
    1000
}

fn default_eval_cost_factor() -> f64 {
    DEFAULT_EVAL_COST_FACTOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub filter: FilterConfig,
    /// Defaults to 10% of `max_iters`.
    #[serde(default)]
    pub warmup_iters: Option<u64>,
    #[serde(default = "default_epsilon_target")]
    pub epsilon_target: f64,
    /// Defaults to all iterations after warm-up.
    #[serde(default)]
    pub epsilon_ramp_iters: Option<u64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Defaults to one pass over the training split.
    #[serde(default)]
    pub turnover_window_iters: Option<u64>,
    pub max_iters: u64,
    pub batch_size: usize,
    pub lr0: f64,
    #[serde(default = "default_pool_capacity")]
    pub pool_capacity: usize,
    #[serde(default)]
    pub rank_by: RankBy,
    #[serde(default = "default_eval_cost_factor")]
    pub eval_cost_factor: f64,
    /// Iterations between periodic checkpoints; `None` only checkpoints
    /// at the end.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    pub seed: u64,
}

impl TrainConfig {
    /// A small config with every optional knob at its default.
    pub fn new(max_iters: u64, batch_size: usize, lr0: f64, seed: u64) -> Self {
        Self {
            filter: FilterConfig::default(),
            warmup_iters: None,
            epsilon_target: default_epsilon_target(),
            epsilon_ramp_iters: None,
            alpha: default_alpha(),
            turnover_window_iters: None,
            max_iters,
            batch_size,
            lr0,
            pool_capacity: default_pool_capacity(),
            rank_by: RankBy::Loss,
            eval_cost_factor: default_eval_cost_factor(),
            checkpoint_every: None,
            seed,
        }
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_iters.unwrap_or(self.max_iters / 10)
    }

    pub fn schedule(&self) -> EpsilonSchedule {
        let warmup_iters = self.warmup();
        let ramp_iters = self
            .epsilon_ramp_iters
            .unwrap_or(self.max_iters.saturating_sub(warmup_iters));
        EpsilonSchedule {
            target: self.epsilon_target,
            ramp_iters,
            warmup_iters,
        }
    }

    pub fn turnover_window(&self, train_len: usize) -> u64 {
        self.turnover_window_iters
            .unwrap_or_else(|| train_len.div_ceil(self.batch_size.max(1)) as u64)
            .max(1)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.filter.validate()?;
        let bad = |msg: String| Err(TrainError::Config(msg));
        if !(0.0..=1.0).contains(&self.epsilon_target) {
            return bad(format!(
                "epsilon_target {} outside [0, 1]",
                self.epsilon_target
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if self.warmup() > self.max_iters {
            return bad(format!(
                "warmup_iters {} exceeds max_iters {}",
                self.warmup(),
                self.max_iters
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return bad(format!("lr0 {} must be finite and non-negative", self.lr0));
        }
        if self.pool_capacity == 0 {
            return bad("pool_capacity must be positive".into());
        }
        if !(self.eval_cost_factor.is_finite() && self.eval_cost_factor > 0.0) {
            return bad(format!(
                "eval_cost_factor {} must be positive",
                self.eval_cost_factor
            ));
        }
        if self.turnover_window_iters == Some(0) || self.checkpoint_every == Some(0) {
            return bad("window and checkpoint intervals must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub target: f64,
    pub ramp_iters: u64,
    pub warmup_iters: u64,
}

/// Zero during warm-up, then linear up to `target` over `ramp_iters`, then
/// flat.
pub fn epsilon_at(schedule: &EpsilonSchedule, iter: u64) -> f64 {
    if iter < schedule.warmup_iters {
        return 0.0;
    }
    let since = iter - schedule.warmup_iters;
    if schedule.ramp_iters == 0 || since >= schedule.ramp_iters {
        return schedule.target;
    }
    schedule.target * since as f64 / schedule.ramp_iters as f64
}

pub fn should_stop(pi: f64, alpha: f64) -> bool {
    pi <= alpha
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub optimization_images: u64,
    pub evaluation_images: u64,
    pub eval_cost_factor: f64,
}

impl Default for CostLedger {
    fn default() -> Self {
        Self::new(DEFAULT_EVAL_COST_FACTOR)
    }
}

impl CostLedger {
    pub fn new(eval_cost_factor: f64) -> Self {
        Self {
            optimization_images: 0,
            evaluation_images: 0,
            eval_cost_factor,
        }
    }

    /// Optimization-equivalent images: forward-only images count
    /// `1 / eval_cost_factor` each.
    pub fn corrected_cost(&self) -> f64 {
        corrected_cost(self)
    }

    /// Rebuilds the counters from a training log.
    pub fn replay(log: &[RoundRecord], eval_cost_factor: f64) -> Self {
        let mut ledger = Self::new(eval_cost_factor);
        for r in log {
            ledger.optimization_images += (r.train_losses.len() * r.batch_size) as u64;
            ledger.evaluation_images += (r.candidates.len() * r.val_subset_size) as u64;
        }
        ledger
    }
}

pub fn corrected_cost(ledger: &CostLedger) -> f64 {
    ledger.optimization_images as f64 + ledger.evaluation_images as f64 / ledger.eval_cost_factor
}

/// Scale of a hypothetical run, for cost arithmetic without training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DryRunSpec {
    pub dataset_size: u64,
    pub epochs: u64,
    pub batch_size: u64,
    pub m: u64,
    pub k: u64,
    /// Validation images per candidate evaluation.
    pub val_subset_size: u64,
    #[serde(default = "default_eval_cost_factor")]
    pub eval_cost_factor: f64,
}

impl DryRunSpec {
    /// ImageNet-scale greedy run: 46 epochs over 1.23M images, batch 1024,
    /// 10 candidates filtered to 5 on 1000 validation images.
    pub fn imagenet_greedy() -> Self {
        Self {
            dataset_size: 1_230_000,
            epochs: 46,
            batch_size: 1024,
            m: 10,
            k: 5,
            val_subset_size: 1000,
            eval_cost_factor: DEFAULT_EVAL_COST_FACTOR,
        }
    }

    /// Uniform single-path baseline: 120 epochs, no filtering.
    pub fn imagenet_uniform() -> Self {
        Self {
            epochs: 120,
            m: 0,
            ..Self::imagenet_greedy()
        }
    }
}

/// Ledger a run of `spec` would accumulate. Every training image is seen
/// once per epoch; each round trains `k` batches and evaluates `m`
/// candidates. A final partial round is counted pro rata.
pub fn dry_run(spec: &DryRunSpec) -> CostLedger {
    let optimization_images = spec.dataset_size * spec.epochs;
    let evaluation_images = if spec.m == 0 || spec.k == 0 || spec.batch_size == 0 {
        0
    } else {
        let numerator = optimization_images as u128 * spec.m as u128 * spec.val_subset_size as u128;
        let denominator = spec.batch_size as u128 * spec.k as u128;
        ((numerator + denominator / 2) / denominator) as u64
    };
    CostLedger {
        optimization_images,
        evaluation_images,
        eval_cost_factor: spec.eval_cost_factor,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Greedy,
}

/// One line of the training log. Warm-up writes one record per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub phase: Phase,
    pub round: u64,
    /// Optimizer steps completed before this round.
    pub iter: u64,
    pub epsilon: f64,
    pub lr: f64,
    pub candidates: Vec<Path>,
    pub from_pool: Vec<bool>,
    /// Filter loss of each candidate.
    pub losses: Vec<f64>,
    pub kept: Vec<Path>,
    pub kept_losses: Vec<f64>,
    /// Pre-step batch loss of every trained path, in order. May be shorter
    /// than `kept` when the iteration cap falls inside the round.
    pub trained: Vec<Path>,
    pub train_losses: Vec<f64>,
    pub batch_size: usize,
    pub val_subset_size: usize,
    pub pool_size: usize,
    pub pool_inserted: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub turnover: Option<f64>,
    pub optimization_images: u64,
    pub evaluation_images: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    /// Turnover fell to `alpha` or below.
    Converged {
        turnover: f64,
    },
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pool: CandidatePool,
    pub ledger: CostLedger,
    pub log: Vec<RoundRecord>,
    pub iters: u64,
    pub rounds: u64,
    pub stop: Option<StopReason>,
}

impl TrainOutcome {
    pub fn last_turnover(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.turnover)
    }

    /// The log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        log_to_jsonl(&self.log)
    }
}

pub fn log_to_jsonl(log: &[RoundRecord]) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn log_from_jsonl(text: &str) -> Result<Vec<RoundRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Endless shuffled passes over `0..len`.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchStream {
    fn new(len: usize, rng: Rng) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

struct Run<'a, B: Trainable> {
    backend: &'a mut B,
    config: &'a TrainConfig,
    pool: CandidatePool,
    ledger: CostLedger,
    log: Vec<RoundRecord>,
    iter: u64,
    rounds: u64,
    batches: BatchStream,
}

impl<B: Trainable> Run<'_, B> {
    fn step(&mut self, path: &Path) -> Result<(f64, f64), EvalError> {
        let lr = cosine_lr(self.iter, self.config.max_iters, self.config.lr0);
        let batch = self.batches.next_batch(self.config.batch_size);
        let loss = self.backend.train_step(path, &batch, lr)?;
        self.iter += 1;
        self.ledger.optimization_images += batch.len() as u64;
        Ok((loss, lr))
    }

    fn into_outcome(self, stop: Option<StopReason>) -> TrainOutcome {
        TrainOutcome {
            pool: self.pool,
            ledger: self.ledger,
            log: self.log,
            iters: self.iter,
            rounds: self.rounds,
            stop,
        }
    }
}

/// Trains `backend` without intermediate checkpoints.
pub fn train_supernet<B: Trainable>(
    backend: &mut B,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_supernet_with(backend, config, |_, _| Ok(()))
}

/// Trains `backend`, calling `checkpoint(backend, iter)` every
/// `checkpoint_every` iterations and once when training ends.
///
/// A non-finite loss or gradient aborts with [`TrainError::Aborted`],
/// which carries everything accumulated so far; the failing step leaves
/// the weights untouched.
pub fn train_supernet_with<B, F>(
    backend: &mut B,
    config: &TrainConfig,
    mut checkpoint: F,
) -> Result<TrainOutcome, TrainError>
where
    B: Trainable,
    F: FnMut(&B, u64) -> Result<(), String>,
{
    config.validate()?;
    let train_len = backend.train_len();
    let val_len = backend.val_len();
    if config.max_iters > 0 && (train_len == 0 || val_len == 0) {
        return Err(TrainError::Config(format!(
            "need non-empty train and val splits, got {train_len} and {val_len}"
        )));
    }
    let schedule = config.schedule();
    let warmup = schedule.warmup_iters;
    let window = config.turnover_window(train_len);
    let subset_size = config.filter.subset_size(val_len);
    let mut sampling = substream(config.seed, "sampling");
    let mut validation = substream(config.seed, "validation");
    let mut run = Run {
        backend,
        config,
        pool: CandidatePool::new(config.pool_capacity),
        ledger: CostLedger::new(config.eval_cost_factor),
        log: Vec::new(),
        iter: 0,
        rounds: 0,
        batches: BatchStream::new(train_len, substream(config.seed, "data")),
    };
    let mut next_checkpoint = config.checkpoint_every.unwrap_or(u64::MAX);

    macro_rules! checkpoint_due {
        () => {
            if run.iter >= next_checkpoint {
                checkpoint(run.backend, run.iter).map_err(|message| TrainError::Checkpoint {
                    iter: run.iter,
                    message,
                })?;
                next_checkpoint = run.iter + config.checkpoint_every.unwrap_or(u64::MAX - run.iter);
            }
        };
    }
    macro_rules! try_step {
        ($path:expr) => {
            match run.step($path) {
                Ok(v) => v,
                Err(source) => {
                    let iter = run.iter;
                    return Err(TrainError::Aborted {
                        iter,
                        source,
                        partial: Box::new(run.into_outcome(None)),
                    });
                }
            }
        };
    }

    while run.iter < warmup {
        let path = run.backend.space().uniform_sample(&mut sampling);
        let iter = run.iter;
        let (loss, lr) = try_step!(&path);
        run.log.push(RoundRecord {
            phase: Phase::Warmup,
            round: run.rounds,
            iter,
            epsilon: 0.0,
            lr,
            candidates: Vec::new(),
            from_pool: Vec::new(),
            losses: Vec::new(),
            kept: Vec::new(),
            kept_losses: Vec::new(),
            trained: vec![path],
            train_losses: vec![loss],
            batch_size: config.batch_size.min(train_len),
            val_subset_size: 0,
            pool_size: 0,
            pool_inserted: 0,
            turnover: None,
            optimization_images: run.ledger.optimization_images,
            evaluation_images: 0,
        });
        run.rounds += 1;
        checkpoint_due!();
    }

    let mut snapshot: PoolSnapshot = run.pool.snapshot(run.iter);
    let mut stop = None;
    while run.iter < config.max_iters {
        let iter = run.iter;
        let epsilon = epsilon_at(&schedule, iter);
        let candidates = sample_mixture(
            run.backend.space(),
            &run.pool,
            epsilon,
            config.filter.m,
            &mut sampling,
        );
        let paths: Vec<Path> = candidates.iter().map(|c| c.path.clone()).collect();
        let val_batch = draw_val_subset(val_len, subset_size, &mut validation);
        let outcome = match filter_paths(
            &paths,
            &*run.backend,
            &val_batch,
            config.filter.k,
            config.rank_by,
        ) {
            Ok(o) => o,
            Err(FilterError::Evaluation { source, .. })
                if matches!(source, EvalError::NonFiniteLoss { .. }) =>
            {
                return Err(TrainError::Aborted {
                    iter,
                    source,
                    partial: Box::new(run.into_outcome(None)),
                });
            }
            Err(e) => return Err(e.into()),
        };
        run.ledger.evaluation_images += (paths.len() * val_batch.len()) as u64;
        let kept: Vec<(Path, f64)> = outcome
            .kept
            .iter()
            .map(|s| (s.path.clone(), s.loss))
            .collect();
        let inserted = run.pool.update(&kept, iter)?;

        let mut trained = Vec::new();
        let mut train_losses = Vec::new();
        let mut lr = 0.0;
        for (path, _) in &kept {
            if run.iter >= config.max_iters {
                break;
            }
            let (loss, step_lr) = try_step!(path);
            if trained.is_empty() {
                lr = step_lr;
            }
            trained.push(path.clone());
            train_losses.push(loss);
        }

        let mut turnover = None;
        if run.iter - snapshot.iteration >= window {
            let pi = run.pool.turnover(&snapshot);
            turnover = Some(pi);
            snapshot = run.pool.snapshot(run.iter);
            if should_stop(pi, config.alpha) {
                stop = Some(StopReason::Converged { turnover: pi });
            }
        }

        run.log.push(RoundRecord {
            phase: Phase::Greedy,
            round: run.rounds,
            iter,
            epsilon,
            lr,
            from_pool: candidates.iter().map(|c| c.from_pool).collect(),
            candidates: paths,
            losses: outcome.evaluations.iter().map(|e| e.loss).collect(),
            kept_losses: kept.iter().map(|(_, l)| *l).collect(),
            kept: kept.into_iter().map(|(p, _)| p).collect(),
            trained,
            train_losses,
            batch_size: config.batch_size.min(train_len),
            val_subset_size: val_batch.len(),
            pool_size: run.pool.len(),
            pool_inserted: inserted,
            turnover,
            optimization_images: run.ledger.optimization_images,
            evaluation_images: run.ledger.evaluation_images,
        });
        run.rounds += 1;
        if stop.is_some() {
            break;
        }
        checkpoint_due!();
    }
    let stop = stop.or(if config.max_iters > 0 {
        Some(StopReason::MaxIters)
    } else {
        None
    });
    checkpoint(run.backend, run.iter).map_err(|message| TrainError::Checkpoint {
        iter: run.iter,
        message,
    })?;
    Ok(run.into_outcome(stop))
}
