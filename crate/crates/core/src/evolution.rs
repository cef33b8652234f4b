//! Constrained NSGA-II over paths.
//!
//! Objectives are (validation loss, flops), both minimized. Every path is
//! evaluated at most once; the evaluation set `E` collects the boundary
//! front of each generation plus the final population, and the answer is
//! the highest-accuracy member of `E`.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidate_pool::CandidatePool;
use crate::evaluator::{EvalError, EvaluationRecord, Evaluator};
use crate::rng::substream;
use crate::search_space::{Constraint, CostSummary, Path, SearchSpace, SpaceError};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error("no path satisfies the constraint after {attempts} attempts")]
    Infeasible { attempts: usize },
    #[error("evaluating path {path}: {source}")]
    Evaluation { path: Path, source: EvalError },
    #[error(transparent)]
    Space(#[from] SpaceError),
}

fn default_population() -> usize {
    50
}

fn default_generations() -> usize {
    20
}

fn default_mutation() -> f64 {
    0.1
}

fn default_crossover() -> f64 {
    0.9
}

fn default_attempts() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionConfig {
    #[serde(default = "default_population")]
    pub population_size: usize,
    #[serde(default = "default_generations")]
    pub generations: usize,
    #[serde(default = "default_mutation")]
    pub mutation_prob_per_gene: f64,
    #[serde(default = "default_crossover")]
    pub crossover_prob: f64,
    #[serde(default)]
    pub constraint: Constraint,
    /// Validation examples used for fitness; `None` uses the whole split.
    #[serde(default)]
    pub val_batch_size: Option<usize>,
    /// Samples tried per requested path before giving up.
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    pub seed: u64,
}

impl EvolutionConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            population_size: default_population(),
            generations: default_generations(),
            mutation_prob_per_gene: default_mutation(),
            crossover_prob: default_crossover(),
            constraint: Constraint::default(),
            val_batch_size: None,
            max_attempts: default_attempts(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EvolutionError> {
        if self.population_size < 2 {
            return Err(EvolutionError::Config(format!(
                "population_size {} < 2",
                self.population_size
            )));
        }
        for (name, p) in [
            ("mutation_prob_per_gene", self.mutation_prob_per_gene),
            ("crossover_prob", self.crossover_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(EvolutionError::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.val_batch_size == Some(0) || self.max_attempts == 0 {
            return Err(EvolutionError::Config(
                "val_batch_size and max_attempts must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub path: Path,
    /// Minimized: validation loss, then flops.
    pub objectives: Vec<f64>,
    pub constraint_ok: bool,
    pub accuracy: Option<f64>,
}

impl AsRef<[f64]> for Individual {
    fn as_ref(&self) -> &[f64] {
        &self.objectives
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedPath {
    pub path: Path,
    pub loss: f64,
    pub accuracy: f64,
    pub cost: CostSummary,
    /// Generation in which the path entered the evaluation set.
    pub generation: usize,
}

/// Append-only record of evaluated paths, one entry per path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvaluationSet {
    records: Vec<EvaluatedPath>,
}

impl EvaluationSet {
    pub fn records(&self) -> &[EvaluatedPath] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, path: &Path) -> bool {
        self.records.iter().any(|r| r.path == *path)
    }

    /// Adds `record` unless its path is already present.
    pub fn push(&mut self, record: EvaluatedPath) -> bool {
        if self.contains(&record.path) {
            return false;
        }
        self.records.push(record);
        true
    }

    /// Highest accuracy; ties go to lower flops, then the smaller path.
    pub fn best(&self) -> Option<&EvaluatedPath> {
        self.records.iter().min_by(|a, b| {
            b.accuracy
                .total_cmp(&a.accuracy)
                .then(a.cost.flops.cmp(&b.cost.flops))
                .then_with(|| a.path.cmp(&b.path))
        })
    }
}

/// `a` dominates `b`: no worse everywhere, strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strictly = true;
        }
    }
    strictly
}

/// Partitions indices of `points` into non-dominated fronts, best first.
/// Indices within a front are ascending.
pub fn fast_non_dominated_sort<T: AsRef<[f64]>>(points: &[T]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut counts = vec![0usize; n];
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (points[i].as_ref(), points[j].as_ref());
            if dominates(a, b) {
                dominated_by[i].push(j);
                counts[j] += 1;
            } else if dominates(b, a) {
                dominated_by[j].push(i);
                counts[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| counts[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominated_by[i] {
                counts[j] -= 1;
                if counts[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::replace(&mut current, next));
    }
    fronts
}

/// Crowding distance of each member of `front`. Per objective the two
/// extremes get infinity and interior points the gap between their
/// neighbours over the objective's range. An objective with zero range
/// adds nothing to interior points.
pub fn crowding_distance<T: AsRef<[f64]>>(front: &[T]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let dims = front[0].as_ref().len();
    for d in 0..dims {
        let value = |i: usize| front[i].as_ref()[d];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| value(a).total_cmp(&value(b)));
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let range = value(order[n - 1]) - value(order[0]);
        if range <= 0.0 {
            continue;
        }
        for w in order.windows(3) {
            dist[w[1]] += (value(w[2]) - value(w[0])) / range;
        }
    }
    dist
}

/// Starting population of `n` constraint-satisfying paths: the pool's best
/// feasible entries first, then uniform samples. Distinct paths are
/// preferred; repeats only appear when rejection sampling cannot find
/// enough distinct feasible paths within the attempt budget.
pub fn init_population<R: Rng + ?Sized>(
    pool: Option<&CandidatePool>,
    space: &SearchSpace,
    constraint: &Constraint,
    n: usize,
    max_attempts: usize,
    rng: &mut R,
) -> Result<Vec<Path>, EvolutionError> {
    let feasible =
        |p: &Path| -> Result<bool, EvolutionError> { Ok(constraint.check(&space.path_cost(p)?)) };
    let mut out = Vec::with_capacity(n);
    let mut seen = HashSet::new();
    if let Some(pool) = pool {
        for e in pool.entries() {
            if out.len() == n {
                break;
            }
            if feasible(&e.path)? && seen.insert(e.path.clone()) {
                out.push(e.path);
            }
        }
    }
    let budget = max_attempts.saturating_mul(n - out.len());
    let mut attempts = 0;
    while out.len() < n && attempts < budget {
        attempts += 1;
        let p = space.uniform_sample(rng);
        if feasible(&p)? && seen.insert(p.clone()) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(EvolutionError::Infeasible { attempts });
    }
    let distinct = out.len();
    for i in 0..n - distinct.min(n) {
        out.push(out[i % distinct].clone());
    }
    Ok(out)
}

/// Memoized evaluator calls on one fixed validation batch.
struct Fitness<'a, E: Evaluator + ?Sized> {
    evaluator: &'a E,
    batch: Vec<usize>,
    cache: HashMap<Path, EvaluationRecord>,
}

impl<E: Evaluator + ?Sized> Fitness<'_, E> {
    fn ensure(&mut self, paths: &[Path]) -> Result<(), EvolutionError> {
        let mut fresh: Vec<&Path> = Vec::new();
        let mut queued = HashSet::new();
        for p in paths {
            if !self.cache.contains_key(p) && queued.insert(p) {
                fresh.push(p);
            }
        }
        let results: Vec<_> = fresh
            .par_iter()
            .map(|p| self.evaluator.evaluate(p, &self.batch))
            .collect();
        for (p, r) in fresh.into_iter().zip(results) {
            let record = r.map_err(|source| EvolutionError::Evaluation {
                path: p.clone(),
                source,
            })?;
            self.cache.insert(p.clone(), record);
        }
        Ok(())
    }

    fn individual(&self, space: &SearchSpace, path: &Path) -> Result<Individual, EvolutionError> {
        let r = &self.cache[path];
        let cost = space.path_cost(path)?;
        Ok(Individual {
            path: path.clone(),
            objectives: vec![r.loss, cost.flops as f64],
            constraint_ok: true,
            accuracy: Some(r.accuracy),
        })
    }

    fn evaluated(
        &self,
        space: &SearchSpace,
        path: &Path,
        generation: usize,
    ) -> Result<EvaluatedPath, EvolutionError> {
        let r = &self.cache[path];
        Ok(EvaluatedPath {
            path: path.clone(),
            loss: r.loss,
            accuracy: r.accuracy,
            cost: space.path_cost(path)?,
            generation,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: usize,
    pub front_sizes: Vec<usize>,
    /// Objective vectors of the first front of parents plus offspring.
    pub pareto_front: Vec<(Path, Vec<f64>)>,
    /// Size of the front split by the refill (added to the evaluation set).
    pub boundary_front_size: usize,
    pub population: Vec<Path>,
    pub best_accuracy: Option<f64>,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: EvaluatedPath,
    pub evaluation_set: EvaluationSet,
    pub generations: Vec<GenerationSummary>,
    pub initial_population: Vec<Path>,
    /// Distinct paths sent to the evaluator.
    pub evaluations: usize,
}

fn val_batch<R: Rng + ?Sized>(val_len: usize, size: Option<usize>, rng: &mut R) -> Vec<usize> {
    match size {
        Some(s) if s < val_len => crate::greedy_filter::draw_val_subset(val_len, s, rng),
        _ => (0..val_len).collect(),
    }
}

/// Rank then crowding; the earlier index wins exact ties.
fn tournament<R: Rng + ?Sized>(rank: &[usize], crowd: &[f64], rng: &mut R) -> usize {
    let a = rng.random_range(0..rank.len());
    let b = rng.random_range(0..rank.len());
    let order = rank[a]
        .cmp(&rank[b])
        .then_with(|| crowd[b].total_cmp(&crowd[a]))
        .then(a.cmp(&b));
    if order == Ordering::Greater {
        b
    } else {
        a
    }
}

fn mutate<R: Rng + ?Sized>(space: &SearchSpace, path: &mut Path, prob: f64, rng: &mut R) {
    for (layer, gene) in path.0.iter_mut().enumerate() {
        if rng.random::<f64>() < prob {
            *gene = rng.random_range(0..space.num_choices(layer));
        }
    }
}

fn crossover<R: Rng + ?Sized>(a: &Path, b: &Path, prob: f64, rng: &mut R) -> (Path, Path) {
    let (mut x, mut y) = (a.clone(), b.clone());
    if rng.random::<f64>() < prob {
        for l in 0..x.len() {
            if rng.random_bool(0.5) {
                std::mem::swap(&mut x.0[l], &mut y.0[l]);
            }
        }
    }
    (x, y)
}

/// Runs the search from `pool`'s best feasible paths (or uniform samples
/// when `pool` is `None`) and returns the best evaluated path.
pub fn evolve<E: Evaluator + ?Sized>(
    evaluator: &E,
    pool: Option<&CandidatePool>,
    config: &EvolutionConfig,
) -> Result<SearchOutcome, EvolutionError> {
    config.validate()?;
    let space = evaluator.space();
    let n = config.population_size;
    let mut init_rng = substream(config.seed, "evolution");
    let batch = val_batch(evaluator.val_len(), config.val_batch_size, &mut init_rng);
    let mut fitness = Fitness {
        evaluator,
        batch,
        cache: HashMap::new(),
    };
    let initial = init_population(
        pool,
        space,
        &config.constraint,
        n,
        config.max_attempts,
        &mut init_rng,
    )?;
    fitness.ensure(&initial)?;
    let mut population: Vec<Individual> = initial
        .iter()
        .map(|p| fitness.individual(space, p))
        .collect::<Result<_, _>>()?;
    let mut set = EvaluationSet::default();
    let mut summaries = Vec::with_capacity(config.generations);

    for generation in 0..config.generations {
        let mut rng = substream(config.seed, &format!("evolution/generation/{generation}"));
        let fronts = fast_non_dominated_sort(&population);
        let mut rank = vec![0; population.len()];
        let mut crowd = vec![0.0; population.len()];
        for (r, front) in fronts.iter().enumerate() {
            let members: Vec<&Individual> = front.iter().map(|&i| &population[i]).collect();
            let members: Vec<&[f64]> = members.iter().map(|m| m.objectives.as_slice()).collect();
            for (&i, d) in front.iter().zip(crowding_distance(&members)) {
                rank[i] = r;
                crowd[i] = d;
            }
        }

        let mut taken: HashSet<Path> = population.iter().map(|i| i.path.clone()).collect();
        let mut offspring: Vec<Path> = Vec::with_capacity(n);
        let mut fallback: Option<Path> = None;
        let mut attempts = 0;
        let budget = config.max_attempts.saturating_mul(n);
        while offspring.len() < n {
            if attempts >= budget {
                match &fallback {
                    Some(p) => {
                        offspring.push(p.clone());
                        continue;
                    }
                    None => return Err(EvolutionError::Infeasible { attempts }),
                }
            }
            let a = &population[tournament(&rank, &crowd, &mut rng)].path;
            let b = &population[tournament(&rank, &crowd, &mut rng)].path;
            let (mut x, mut y) = crossover(a, b, config.crossover_prob, &mut rng);
            mutate(space, &mut x, config.mutation_prob_per_gene, &mut rng);
            mutate(space, &mut y, config.mutation_prob_per_gene, &mut rng);
            for child in [x, y] {
                attempts += 1;
                if offspring.len() == n || !config.constraint.check(&space.path_cost(&child)?) {
                    continue;
                }
                fallback.get_or_insert_with(|| child.clone());
                if taken.insert(child.clone()) {
                    offspring.push(child);
                }
            }
        }

        fitness.ensure(&offspring)?;
        let mut combined = std::mem::take(&mut population);
        for p in &offspring {
            combined.push(fitness.individual(space, p)?);
        }
        let fronts = fast_non_dominated_sort(&combined);
        let mut next: Vec<usize> = Vec::with_capacity(n);
        let mut boundary_front_size = 0;
        for front in &fronts {
            if next.len() + front.len() <= n {
                next.extend(front);
                continue;
            }
            boundary_front_size = front.len();
            for &i in front {
                set.push(fitness.evaluated(space, &combined[i].path, generation)?);
            }
            let members: Vec<&[f64]> = front
                .iter()
                .map(|&i| combined[i].objectives.as_slice())
                .collect();
            let crowd = crowding_distance(&members);
            let mut order: Vec<usize> = (0..front.len()).collect();
            let acc = |j: usize| combined[front[j]].accuracy.unwrap_or(f64::NEG_INFINITY);
            order.sort_by(|&x, &y| {
                acc(y)
                    .total_cmp(&acc(x))
                    .then(crowd[y].total_cmp(&crowd[x]))
                    .then_with(|| combined[front[x]].path.cmp(&combined[front[y]].path))
            });
            next.extend(order.into_iter().take(n - next.len()).map(|j| front[j]));
            break;
        }
        summaries.push(GenerationSummary {
            generation,
            front_sizes: fronts.iter().map(Vec::len).collect(),
            pareto_front: fronts[0]
                .iter()
                .map(|&i| (combined[i].path.clone(), combined[i].objectives.clone()))
                .collect(),
            boundary_front_size,
            population: next.iter().map(|&i| combined[i].path.clone()).collect(),
            best_accuracy: set.best().map(|b| b.accuracy),
            evaluations: fitness.cache.len(),
        });
        let mut slots: Vec<Option<Individual>> = combined.into_iter().map(Some).collect();
        population = next
            .iter()
            .map(|&i| slots[i].take().expect("index used once"))
            .collect();
    }

    for ind in &population {
        set.push(fitness.evaluated(space, &ind.path, config.generations)?);
    }
    let best = set.best().expect("population is never empty").clone();
    Ok(SearchOutcome {
        best,
        evaluation_set: set,
        generations: summaries,
        initial_population: initial,
        evaluations: fitness.cache.len(),
    })
}

/// Baseline: `budget` distinct feasible uniform samples (fewer if the
/// attempt budget runs out), best by the same rule as [`evolve`].
pub fn random_search<E: Evaluator + ?Sized>(
    evaluator: &E,
    constraint: &Constraint,
    budget: usize,
    val_batch_size: Option<usize>,
    seed: u64,
) -> Result<SearchOutcome, EvolutionError> {
    let space = evaluator.space();
    let mut rng = substream(seed, "random-search");
    let batch = val_batch(evaluator.val_len(), val_batch_size, &mut rng);
    let paths = init_population(
        None,
        space,
        constraint,
        budget.max(1),
        default_attempts(),
        &mut rng,
    )?;
    let mut fitness = Fitness {
        evaluator,
        batch,
        cache: HashMap::new(),
    };
    fitness.ensure(&paths)?;
    let mut set = EvaluationSet::default();
    for p in &paths {
        set.push(fitness.evaluated(space, p, 0)?);
    }
    let best = set.best().expect("non-empty").clone();
    Ok(SearchOutcome {
        best,
        evaluation_set: set,
        generations: Vec::new(),
        initial_population: paths,
        evaluations: fitness.cache.len(),
    })
}
