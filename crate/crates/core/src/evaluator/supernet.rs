//! Toy shared-weight supernet: one expand/project affine block (or an
//! identity) per (layer, choice), followed by a shared linear classifier.
//!
//! Block: `y = W2 · relu(W1 · x + b1) + b2`, hidden width
//! `round(width_factor · output_dim)`, plus a residual `x` term when the
//! layer keeps its width (the inverted-residual pattern).

use std::sync::Arc;

use rand::Rng;

use super::dataset::{Dataset, Split};
use super::{EvalError, EvaluationRecord, Evaluator, Trainable};
use crate::search_space::{hidden_width, OpKind, Path, SearchSpace};

pub const NESTEROV_MOMENTUM: f64 = 0.9;

/// Row-major dense matrix; vectors are `rows x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Parameters of one block together with their momentum buffers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGroup {
    pub params: Vec<Tensor>,
    pub momentum: Vec<Tensor>,
}

impl ParamGroup {
    fn new(params: Vec<Tensor>) -> Self {
        let momentum = params.iter().map(Tensor::zeros_like).collect();
        Self { params, momentum }
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.params.iter().map(|t| (t.rows, t.cols)).collect()
    }

    fn is_finite(&self) -> bool {
        self.params
            .iter()
            .chain(&self.momentum)
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Nesterov step: `v <- mu*v - lr*g; w <- w + mu*v - lr*g`.
    fn nesterov_step(&mut self, grads: &[Tensor], lr: f64, mu: f64) {
        for ((w, v), g) in self.params.iter_mut().zip(&mut self.momentum).zip(grads) {
            for ((wi, vi), &gi) in w.data.iter_mut().zip(&mut v.data).zip(&g.data) {
                *vi = mu * *vi - lr * gi;
                *wi += mu * *vi - lr * gi;
            }
        }
    }
}

/// All shared parameters. `blocks[layer][choice]` is empty for identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SupernetWeights {
    pub blocks: Vec<Vec<ParamGroup>>,
    pub classifier: ParamGroup,
}

fn block_shapes(space: &SearchSpace, layer: usize, choice: usize) -> Vec<(usize, usize)> {
    let l = &space.layers[layer];
    let c = &l.choices[choice];
    match c.kind {
        OpKind::Identity => Vec::new(),
        OpKind::AffineRelu => {
            let hidden = hidden_width(l.output_dim, c.width_factor);
            vec![
                (hidden, l.input_dim),
                (hidden, 1),
                (l.output_dim, hidden),
                (l.output_dim, 1),
            ]
        }
    }
}

impl SupernetWeights {
    /// Uniform in `±1/sqrt(fan_in)` for every weight and bias.
    pub fn init<R: Rng + ?Sized>(space: &SearchSpace, num_classes: usize, rng: &mut R) -> Self {
        let blocks = (0..space.num_layers())
            .map(|l| {
                (0..space.num_choices(l))
                    .map(|c| {
                        let params = block_shapes(space, l, c)
                            .chunks(2)
                            .flat_map(|pair| {
                                let (rows, fan_in) = pair[0];
                                let bound = 1.0 / (fan_in as f64).sqrt();
                                [
                                    Tensor::uniform(rows, fan_in, bound, rng),
                                    Tensor::uniform(rows, 1, bound, rng),
                                ]
                            })
                            .collect();
                        ParamGroup::new(params)
                    })
                    .collect()
            })
            .collect();
        let d = space.output_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let classifier = ParamGroup::new(vec![
            Tensor::uniform(num_classes, d, bound, rng),
            Tensor::uniform(num_classes, 1, bound, rng),
        ]);
        Self { blocks, classifier }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.params[0].rows
    }

    pub fn zero_classifier(&mut self) {
        for t in &mut self.classifier.params {
            t.data.fill(0.0);
        }
    }

    /// Checks every tensor against the shapes implied by `space`.
    pub fn check_shapes(&self, space: &SearchSpace, num_classes: usize) -> Result<(), EvalError> {
        if self.blocks.len() != space.num_layers() {
            return Err(EvalError::Shape(format!(
                "{} block layers for {} space layers",
                self.blocks.len(),
                space.num_layers()
            )));
        }
        for (l, layer) in self.blocks.iter().enumerate() {
            if layer.len() != space.num_choices(l) {
                return Err(EvalError::Shape(format!(
                    "layer {l}: {} blocks for {} choices",
                    layer.len(),
                    space.num_choices(l)
                )));
            }
            for (c, group) in layer.iter().enumerate() {
                let expected = block_shapes(space, l, c);
                if group.shapes() != expected
                    || group
                        .momentum
                        .iter()
                        .map(|t| (t.rows, t.cols))
                        .ne(expected.iter().copied())
                {
                    return Err(EvalError::Shape(format!(
                        "layer {l} choice {c}: expected {expected:?}, got {:?}",
                        group.shapes()
                    )));
                }
            }
        }
        let expected = vec![(num_classes, space.output_dim()), (num_classes, 1)];
        if self.classifier.shapes() != expected
            || self
                .classifier
                .momentum
                .iter()
                .map(|t| (t.rows, t.cols))
                .ne(expected.iter().copied())
        {
            return Err(EvalError::Shape(format!(
                "classifier: expected {expected:?}, got {:?}",
                self.classifier.shapes()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.classifier.is_finite() && self.blocks.iter().flatten().all(ParamGroup::is_finite)
    }
}

/// Gradients for the blocks on one path (`blocks[layer]`, empty for
/// identity) and the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<Tensor>>,
    pub classifier: Vec<Tensor>,
}

impl Gradients {
    fn zeros_for(weights: &SupernetWeights, path: &Path) -> Self {
        let blocks = path
            .ops()
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                weights.blocks[l][c]
                    .params
                    .iter()
                    .map(Tensor::zeros_like)
                    .collect()
            })
            .collect();
        let classifier = weights
            .classifier
            .params
            .iter()
            .map(Tensor::zeros_like)
            .collect();
        Self { blocks, classifier }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .flatten()
            .chain(&self.classifier)
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows)
        .map(|r| {
            b.data[r]
                + w.data[r * w.cols..(r + 1) * w.cols]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect()
}

/// `out += w^T · d`
fn affine_transpose(w: &Tensor, d: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols];
    for (r, &dr) in d.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += w.at(r, c) * dr;
        }
    }
    out
}

fn accumulate_outer(g: &mut Tensor, d: &[f64], x: &[f64]) {
    for (r, &dr) in d.iter().enumerate() {
        for (c, &xc) in x.iter().enumerate() {
            g.data[r * g.cols + c] += dr * xc;
        }
    }
}

struct BlockTrace {
    residual: bool,
    input: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

/// Per-example forward; returns the penultimate features and the traces
/// needed for backprop (None for identity layers).
fn forward_example(
    weights: &SupernetWeights,
    path: &Path,
    x: &[f64],
) -> (Vec<f64>, Vec<Option<BlockTrace>>) {
    let mut cur = x.to_vec();
    let mut traces = Vec::with_capacity(path.len());
    for (l, &c) in path.ops().iter().enumerate() {
        let p = &weights.blocks[l][c].params;
        if p.is_empty() {
            traces.push(None);
            continue;
        }
        let pre = affine(&p[0], &p[1], &cur);
        let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let mut out = affine(&p[2], &p[3], &hidden);
        let residual = out.len() == cur.len();
        if residual {
            out.iter_mut().zip(&cur).for_each(|(o, x)| *o += x);
        }
        traces.push(Some(BlockTrace {
            residual,
            input: std::mem::replace(&mut cur, out),
            pre,
            hidden,
        }));
    }
    (cur, traces)
}

/// Numerically stable `(logsumexp(logits) - logits[label], softmax)`.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_inputs(
    space: &SearchSpace,
    weights: &SupernetWeights,
    path: &Path,
    data: &Dataset,
    batch: &[usize],
) -> Result<(), EvalError> {
    space.validate_path(path)?;
    if batch.is_empty() {
        return Err(EvalError::EmptyBatch);
    }
    if data.dim() != space.input_dim() {
        return Err(EvalError::Shape(format!(
            "data dim {} != space input dim {}",
            data.dim(),
            space.input_dim()
        )));
    }
    if data.num_classes() > weights.num_classes() {
        return Err(EvalError::Shape(format!(
            "{} classes in data, classifier has {}",
            data.num_classes(),
            weights.num_classes()
        )));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(EvalError::BatchIndex {
            index: bad,
            len: data.len(),
        });
    }
    Ok(())
}

/// Mean softmax cross-entropy and accuracy of `path` on dataset rows
/// `batch`. Touches only the selected blocks and the classifier.
pub fn forward_loss(
    space: &SearchSpace,
    weights: &SupernetWeights,
    path: &Path,
    data: &Dataset,
    batch: &[usize],
) -> Result<EvaluationRecord, EvalError> {
    check_inputs(space, weights, path, data, batch)?;
    let cls = &weights.classifier.params;
    let mut total = 0.0;
    let mut correct = 0usize;
    for &i in batch {
        let (z, _) = forward_example(weights, path, data.features(i));
        let logits = affine(&cls[0], &cls[1], &z);
        let label = data.label(i);
        total += cross_entropy(&logits, label).0;
        correct += usize::from(argmax(&logits) == label);
    }
    Ok(EvaluationRecord {
        path: path.clone(),
        loss: total / batch.len() as f64,
        accuracy: correct as f64 / batch.len() as f64,
        num_images: batch.len(),
    })
}

/// Mean loss over `batch` and its gradient with respect to the path's
/// blocks and the classifier.
pub fn loss_and_gradients(
    space: &SearchSpace,
    weights: &SupernetWeights,
    path: &Path,
    data: &Dataset,
    batch: &[usize],
) -> Result<(f64, Gradients), EvalError> {
    check_inputs(space, weights, path, data, batch)?;
    let cls = &weights.classifier.params;
    let mut grads = Gradients::zeros_for(weights, path);
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &i in batch {
        let (z, traces) = forward_example(weights, path, data.features(i));
        let logits = affine(&cls[0], &cls[1], &z);
        let label = data.label(i);
        let (loss, mut d) = cross_entropy(&logits, label);
        total += loss;
        d[label] -= 1.0;
        d.iter_mut().for_each(|v| *v *= scale);

        accumulate_outer(&mut grads.classifier[0], &d, &z);
        grads.classifier[1]
            .data
            .iter_mut()
            .zip(&d)
            .for_each(|(g, v)| *g += v);
        let mut dy = affine_transpose(&cls[0], &d);

        for (l, trace) in traces.iter().enumerate().rev() {
            let Some(t) = trace else { continue };
            let p = &weights.blocks[l][path.ops()[l]].params;
            let g = &mut grads.blocks[l];
            accumulate_outer(&mut g[2], &dy, &t.hidden);
            g[3].data.iter_mut().zip(&dy).for_each(|(a, v)| *a += v);
            let mut dpre = affine_transpose(&p[2], &dy);
            dpre.iter_mut().zip(&t.pre).for_each(|(v, &pre)| {
                if pre <= 0.0 {
                    *v = 0.0;
                }
            });
            accumulate_outer(&mut g[0], &dpre, &t.input);
            g[1].data.iter_mut().zip(&dpre).for_each(|(a, v)| *a += v);
            let mut dx = affine_transpose(&p[0], &dpre);
            if t.residual {
                dx.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
            }
            dy = dx;
        }
    }
    Ok((total * scale, grads))
}

/// One Nesterov-momentum SGD step on `path`. Blocks off the path and their
/// momentum buffers are left untouched. Returns the pre-step batch loss.
pub fn train_step(
    space: &SearchSpace,
    weights: &mut SupernetWeights,
    path: &Path,
    data: &Dataset,
    batch: &[usize],
    lr: f64,
) -> Result<f64, EvalError> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(EvalError::LearningRate(lr));
    }
    let (loss, grads) = loss_and_gradients(space, weights, path, data, batch)?;
    if !loss.is_finite() {
        return Err(EvalError::NonFiniteLoss {
            path: path.clone(),
            loss,
        });
    }
    if !grads.is_finite() {
        return Err(EvalError::NonFiniteGradient {
            path: path.clone(),
            loss,
        });
    }
    for (l, &c) in path.ops().iter().enumerate() {
        weights.blocks[l][c].nesterov_step(&grads.blocks[l], lr, NESTEROV_MOMENTUM);
    }
    weights
        .classifier
        .nesterov_step(&grads.classifier, lr, NESTEROV_MOMENTUM);
    Ok(loss)
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`, with `step` clamped to `total`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Supernet weights bound to their space and dataset.
#[derive(Debug, Clone)]
pub struct SupernetBackend {
    space: SearchSpace,
    pub weights: SupernetWeights,
    data: Arc<Dataset>,
}

impl SupernetBackend {
    pub fn new(
        space: SearchSpace,
        weights: SupernetWeights,
        data: Arc<Dataset>,
    ) -> Result<Self, EvalError> {
        weights.check_shapes(&space, weights.num_classes())?;
        if data.dim() != space.input_dim() {
            return Err(EvalError::Shape(format!(
                "data dim {} != space input dim {}",
                data.dim(),
                space.input_dim()
            )));
        }
        if data.num_classes() > weights.num_classes() {
            return Err(EvalError::Shape(format!(
                "{} classes in data, classifier has {}",
                data.num_classes(),
                weights.num_classes()
            )));
        }
        Ok(Self {
            space,
            weights,
            data,
        })
    }

    /// Freshly initialized weights for `data`.
    pub fn init<R: Rng + ?Sized>(
        space: SearchSpace,
        data: Arc<Dataset>,
        rng: &mut R,
    ) -> Result<Self, EvalError> {
        let weights = SupernetWeights::init(&space, data.num_classes(), rng);
        Self::new(space, weights, data)
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }
}

impl Evaluator for SupernetBackend {
    fn space(&self) -> &SearchSpace {
        &self.space
    }

    fn val_len(&self) -> usize {
        self.data.split(Split::Val).len()
    }

    fn evaluate(&self, path: &Path, val_batch: &[usize]) -> Result<EvaluationRecord, EvalError> {
        let rows = self.data.resolve(Split::Val, val_batch)?;
        forward_loss(&self.space, &self.weights, path, &self.data, &rows)
    }
}

impl Trainable for SupernetBackend {
    fn train_len(&self) -> usize {
        self.data.split(Split::Train).len()
    }

    fn train_step(
        &mut self,
        path: &Path,
        train_batch: &[usize],
        lr: f64,
    ) -> Result<f64, EvalError> {
        let rows = self.data.resolve(Split::Train, train_batch)?;
        train_step(&self.space, &mut self.weights, path, &self.data, &rows, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::SyntheticSpec;
    use crate::rng::substream;
    use crate::search_space::{Layer, OperationChoice};

    fn setup(seed: u64) -> (SearchSpace, SupernetWeights, Dataset) {
        let space = SearchSpace::uniform(3, 4, &[0.5, 1.0, 2.0], true).unwrap();
        let data = Dataset::synthetic(&SyntheticSpec {
            num_classes: 3,
            dim: 4,
            train: 40,
            val: 20,
            test: 0,
            separation: 2.0,
            seed,
        })
        .unwrap();
        let w = SupernetWeights::init(&space, 3, &mut substream(seed, "init"));
        (space, w, data)
    }

    #[test]
    fn zero_classifier_gives_log_c() {
        let (space, mut w, data) = setup(1);
        w.zero_classifier();
        let batch: Vec<usize> = (0..10).collect();
        for ops in [vec![0, 0, 0], vec![1, 2, 3], vec![3, 0, 2]] {
            let r = forward_loss(&space, &w, &Path(ops), &data, &batch).unwrap();
            assert!((r.loss - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let (space, w, data) = setup(2);
        let batch: Vec<usize> = (5..25).collect();
        let p = Path(vec![2, 1, 3]);
        let a = forward_loss(&space, &w, &p, &data, &batch).unwrap();
        let b = forward_loss(&space, &w, &p, &data, &batch).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.accuracy));
    }

    #[test]
    fn hand_computed_two_class_loss() {
        // Single identity layer on 2 features, classifier logits = W x + b.
        let space = SearchSpace::new(vec![Layer {
            input_dim: 2,
            output_dim: 2,
            choices: vec![OperationChoice::identity(0, 0.0)],
        }])
        .unwrap();
        let data = Dataset::from_csv("1,0.5,-1.0\n0,1,1\n", 0.5, 0.5, 0).unwrap();
        let mut w = SupernetWeights::init(&space, 2, &mut substream(0, "x"));
        w.classifier.params[0].data = vec![1.0, 2.0, -0.5, 0.25];
        w.classifier.params[1].data = vec![0.1, -0.2];
        let row = (0..2).find(|&i| data.label(i) == 1).unwrap();
        let r = forward_loss(&space, &w, &Path(vec![0]), &data, &[row]).unwrap();
        // z0 = 0.5 - 2 + 0.1 = -1.4 ; z1 = -0.25 - 0.25 - 0.2 = -0.7 ; label 1
        let (z0, z1) = (-1.4f64, -0.7f64);
        let expected = (z0.exp() + z1.exp()).ln() - z1;
        assert!(
            (r.loss - expected).abs() < 1e-12,
            "{} vs {}",
            r.loss,
            expected
        );
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn empty_batch_and_bad_path_rejected() {
        let (space, w, data) = setup(3);
        assert!(matches!(
            forward_loss(&space, &w, &Path(vec![0, 0, 0]), &data, &[]),
            Err(EvalError::EmptyBatch)
        ));
        assert!(matches!(
            forward_loss(&space, &w, &Path(vec![0, 9, 0]), &data, &[0]),
            Err(EvalError::Space(_))
        ));
        assert!(matches!(
            forward_loss(&space, &w, &Path(vec![0, 0, 0]), &data, &[10_000]),
            Err(EvalError::BatchIndex { .. })
        ));
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let (space, mut w, data) = setup(4);
        let before = w.clone();
        let batch: Vec<usize> = (0..8).collect();
        train_step(&space, &mut w, &Path(vec![1, 2, 3]), &data, &batch, 0.0).unwrap();
        for (a, b) in w
            .blocks
            .iter()
            .flatten()
            .zip(before.blocks.iter().flatten())
        {
            assert_eq!(a.params, b.params);
        }
        assert_eq!(w.classifier.params, before.classifier.params);
        // v = 0.9 * 0 - 0 * g stays zero.
        assert!(w
            .classifier
            .momentum
            .iter()
            .all(|t| t.data.iter().all(|&v| v == 0.0)));
        assert!(train_step(&space, &mut w, &Path(vec![1, 2, 3]), &data, &batch, -0.1).is_err());
    }

    #[test]
    fn nesterov_update_matches_formula() {
        let (space, mut w, data) = setup(5);
        let batch: Vec<usize> = (0..8).collect();
        let path = Path(vec![1, 0, 2]);
        let lr = 0.05;
        let mut expected = w.clone();
        for _ in 0..3 {
            let (_, g) = loss_and_gradients(&space, &expected, &path, &data, &batch).unwrap();
            let group = &mut expected.classifier;
            for ((p, v), gt) in group
                .params
                .iter_mut()
                .zip(&mut group.momentum)
                .zip(&g.classifier)
            {
                for i in 0..p.data.len() {
                    v.data[i] = 0.9 * v.data[i] - lr * gt.data[i];
                    p.data[i] += 0.9 * v.data[i] - lr * gt.data[i];
                }
            }
            for (l, &c) in path.ops().iter().enumerate() {
                let group = &mut expected.blocks[l][c];
                for ((p, v), gt) in group
                    .params
                    .iter_mut()
                    .zip(&mut group.momentum)
                    .zip(&g.blocks[l])
                {
                    for i in 0..p.data.len() {
                        v.data[i] = 0.9 * v.data[i] - lr * gt.data[i];
                        p.data[i] += 0.9 * v.data[i] - lr * gt.data[i];
                    }
                }
            }
            train_step(&space, &mut w, &path, &data, &batch, lr).unwrap();
        }
        assert_eq!(w, expected);
    }

    #[test]
    fn training_only_touches_path_blocks() {
        let (space, mut w, data) = setup(6);
        let before = w.clone();
        let batch: Vec<usize> = (0..16).collect();
        let path = Path(vec![2, 3, 1]);
        for _ in 0..5 {
            train_step(&space, &mut w, &path, &data, &batch, 0.1).unwrap();
        }
        for l in 0..3 {
            for c in 0..4 {
                let changed = w.blocks[l][c] != before.blocks[l][c];
                let on_path = path.ops()[l] == c && !before.blocks[l][c].params.is_empty();
                assert_eq!(changed, on_path, "layer {l} choice {c}");
            }
        }
        assert_ne!(w.classifier, before.classifier);
    }

    #[test]
    fn training_reduces_loss() {
        let (space, mut w, data) = setup(7);
        let batch: Vec<usize> = (0..40).collect();
        let path = Path(vec![3, 3, 3]);
        let first = train_step(&space, &mut w, &path, &data, &batch, 0.02).unwrap();
        let mut last = first;
        for _ in 0..50 {
            last = train_step(&space, &mut w, &path, &data, &batch, 0.02).unwrap();
        }
        assert!(last < first * 0.7, "{first} -> {last}");
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 0.12), 0.12);
        assert!(cosine_lr(100, 100, 0.12).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.12) - 0.06).abs() < 1e-15);
        assert!(cosine_lr(200, 100, 0.12).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 1.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn shape_check_catches_mismatch() {
        let (space, w, _) = setup(8);
        assert!(w.check_shapes(&space, 3).is_ok());
        assert!(w.check_shapes(&space, 4).is_err());
        let other = SearchSpace::uniform(3, 4, &[0.5, 1.0, 3.0], true).unwrap();
        assert!(w.check_shapes(&other, 3).is_err());
    }
}
