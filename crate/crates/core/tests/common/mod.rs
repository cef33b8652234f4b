//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use gnas_core::evaluator::{forward_loss, loss_and_gradients, Dataset, SupernetWeights};
use gnas_core::search_space::{Layer, OperationChoice, Path, SearchSpace};
use rand::Rng;

/// Random small space whose layer widths may change, with identity only
/// where a layer keeps its width.
pub fn random_space<R: Rng>(rng: &mut R, layers: usize) -> SearchSpace {
    let mut dim = rng.random_range(2..=5);
    let layers = (0..layers)
        .map(|_| {
            let out = if rng.random_bool(0.5) {
                dim
            } else {
                rng.random_range(2..=5)
            };
            let mut choices = Vec::new();
            if out == dim {
                choices.push(OperationChoice::identity(0, 0.0));
            }
            for w in [0.5, 1.0, 2.5] {
                let id = choices.len() as u32;
                choices.push(OperationChoice::affine(id, dim, out, w, 0.1));
            }
            let layer = Layer {
                input_dim: dim,
                output_dim: out,
                choices,
            };
            dim = out;
            layer
        })
        .collect();
    SearchSpace::new(layers).unwrap()
}

/// Max relative error between analytic gradients and central differences
/// over every parameter on `path`, skipping components whose perturbation
/// crosses a ReLU kink (detected by one-sided slopes disagreeing).
pub fn gradient_check(
    space: &SearchSpace,
    weights: &SupernetWeights,
    path: &Path,
    data: &Dataset,
    batch: &[usize],
) -> (f64, usize) {
    let (_, grads) = loss_and_gradients(space, weights, path, data, batch).unwrap();
    let loss_at = |w: &SupernetWeights| forward_loss(space, w, path, data, batch).unwrap().loss;
    let base = loss_at(weights);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut probe = |get: &dyn Fn(&mut SupernetWeights) -> &mut f64, analytic: f64| {
        let mut w = weights.clone();
        let x0 = *get(&mut w);
        let h = 1e-5 * x0.abs().max(1.0);
        *get(&mut w) = x0 + h;
        let plus = loss_at(&w);
        *get(&mut w) = x0 - h;
        let minus = loss_at(&w);
        let numeric = (plus - minus) / (2.0 * h);
        let right = (plus - base) / h;
        let left = (base - minus) / h;
        if (right - left).abs() > 1e-3 * (right.abs() + left.abs()).max(1e-6) {
            return;
        }
        // Central differences carry ~1e-11 absolute roundoff at h = 1e-5, so
        // components below 1e-5 are compared on an absolute 1e-10 scale.
        let denom = analytic.abs().max(numeric.abs()).max(1e-5);
        worst = worst.max((analytic - numeric).abs() / denom);
        checked += 1;
    };
    for (t, g) in grads.classifier.iter().enumerate() {
        for i in 0..g.data.len() {
            probe(
                &move |w: &mut SupernetWeights| &mut w.classifier.params[t].data[i],
                g.data[i],
            );
        }
    }
    for (l, &c) in path.ops().iter().enumerate() {
        for (t, g) in grads.blocks[l].iter().enumerate() {
            for i in 0..g.data.len() {
                probe(
                    &move |w: &mut SupernetWeights| &mut w.blocks[l][c].params[t].data[i],
                    g.data[i],
                );
            }
        }
    }
    (worst, checked)
}
