//! Gradient oracles shared by several test targets.
#![allow(dead_code)]

use dre_core::autograd::{finite_difference_check, NodeId, Tensor};
use dre_core::envdata::{TaskKind, Targets};
use dre_core::explain::AttributionOptions;
use dre_core::model::{Activation, Model, ModelSpec, ParameterSet};
use dre_core::objective::{build_dre_loss, build_task_loss, pair_batch, Discrepancy, EnvBatch, LossGraph, MixConfig, MixPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CLS2: TaskKind = TaskKind::Classification { classes: 2 };

pub fn batch(rng: &mut ChaCha8Rng, env: usize, labels: &[usize], d: usize) -> EnvBatch {
    let n = labels.len();
    let x = Tensor::new(&[n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    EnvBatch { env, x, y: Targets::Classes(labels.to_vec()) }
}

/// A small softplus MLP with jittered biases, smooth to second order.
pub fn smooth_model(seed: u64) -> Model {
    let spec = ModelSpec::mlp(3, &[5], 2, Activation::Softplus);
    let m = Model::build(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    let params = ParameterSet::new(
        m.params
            .iter()
            .map(|(n, t)| {
                let data = t.data().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
                (n.to_string(), Tensor::new(t.shape(), data).unwrap())
            })
            .collect(),
    );
    Model::from_parts(spec, params).unwrap()
}

/// Fourth-order central differences in every parameter coordinate. Coordinates whose
/// derivative is nearly zero (e.g. head weights of the unexplained class,
/// reached only through the KL floor) sit at the rounding level of the
/// difference quotient, so the denominator is floored at 1e-4 of the
/// largest gradient entry.
pub fn parameter_gradient_error(lg: &LossGraph, node: NodeId, names: &[String]) -> f64 {
    let h = 1e-4;
    let mut g = lg.graph.clone();
    let grads = g.derive(node, &lg.params.ids).unwrap();
    let analytic = g.eval_nodes(&lg.bindings, &grads).unwrap();
    let scale = analytic.iter().flat_map(|t| t.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    let mut probe = lg.bindings.clone();
    let mut worst: f64 = 0.0;
    for (a, name) in analytic.iter().zip(names) {
        let key = format!("param/{name}");
        for j in 0..a.len() {
            let x0 = lg.bindings[&key].data()[j];
            let mut at = |v: f64| {
                probe.get_mut(&key).unwrap().data_mut()[j] = v;
                lg.graph.eval_nodes(&probe, &[node]).unwrap()[0].item()
            };
            let numeric = (8.0 * (at(x0 + h) - at(x0 - h)) - (at(x0 + 2.0 * h) - at(x0 - 2.0 * h))) / (12.0 * h);
            at(x0);
            let an = a.data()[j];
            let err = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-4 * scale);
            worst = worst.max(err);
        }
    }
    worst
}

/// Worst parameter-gradient error of the consistency, sparsity and total
/// terms over `instances` random (model, pair) draws, alternating L1 and KL.
pub fn second_order_worst(instances: u64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = [0.0f64; 3];
    for seed in 0..instances {
        let m = smooth_model(seed);
        let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
        let bs = [batch(&mut rng, 0, &[0, 1], 3), batch(&mut rng, 1, &[1, 0], 3)];
        let pairs = pair_batch(&bs, CLS2, 0.0, &mut rng).unwrap();
        assert_eq!(pairs.len(), 2);
        // interior tau keeps the consistency term well above rounding noise
        let tau = vec![rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
        let plan = MixPlan::with_tau(pairs, tau).unwrap();
        let kind = if seed % 2 == 0 { Discrepancy::L1 } else { Discrepancy::Kl };
        let cfg = MixConfig { discrepancy: kind, ..MixConfig::default() };
        let lg = build_dre_loss(&m, &bs, &plan, &cfg, AttributionOptions::default()).unwrap();
        for (w, node) in worst.iter_mut().zip([lg.consistency, lg.sparsity, lg.total]) {
            *w = w.max(parameter_gradient_error(&lg, node, &names));
        }
    }
    worst
}

/// Worst central-difference error of task-loss parameter gradients over
/// `instances` random smooth models: MLPs of varying depth and width, and
/// every fourth instance a small CNN.
pub fn first_order_worst(instances: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let (spec, d): (ModelSpec, Vec<usize>) = if seed % 4 == 3 {
            (ModelSpec::cnn([2, 5, 4], [2, 3], 3, Activation::Softplus), vec![2, 5, 4])
        } else {
            let width = rng.random_range(2..7);
            let hidden = vec![width; 1 + (seed % 2) as usize];
            (ModelSpec::mlp(4, &hidden, 3, Activation::Softplus), vec![4])
        };
        let m = Model::build(&spec, seed).unwrap();
        let mut batches = Vec::new();
        for env in 0..2 {
            let n = 3;
            let mut shape = vec![n];
            shape.extend(&d);
            let len = shape.iter().product();
            let x = Tensor::new(&shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let y = (0..n).map(|_| rng.random_range(0..3)).collect();
            batches.push(EnvBatch { env, x, y: Targets::Classes(y) });
        }
        let lg = build_task_loss(&m, &batches).unwrap();
        let r = finite_difference_check(&lg.graph, &lg.bindings, lg.task, &lg.params.ids, 1e-5).unwrap();
        worst = worst.max(r.max_relative_error);
    }
    worst
}

/// `x -> x W + b` as an MLP: the hidden layer is `relu(x + 100)`, which is
/// the identity shifted by 100 for every input above -100.
pub fn affine_model(w: &[Vec<f64>], b: &[f64]) -> Model {
    let (d, k) = (w.len(), b.len());
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    let flat: Vec<f64> = w.iter().flatten().copied().collect();
    let bias: Vec<f64> = (0..k).map(|j| b[j] - 100.0 * (0..d).map(|i| w[i][j]).sum::<f64>()).collect();
    let params = ParameterSet::new(vec![
        ("fc0.weight".into(), Tensor::new(&[d, d], eye).unwrap()),
        ("fc0.bias".into(), Tensor::vector(vec![100.0; d])),
        ("fc1.weight".into(), Tensor::new(&[d, k], flat).unwrap()),
        ("fc1.bias".into(), Tensor::vector(bias)),
    ]);
    Model::from_parts(ModelSpec::mlp(d, &[d], k, Activation::Relu), params).unwrap()
}
