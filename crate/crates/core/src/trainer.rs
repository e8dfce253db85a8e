//! Training loop for the ERM, Mixup and explanation-consistency methods.
//!
//! Each step draws a batch from every training environment, builds the
//! method's loss graph, differentiates it with respect to the parameters and
//! applies one Adam update. The pooled validation split is scored every
//! `val_every` steps and at the final step; the best-scoring parameters are
//! returned (ties keep the earlier checkpoint).
//!
//! Batch sampling and mixing draw from separate seeded streams, so methods
//! that consume no mixing randomness see the same batches as ERM.

use std::io::Write;

use dre_autograd::{Graph, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envdata::{split_train_val, DatasetBundle, EnvironmentDataset, TaskKind, Targets};
use crate::error::{DreError, Result};
use crate::explain::{one_hot, AttributionOptions, ExplainerKind};
use crate::metrics::{task_loss, task_metric};
use crate::model::{Model, ModelSpec, ParameterSet};
use crate::objective::{
    build_dre_loss, build_task_loss, concat_inputs, concat_targets, pair_batch, sample_tau, EnvBatch, LossBreakdown,
    LossGraph, MixConfig, MixPlan,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Mixup,
    Dre,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Mixup => "mixup",
            Method::Dre => "dre",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = DreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(Method::Erm),
            "mixup" => Ok(Method::Mixup),
            "dre" => Ok(Method::Dre),
            _ => Err(DreError::input(format!("unknown method `{s}` (expected erm, mixup or dre)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub method: Method,
    pub learning_rate: f64,
    /// Samples drawn from each training environment per step.
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mix: MixConfig,
    /// Beta concentration of the Mixup baseline.
    pub mixup_alpha: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Explanation used inside the consistency objective.
    pub explainer: ExplainerKind,
    pub detach_cam_weights: bool,
    pub val_every: usize,
    pub train_fraction: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            method: Method::Dre,
            learning_rate: 1e-3,
            batch_size: 32,
            steps: 5000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mix: MixConfig::default(),
            mixup_alpha: 0.2,
            seed: 0,
            clip_norm: Some(10.0),
            explainer: ExplainerKind::InputGradient,
            detach_cam_weights: false,
            val_every: 100,
            train_fraction: 0.8,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DreError::input("steps must be > 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DreError::input("learning_rate must be > 0"));
        }
        if self.batch_size == 0 || self.val_every == 0 {
            return Err(DreError::input("batch_size and val_every must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(DreError::input("adam betas must lie in [0, 1) and eps must be > 0"));
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(DreError::input("mixup_alpha must be > 0"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(DreError::input("clip_norm must be > 0"));
            }
        }
        self.mix.validate()
    }

    fn attribution(&self) -> AttributionOptions {
        AttributionOptions { kind: self.explainer, detach_cam_weights: self.detach_cam_weights }
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParameterSet, grads: &[Tensor], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(DreError::input("gradient/moment count differs from parameter count"));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(DreError::input(format!("gradient of `{name}` has shape {:?}, expected {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(DreError::Numeric(format!("non-finite gradient for parameter `{name}`")));
        }
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = beta1 * *mj + (1.0 - beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            *pj -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub task: f64,
    pub consistency: f64,
    pub sparsity: f64,
    pub total: f64,
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingHistory {
    pub rows: Vec<HistoryRow>,
    /// Step whose parameters were returned.
    pub selected_step: usize,
    pub selected_val_metric: f64,
    /// Steps on which no cross-environment pair could be formed.
    pub empty_pair_steps: usize,
}

impl TrainingHistory {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "task", "consistency", "sparsity", "total", "val_metric"])?;
        for r in &self.rows {
            wr.write_record([
                r.step.to_string(),
                fmt_f64(r.task),
                fmt_f64(r.consistency),
                fmt_f64(r.sparsity),
                fmt_f64(r.total),
                r.val_metric.map(fmt_f64).unwrap_or_default(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn breakdowns(&self) -> impl Iterator<Item = LossBreakdown> + '_ {
        self.rows.iter().map(|r| LossBreakdown { task: r.task, consistency: r.consistency, sparsity: r.sparsity, total: r.total })
    }
}

/// Shortest representation that parses back to the same double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Per-environment training and validation parts, split with `seed`.
pub fn split_envs(bundle: &DatasetBundle, fraction: f64, seed: u64) -> Result<(Vec<EnvironmentDataset>, Vec<EnvironmentDataset>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, e) in bundle.train_envs.iter().enumerate() {
        let (t, v) = split_train_val(e, fraction, seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64))?;
        train.push(t);
        val.push(v);
    }
    Ok((train, val))
}

/// Concatenation of several environments (targets must share a kind).
pub fn pool(envs: &[EnvironmentDataset], id: &str) -> Result<EnvironmentDataset> {
    let batches: Vec<EnvBatch> = envs
        .iter()
        .enumerate()
        .map(|(i, e)| EnvBatch { env: i, x: e.samples.clone(), y: e.targets.clone() })
        .collect();
    EnvironmentDataset::new(id, concat_inputs(&batches)?, concat_targets(&batches))
}

fn higher_is_better(task: TaskKind) -> bool {
    matches!(task, TaskKind::Classification { .. })
}

fn mixup_loss<R: Rng + ?Sized>(model: &Model, batches: &[EnvBatch], alpha: f64, rng: &mut R) -> Result<LossGraph> {
    let x = concat_inputs(batches)?;
    let y = concat_targets(batches);
    let n = x.shape()[0];
    let lam = sample_tau(alpha, rng)?;
    let perm: Vec<usize> = sample(rng, n, n).into_vec();
    let xp = x.select_rows(&perm)?;
    let mixed = crate::objective::mixup_inputs(&x, &xp, lam)?;
    let k = model.spec.output_dim;
    let mut g = Graph::new();
    let params = model.register(&mut g)?;
    let xi = g.input("x", mixed.shape())?;
    let fwd = model.forward_nodes(&mut g, &params, xi)?;
    let per = match &y {
        Targets::Classes(c) => {
            let a = one_hot(c, k)?;
            let b = one_hot(&perm.iter().map(|&i| c[i]).collect::<Vec<_>>(), k)?;
            let soft = crate::objective::mixup_inputs(&a, &b, lam)?;
            let t = g.constant(soft);
            g.cross_entropy(fwd.logits, t)?
        }
        Targets::Values(v) => {
            let mixed_y: Vec<f64> = (0..n).map(|i| lam * v[i] + (1.0 - lam) * v[perm[i]]).collect();
            let t = g.constant(Tensor::new(&[n, 1], mixed_y)?);
            g.squared_error(fwd.logits, t)?
        }
    };
    let task = g.mean(per)?;
    let zero = g.fill(&[], 0.0);
    let mut bindings = dre_autograd::Bindings::new();
    model.bind_params(&mut bindings);
    bindings.insert("x".into(), mixed);
    Ok(LossGraph { graph: g, bindings, params, task, consistency: zero, sparsity: zero, total: task })
}

/// Pairing threshold in target units for regression bundles.
pub fn pairing_delta(mix: &MixConfig, envs: &[EnvironmentDataset]) -> f64 {
    if let Some(d) = mix.delta {
        return d;
    }
    let ys: Vec<f64> = envs.iter().flat_map(|e| e.targets.as_f64()).collect();
    0.1 * crate::envdata::std_dev(&ys)
}

/// Trains on the bundle's training environments.
pub fn train(bundle: &DatasetBundle, spec: &ModelSpec, hyper: &HyperParams) -> Result<(Model, TrainingHistory)> {
    hyper.validate()?;
    bundle.validate()?;
    if spec.output_dim != bundle.task.output_dim() || spec.input_shape != bundle.feature_shape {
        return Err(DreError::input(format!(
            "model (input {:?}, output {}) does not fit the bundle (features {:?}, output {})",
            spec.input_shape,
            spec.output_dim,
            bundle.feature_shape,
            bundle.task.output_dim()
        )));
    }
    let (train_parts, val_parts) = split_envs(bundle, hyper.train_fraction, hyper.seed)?;
    let val = pool(&val_parts, "val")?;
    let delta = pairing_delta(&hyper.mix, &train_parts);

    let mut model = Model::build(spec, hyper.seed)?;
    let mut adam = AdamState::new(&model.params);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut mix_rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(2));
    let better = |a: f64, b: f64| if higher_is_better(bundle.task) { a > b } else { a < b };

    let mut rows = Vec::with_capacity(hyper.steps);
    // (step, metric, loss, params)
    let mut best: Option<(usize, f64, f64, ParameterSet)> = None;
    let mut empty_pair_steps = 0;
    let mut last: Option<LossBreakdown> = None;

    for step in 1..=hyper.steps {
        let batches: Vec<EnvBatch> = train_parts
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let take = hyper.batch_size.min(e.len());
                let idx = sample(&mut batch_rng, e.len(), take).into_vec();
                Ok(EnvBatch { env: i, x: e.samples.select_rows(&idx)?, y: e.targets.select(&idx) })
            })
            .collect::<Result<_>>()?;

        let mut lg = match hyper.method {
            Method::Erm => build_task_loss(&model, &batches)?,
            Method::Mixup => mixup_loss(&model, &batches, hyper.mixup_alpha, &mut mix_rng)?,
            Method::Dre => {
                let pairs = pair_batch(&batches, bundle.task, delta, &mut mix_rng)?;
                if pairs.is_empty() {
                    empty_pair_steps += 1;
                }
                let plan = MixPlan::draw(pairs, hyper.mix.alpha, &mut mix_rng)?;
                build_dre_loss(&model, &batches, &plan, &hyper.mix, hyper.attribution())?
            }
        };
        let grads = lg.graph.derive(lg.total, &lg.params.ids)?;
        let mut wanted = vec![lg.task, lg.consistency, lg.sparsity, lg.total];
        wanted.extend(&grads);
        let mut vals = match lg.graph.eval_nodes(&lg.bindings, &wanted) {
            Ok(v) => v,
            Err(dre_autograd::GraphError::NonFinite { .. }) => return Err(DreError::Divergence { step, last }),
            Err(e) => return Err(e.into()),
        };
        let mut grads: Vec<Tensor> = vals.split_off(4);
        let bd = LossBreakdown { task: vals[0].item(), consistency: vals[1].item(), sparsity: vals[2].item(), total: vals[3].item() };
        if !bd.total.is_finite() {
            return Err(DreError::Divergence { step, last });
        }
        if let Some(c) = hyper.clip_norm {
            if !clip_global_norm(&mut grads, c).is_finite() {
                return Err(DreError::Divergence { step, last: Some(bd) });
            }
        }
        adam_step(&mut model.params, &grads, &mut adam, hyper.learning_rate, hyper.beta1, hyper.beta2, hyper.eps).map_err(
            |e| match e {
                DreError::Numeric(_) => DreError::Divergence { step, last: Some(bd) },
                e => e,
            },
        )?;
        last = Some(bd);

        let val_metric = if step % hyper.val_every == 0 || step == hyper.steps {
            let m = task_metric(&model, &val)?;
            let l = task_loss(&model, &val)?;
            if !m.is_finite() || !l.is_finite() {
                return Err(DreError::Divergence { step, last });
            }
            // Equal metrics fall back to the validation loss, then to the earlier step.
            if best.as_ref().is_none_or(|(_, bm, bl, _)| better(m, *bm) || (m == *bm && l < *bl)) {
                best = Some((step, m, l, model.params.clone()));
            }
            Some(m)
        } else {
            None
        };
        rows.push(HistoryRow { step, task: bd.task, consistency: bd.consistency, sparsity: bd.sparsity, total: bd.total, val_metric });
    }
    let (selected_step, selected_val_metric, _, params) = best.expect("final step is always validated");
    model.params = params;
    Ok((model, TrainingHistory { rows, selected_step, selected_val_metric, empty_pair_steps }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = ParameterSet::new(vec![("w".into(), Tensor::vector(vec![1.0, -2.0]))]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::full(&[2], 1.0)], &mut s, 0.1, 0.9, 0.999, 1e-8).unwrap();
        let d = p.get("w").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 2.1).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = ParameterSet::new(vec![("w".into(), Tensor::vector(vec![0.3, 0.7]))]);
        let before = p.clone();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = ParameterSet::new(vec![("fc0.weight".into(), Tensor::vector(vec![0.0]))]);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::vector(vec![f64::NAN])], &mut s, 0.1, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(err.to_string().contains("fc0.weight"));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::vector(vec![30.0, 40.0])];
        assert_eq!(clip_global_norm(&mut g, 10.0), 50.0);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-12 && (g[0].data()[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("mixup".parse::<Method>().unwrap(), Method::Mixup);
        assert!("irm".parse::<Method>().is_err());
    }
}
