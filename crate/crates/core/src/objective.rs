//! The explanation-consistency objective.
//!
//! For a pair `(x_a, x_b)` drawn from two different environments with the
//! same label, one draw `tau ~ Beta(alpha, alpha)` mixes both the inputs and
//! their explanations:
//!
//! ```text
//! consistency = D( g(tau x_a + (1-tau) x_b),  tau g(x_a) + (1-tau) g(x_b) )
//! total       = task + lambda * consistency + gamma * (mean|g(x_a)| + mean|g(x_b)|)
//! ```
//!
//! The task term averages over every sample in the step's batches; the
//! consistency and sparsity terms average over the pairs only.

use dre_autograd::{Bindings, Graph, NodeId, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::envdata::{TaskKind, Targets};
use crate::error::{DreError, Result};
use crate::explain::{attribution_nodes, one_hot, AttributionOptions, ExplainRequest};
use crate::model::{Model, ParamNodes};

/// Probability floor applied before normalising attributions for `kl`.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Discrepancy {
    #[default]
    L1,
    /// `KL(p || q)`; asymmetric, `p` comes from the mixed sample.
    Kl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    pub alpha: f64,
    pub discrepancy: Discrepancy,
    pub lambda: f64,
    pub gamma: f64,
    /// Regression pairing threshold on `|y_a - y_b|`. `None` means 0.1 times
    /// the pooled training-target standard deviation.
    pub delta: Option<f64>,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self { alpha: 0.2, discrepancy: Discrepancy::L1, lambda: 1.0, gamma: 0.01, delta: None }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(DreError::input(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(DreError::input(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(DreError::input(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if let Some(d) = self.delta {
            if !(d >= 0.0) {
                return Err(DreError::input(format!("delta must be >= 0, got {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub task: f64,
    pub consistency: f64,
    pub sparsity: f64,
    pub total: f64,
}

/// One draw from `Beta(alpha, alpha)`, strictly inside (0, 1).
pub fn sample_tau<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DreError::input(format!("alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| DreError::input(format!("beta distribution: {e}")))?;
    loop {
        let t: f64 = beta.sample(rng);
        if t > 0.0 && t < 1.0 {
            return Ok(t);
        }
    }
}

fn mix(a: &Tensor, b: &Tensor, tau: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(DreError::input(format!("cannot mix shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(DreError::input(format!("tau must lie in [0, 1], got {tau}")));
    }
    // Equal operands are returned untouched so that mixing a constant is exact.
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| if x == y { x } else { tau * x + (1.0 - tau) * y })
        .collect();
    Ok(Tensor::new(a.shape(), data)?)
}

/// `tau * x_a + (1 - tau) * x_b`.
pub fn mixup_inputs(x_a: &Tensor, x_b: &Tensor, tau: f64) -> Result<Tensor> {
    mix(x_a, x_b, tau)
}

/// Same mixing as [`mixup_inputs`]; callers pass the draw used for the inputs.
pub fn mixup_explanations(g_a: &Tensor, g_b: &Tensor, tau: f64) -> Result<Tensor> {
    mix(g_a, g_b, tau)
}

fn kl_distribution(v: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = v.iter().map(|x| x.abs().max(KL_FLOOR)).collect();
    let s: f64 = floored.iter().sum();
    floored.into_iter().map(|x| x / s).collect()
}

/// Discrepancy between the explanation of a mixed sample and the mixture of
/// explanations: mean absolute difference (`l1`) or `KL(p || q)` of the
/// normalised magnitudes (`kl`).
pub fn consistency_discrepancy(g_mixed_sample: &Tensor, mixed_explanations: &Tensor, kind: Discrepancy) -> Result<f64> {
    if g_mixed_sample.shape() != mixed_explanations.shape() {
        return Err(DreError::input(format!(
            "discrepancy operands differ in shape: {:?} vs {:?}",
            g_mixed_sample.shape(),
            mixed_explanations.shape()
        )));
    }
    let (a, b) = (g_mixed_sample.data(), mixed_explanations.data());
    match kind {
        Discrepancy::L1 => Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64),
        Discrepancy::Kl => {
            if a.iter().all(|&v| v == 0.0) || b.iter().all(|&v| v == 0.0) {
                return Err(DreError::Degenerate("kl discrepancy of an all-zero attribution".into()));
            }
            let (p, q) = (kl_distribution(a), kl_distribution(b));
            Ok(p.iter().zip(&q).map(|(pi, qi)| pi * (pi.ln() - qi.ln())).sum())
        }
    }
}

/// Mean absolute attribution.
pub fn sparsity_penalty(g: &Tensor) -> f64 {
    g.data().iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64
}

/// A step's samples from one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvBatch {
    pub env: usize,
    /// `[n, ...feature_shape]`
    pub x: Tensor,
    pub y: Targets,
}

impl EnvBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Two samples from distinct environments, addressed as
/// `(batch position, row)` into the step's batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixPair {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub env_a: usize,
    pub env_b: usize,
}

/// Pairs same-label (classification) or `delta`-close (regression) samples
/// across distinct environments. Unpaired samples are left out; an empty
/// result is a valid outcome that callers count.
pub fn pair_batch<R: Rng + ?Sized>(batches: &[EnvBatch], task: TaskKind, delta: f64, rng: &mut R) -> Result<Vec<MixPair>> {
    let envs: std::collections::BTreeSet<_> = batches.iter().map(|b| b.env).collect();
    if envs.len() < 2 {
        return Err(DreError::input("pairing needs at least two environments"));
    }
    let mut pairs = Vec::new();
    match task {
        TaskKind::Classification { classes } => {
            for label in 0..classes {
                // Per-environment members of this label, shuffled.
                let mut groups: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
                for (bi, b) in batches.iter().enumerate() {
                    let Targets::Classes(ys) = &b.y else {
                        return Err(DreError::input("regression targets in a classification batch"));
                    };
                    let mut members: Vec<_> = ys.iter().enumerate().filter(|(_, &y)| y == label).map(|(r, _)| (bi, r)).collect();
                    members.shuffle(rng);
                    match groups.iter_mut().find(|(e, _)| *e == b.env) {
                        Some((_, m)) => {
                            m.extend(members);
                            m.shuffle(rng);
                        }
                        None => groups.push((b.env, members)),
                    }
                }
                // Repeatedly match the two largest remaining environments,
                // which maximises the number of cross-environment pairs.
                loop {
                    groups.sort_by(|x, y| y.1.len().cmp(&x.1.len()).then(x.0.cmp(&y.0)));
                    if groups.len() < 2 || groups[1].1.is_empty() {
                        break;
                    }
                    let a = groups[0].1.pop().expect("non-empty");
                    let b = groups[1].1.pop().expect("non-empty");
                    let (ea, eb) = (groups[0].0, groups[1].0);
                    pairs.push(MixPair { a, b, env_a: ea, env_b: eb });
                }
            }
            // Interleave labels so pair order carries no label structure.
            pairs.shuffle(rng);
        }
        TaskKind::Regression => {
            let mut all = Vec::new();
            for (bi, b) in batches.iter().enumerate() {
                let Targets::Values(ys) = &b.y else {
                    return Err(DreError::input("class targets in a regression batch"));
                };
                all.extend(ys.iter().enumerate().map(|(r, &y)| ((bi, r), b.env, y)));
            }
            all.shuffle(rng);
            let mut used = vec![false; all.len()];
            for i in 0..all.len() {
                if used[i] {
                    continue;
                }
                let (ra, ea, ya) = all[i];
                if let Some(j) = (i + 1..all.len()).find(|&j| !used[j] && all[j].1 != ea && (all[j].2 - ya).abs() <= delta) {
                    used[i] = true;
                    used[j] = true;
                    pairs.push(MixPair { a: ra, b: all[j].0, env_a: ea, env_b: all[j].1 });
                }
            }
        }
    }
    Ok(pairs)
}

/// Pairs together with their mixing coefficients. Holding the single `tau`
/// per pair here is what guarantees that inputs and explanations are mixed
/// with the same draw.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub pairs: Vec<MixPair>,
    pub tau: Vec<f64>,
}

impl MixPlan {
    pub fn draw<R: Rng + ?Sized>(pairs: Vec<MixPair>, alpha: f64, rng: &mut R) -> Result<Self> {
        let tau = pairs.iter().map(|_| sample_tau(alpha, rng)).collect::<Result<_>>()?;
        Ok(Self { pairs, tau })
    }

    pub fn with_tau(pairs: Vec<MixPair>, tau: Vec<f64>) -> Result<Self> {
        if pairs.len() != tau.len() {
            return Err(DreError::input("one tau per pair required"));
        }
        if tau.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(DreError::input("tau must lie in [0, 1]"));
        }
        Ok(Self { pairs, tau })
    }
}

/// Mixes row `p` of `a` and `b` with `tau[p]`.
pub fn mix_rows(a: &Tensor, b: &Tensor, tau: &[f64]) -> Result<Tensor> {
    if a.shape() != b.shape() || a.shape().first() != Some(&tau.len()) {
        return Err(DreError::input("mix_rows needs equal shapes and one tau per row"));
    }
    let row = a.len() / tau.len();
    let mut out = Vec::with_capacity(a.len());
    for (p, &t) in tau.iter().enumerate() {
        let ra = Tensor::vector(a.data()[p * row..(p + 1) * row].to_vec());
        let rb = Tensor::vector(b.data()[p * row..(p + 1) * row].to_vec());
        out.extend(mix(&ra, &rb, t)?.into_data());
    }
    Ok(Tensor::new(a.shape(), out)?)
}

/// Row offsets of each batch inside the concatenated step batch.
fn offsets(batches: &[EnvBatch]) -> Vec<usize> {
    let mut off = Vec::with_capacity(batches.len());
    let mut acc = 0;
    for b in batches {
        off.push(acc);
        acc += b.len();
    }
    off
}

pub(crate) fn concat_inputs(batches: &[EnvBatch]) -> Result<Tensor> {
    let parts: Vec<&Tensor> = batches.iter().map(|b| &b.x).collect();
    Ok(Tensor::concat_rows(&parts)?)
}

pub(crate) fn concat_targets(batches: &[EnvBatch]) -> Targets {
    match &batches[0].y {
        Targets::Classes(_) => Targets::Classes(
            batches.iter().flat_map(|b| if let Targets::Classes(c) = &b.y { c.clone() } else { vec![] }).collect(),
        ),
        Targets::Values(_) => Targets::Values(
            batches.iter().flat_map(|b| if let Targets::Values(v) = &b.y { v.clone() } else { vec![] }).collect(),
        ),
    }
}

/// Mean cross-entropy (one-hot targets) or mean squared error.
pub(crate) fn task_loss_nodes(g: &mut Graph, logits: NodeId, y: &Targets, k: usize) -> Result<NodeId> {
    let per = match y {
        Targets::Classes(c) => {
            let t = g.constant(one_hot(c, k)?);
            g.cross_entropy(logits, t)?
        }
        Targets::Values(v) => {
            let t = g.constant(Tensor::new(&[v.len(), 1], v.clone())?);
            g.squared_error(logits, t)?
        }
    };
    Ok(g.mean(per)?)
}

/// A loss graph with its bindings, ready to evaluate or differentiate.
pub struct LossGraph {
    pub graph: Graph,
    pub bindings: Bindings,
    pub params: ParamNodes,
    pub task: NodeId,
    pub consistency: NodeId,
    pub sparsity: NodeId,
    pub total: NodeId,
}

impl LossGraph {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let v = self
            .graph
            .eval_nodes(&self.bindings, &[self.task, self.consistency, self.sparsity, self.total])?;
        Ok(LossBreakdown { task: v[0].item(), consistency: v[1].item(), sparsity: v[2].item(), total: v[3].item() })
    }
}

fn discrepancy_nodes(g: &mut Graph, gm: NodeId, mixed: NodeId, kind: Discrepancy) -> Result<NodeId> {
    match kind {
        Discrepancy::L1 => {
            let d = g.sub(gm, mixed)?;
            let d = g.abs(d)?;
            Ok(g.mean(d)?)
        }
        Discrepancy::Kl => {
            let rows = g.shape(gm)[0];
            let norm = |g: &mut Graph, v: NodeId| -> Result<NodeId> {
                let a = g.abs(v)?;
                let a = g.clamp_min(a, KL_FLOOR)?;
                let s = g.sum_to_shape(a, &[rows, 1])?;
                let r = g.recip(s)?;
                Ok(g.mul(a, r)?)
            };
            let p = norm(g, gm)?;
            let q = norm(g, mixed)?;
            let lp = g.log(p)?;
            let lq = g.log(q)?;
            let d = g.sub(lp, lq)?;
            let pd = g.mul(p, d)?;
            let per_row = g.sum(pd)?;
            Ok(g.scale(per_row, 1.0 / rows as f64)?)
        }
    }
}

/// Builds the full objective for one step. With `lambda = gamma = 0` the
/// parameter gradient equals the plain task-loss gradient bit for bit.
pub fn build_dre_loss(
    model: &Model,
    batches: &[EnvBatch],
    plan: &MixPlan,
    cfg: &MixConfig,
    explainer: AttributionOptions,
) -> Result<LossGraph> {
    cfg.validate()?;
    if batches.is_empty() || batches.iter().any(|b| b.is_empty()) {
        return Err(DreError::input("every environment batch must be non-empty"));
    }
    let k = model.spec.output_dim;
    let x_all = concat_inputs(batches)?;
    let y_all = concat_targets(batches);
    let n = x_all.shape()[0];

    let mut g = Graph::new();
    let params = model.register(&mut g)?;
    let xi = g.input("x", x_all.shape())?;
    let fwd = model.forward_nodes(&mut g, &params, xi)?;
    let task = task_loss_nodes(&mut g, fwd.logits, &y_all, k)?;

    let mut bindings = Bindings::new();
    model.bind_params(&mut bindings);

    let (consistency, sparsity) = if plan.pairs.is_empty() {
        (g.fill(&[], 0.0), g.fill(&[], 0.0))
    } else {
        let off = offsets(batches);
        let ia: Vec<usize> = plan.pairs.iter().map(|p| off[p.a.0] + p.a.1).collect();
        let ib: Vec<usize> = plan.pairs.iter().map(|p| off[p.b.0] + p.b.1).collect();
        let pcount = ia.len();
        let xm = mix_rows(&x_all.select_rows(&ia)?, &x_all.select_rows(&ib)?, &plan.tau)?;
        let xmi = g.input("x_mix", xm.shape())?;
        let fwd_mix = model.forward_nodes(&mut g, &params, xmi)?;

        let (mask_all, mask_mix) = match &y_all {
            Targets::Classes(c) => {
                let pair_labels: Vec<usize> = ia.iter().map(|&i| c[i]).collect();
                (Some(g.constant(one_hot(c, k)?)), Some(g.constant(one_hot(&pair_labels, k)?)))
            }
            Targets::Values(_) => (None, None),
        };
        let attr = attribution_nodes(
            &mut g,
            &[
                ExplainRequest { x: xi, forward: fwd, mask: mask_all },
                ExplainRequest { x: xmi, forward: fwd_mix, mask: mask_mix },
            ],
            explainer,
        )?;
        let flat = |g: &mut Graph, v: NodeId| -> Result<NodeId> {
            let s = g.shape(v).to_vec();
            Ok(g.reshape(v, &[s[0], s[1..].iter().product()])?)
        };
        let g_all = flat(&mut g, attr[0])?;
        let g_mix = flat(&mut g, attr[1])?;
        let ga = g.gather_rows(g_all, &ia)?;
        let gb = g.gather_rows(g_all, &ib)?;
        // g_b + tau (g_a - g_b): exactly g_b when the explanations agree.
        let tau = g.constant(Tensor::new(&[pcount, 1], plan.tau.clone())?);
        let diff = g.sub(ga, gb)?;
        let step = g.mul(diff, tau)?;
        let mixed = g.add(gb, step)?;
        let cons = discrepancy_nodes(&mut g, g_mix, mixed, cfg.discrepancy)?;
        let aa = g.abs(ga)?;
        let sa = g.mean(aa)?;
        let ab = g.abs(gb)?;
        let sb = g.mean(ab)?;
        let spars = g.add(sa, sb)?;
        bindings.insert("x_mix".into(), xm);
        (cons, spars)
    };
    debug_assert_eq!(g.shape(xi)[0], n);
    let wc = g.scale(consistency, cfg.lambda)?;
    let ws = g.scale(sparsity, cfg.gamma)?;
    let t1 = g.add(task, wc)?;
    let total = g.add(t1, ws)?;
    bindings.insert("x".into(), x_all);
    Ok(LossGraph { graph: g, bindings, params, task, consistency, sparsity, total })
}

/// Plain task loss over every sample, in the same graph layout the full
/// objective uses for its task term.
pub fn build_task_loss(model: &Model, batches: &[EnvBatch]) -> Result<LossGraph> {
    let x_all = concat_inputs(batches)?;
    let y_all = concat_targets(batches);
    let mut g = Graph::new();
    let params = model.register(&mut g)?;
    let xi = g.input("x", x_all.shape())?;
    let fwd = model.forward_nodes(&mut g, &params, xi)?;
    let task = task_loss_nodes(&mut g, fwd.logits, &y_all, model.spec.output_dim)?;
    let zero = g.fill(&[], 0.0);
    let mut bindings = Bindings::new();
    model.bind_params(&mut bindings);
    bindings.insert("x".into(), x_all);
    Ok(LossGraph { graph: g, bindings, params, task, consistency: zero, sparsity: zero, total: task })
}

/// Pairs the batches, draws the mixing coefficients and evaluates the
/// objective. Returns the breakdown and the number of pairs formed.
pub fn dre_loss<R: Rng + ?Sized>(
    model: &Model,
    batches: &[EnvBatch],
    task: TaskKind,
    cfg: &MixConfig,
    explainer: AttributionOptions,
    rng: &mut R,
) -> Result<(LossBreakdown, usize)> {
    let delta = match (task, cfg.delta) {
        (_, Some(d)) => d,
        (TaskKind::Regression, None) => 0.1 * pooled_std(batches),
        (TaskKind::Classification { .. }, None) => 0.0,
    };
    let pairs = pair_batch(batches, task, delta, rng)?;
    let plan = MixPlan::draw(pairs, cfg.alpha, rng)?;
    let lg = build_dre_loss(model, batches, &plan, cfg, explainer)?;
    Ok((lg.breakdown()?, plan.pairs.len()))
}

fn pooled_std(batches: &[EnvBatch]) -> f64 {
    let v: Vec<f64> = batches
        .iter()
        .flat_map(|b| if let Targets::Values(v) = &b.y { v.clone() } else { vec![] })
        .collect();
    crate::envdata::std_dev(&v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mixing_endpoints_and_arithmetic() {
        let a = Tensor::vector(vec![2.0, 0.0]);
        let b = Tensor::vector(vec![0.0, 4.0]);
        assert_eq!(mixup_inputs(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mixup_inputs(&a, &b, 0.0).unwrap(), b);
        assert_eq!(mixup_inputs(&a, &b, 0.25).unwrap().data(), &[0.5, 3.0]);
        let ga = Tensor::vector(vec![4.0, 0.0]);
        let gb = Tensor::vector(vec![0.0, 8.0]);
        assert_eq!(mixup_explanations(&ga, &gb, 0.25).unwrap().data(), &[1.0, 6.0]);
        assert_eq!(mixup_explanations(&ga, &ga, 0.5).unwrap(), ga);
        assert!(mixup_inputs(&a, &Tensor::zeros(&[3]), 0.5).is_err());
    }

    #[test]
    fn discrepancy_examples() {
        let a = Tensor::vector(vec![0.2, 0.8]);
        let b = Tensor::vector(vec![0.4, 0.6]);
        assert!((consistency_discrepancy(&a, &b, Discrepancy::L1).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(consistency_discrepancy(&a, &a, Discrepancy::L1).unwrap(), 0.0);
        assert_eq!(consistency_discrepancy(&a, &a, Discrepancy::Kl).unwrap(), 0.0);
        let u = Tensor::full(&[4], 0.25);
        assert_eq!(consistency_discrepancy(&u, &u, Discrepancy::Kl).unwrap(), 0.0);
        assert!(matches!(
            consistency_discrepancy(&Tensor::zeros(&[2]), &a, Discrepancy::Kl),
            Err(DreError::Degenerate(_))
        ));
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity_penalty(&Tensor::zeros(&[3])), 0.0);
        assert!((sparsity_penalty(&Tensor::vector(vec![1.0, -1.0, 2.0])) - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tau_rejects_bad_alpha_and_is_seeded() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_tau(0.0, &mut r).is_err());
        let draws = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            (0..20).map(|_| sample_tau(0.2, &mut r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draws(4), draws(4));
        assert!(draws(4).iter().all(|&t| t > 0.0 && t < 1.0));
    }

    fn cls_batch(env: usize, labels: Vec<usize>) -> EnvBatch {
        EnvBatch { env, x: Tensor::zeros(&[labels.len(), 2]), y: Targets::Classes(labels) }
    }

    #[test]
    fn single_sample_pair_and_disjoint_labels() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let t = TaskKind::Classification { classes: 5 };
        let p = pair_batch(&[cls_batch(0, vec![3]), cls_batch(1, vec![3])], t, 0.0, &mut r).unwrap();
        assert_eq!(p.len(), 1);
        let p = pair_batch(&[cls_batch(0, vec![0, 1]), cls_batch(1, vec![2, 3])], t, 0.0, &mut r).unwrap();
        assert!(p.is_empty());
        assert!(pair_batch(&[cls_batch(0, vec![0])], t, 0.0, &mut r).is_err());
    }

    #[test]
    fn regression_pairs_respect_delta() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let b0 = EnvBatch { env: 0, x: Tensor::zeros(&[3, 1]), y: Targets::Values(vec![0.0, 1.0, 5.0]) };
        let b1 = EnvBatch { env: 1, x: Tensor::zeros(&[3, 1]), y: Targets::Values(vec![0.05, 9.0, 5.1]) };
        let p = pair_batch(&[b0.clone(), b1.clone()], TaskKind::Regression, 0.2, &mut r).unwrap();
        assert_eq!(p.len(), 2);
        for pr in p {
            assert_ne!(pr.env_a, pr.env_b);
            let ya = if let Targets::Values(v) = &[&b0, &b1][pr.a.0].y { v[pr.a.1] } else { unreachable!() };
            let yb = if let Targets::Values(v) = &[&b0, &b1][pr.b.0].y { v[pr.b.1] } else { unreachable!() };
            assert!((ya - yb).abs() <= 0.2);
        }
    }
}
