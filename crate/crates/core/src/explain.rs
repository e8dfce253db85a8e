//! Gradient explanations built as graph nodes, so they stay differentiable
//! with respect to the model parameters.
//!
//! The explained scalar is the target logit for classifiers and the raw
//! prediction for regressors. Importance for ranking is `|value|`; ties are
//! broken by ascending feature index.

use dre_autograd::{Bindings, Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DreError, Result};
use crate::model::{ForwardNodes, Model, ModelKind, ParamNodes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerKind {
    #[default]
    InputGradient,
    GradCam,
}

impl ExplainerKind {
    pub fn name(self) -> &'static str {
        match self {
            ExplainerKind::InputGradient => "input_gradient",
            ExplainerKind::GradCam => "grad_cam",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attribution {
    /// Input-shaped for input gradients, `[h, w]` for Grad-CAM.
    pub values: Tensor,
    pub method: ExplainerKind,
    pub target: usize,
}

/// How an attribution graph is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct AttributionOptions {
    pub kind: ExplainerKind,
    /// Treat the Grad-CAM channel weights as constants.
    pub detach_cam_weights: bool,
}

/// One forward pass whose explanations are requested jointly with others.
#[derive(Clone, Copy, Debug)]
pub struct ExplainRequest {
    pub x: NodeId,
    pub forward: ForwardNodes,
    /// `[n, k]` constant one-hot target mask; `None` for regression.
    pub mask: Option<NodeId>,
}

fn explained_scalar(g: &mut Graph, req: &ExplainRequest) -> Result<NodeId> {
    let sel = match req.mask {
        Some(m) => g.mul(req.forward.logits, m)?,
        None => req.forward.logits,
    };
    Ok(g.sum(sel)?)
}

/// Appends attributions for several forward passes with a single reverse
/// sweep. The explained scalars of all samples are summed; because the rows
/// of a batch never interact, the gradient of that sum with respect to row
/// `i` is the gradient of sample `i`'s own scalar.
pub fn attribution_nodes(g: &mut Graph, requests: &[ExplainRequest], opts: AttributionOptions) -> Result<Vec<NodeId>> {
    let mut total = None;
    for r in requests {
        let s = explained_scalar(g, r)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = total.ok_or_else(|| DreError::input("no attribution requests"))?;
    match opts.kind {
        ExplainerKind::InputGradient => {
            let wrt: Vec<_> = requests.iter().map(|r| r.x).collect();
            Ok(g.derive(total, &wrt)?)
        }
        ExplainerKind::GradCam => {
            let maps: Vec<_> = requests
                .iter()
                .map(|r| r.forward.last_conv.ok_or_else(|| DreError::UnsupportedModel("grad_cam".into())))
                .collect::<Result<_>>()?;
            let grads = g.derive(total, &maps)?;
            let mut out = Vec::with_capacity(maps.len());
            for (&a, &da) in maps.iter().zip(&grads) {
                out.push(cam_from(g, a, da, opts.detach_cam_weights)?);
            }
            Ok(out)
        }
    }
}

/// `relu(sum_k GAP(dA)_k * A_k)` for `[n, c, h, w]` activations.
fn cam_from(g: &mut Graph, a: NodeId, da: NodeId, detach: bool) -> Result<NodeId> {
    let s = g.shape(a).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut alpha = g.global_avg_pool(da)?;
    if detach {
        alpha = g.stop_gradient(alpha)?;
    }
    let alpha = g.reshape(alpha, &[n, c, 1, 1])?;
    let weighted = g.mul(a, alpha)?;
    let summed = g.sum_to_shape(weighted, &[n, 1, h, w])?;
    let summed = g.reshape(summed, &[n, h, w])?;
    // Same-padded convolutions keep the input resolution, so the bilinear
    // upsampling step has factor 1 and is the identity.
    Ok(g.relu(summed)?)
}

/// Constant one-hot `[n, k]` mask.
pub fn one_hot(targets: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; targets.len() * k];
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(DreError::input(format!("target {t} out of range for {k} outputs")));
        }
        data[i * k + t] = 1.0;
    }
    Ok(Tensor::new(&[targets.len(), k], data)?)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Attributions for a batch `[n, ...]`. `targets` defaults to the argmax
/// prediction for classifiers and is ignored for regressors.
pub fn explain_batch(model: &Model, x: &Tensor, targets: Option<&[usize]>, opts: AttributionOptions) -> Result<(Tensor, Vec<usize>)> {
    if opts.kind == ExplainerKind::GradCam && model.spec.kind != ModelKind::Cnn {
        return Err(DreError::UnsupportedModel("grad_cam on an mlp".into()));
    }
    let n = model
        .batch_size(x)?
        .ok_or_else(|| DreError::input("explain_batch expects a leading batch axis"))?;
    let k = model.spec.output_dim;
    let targets: Vec<usize> = if k == 1 {
        vec![0; n]
    } else if let Some(t) = targets {
        if t.len() != n {
            return Err(DreError::input(format!("{} targets for {} samples", t.len(), n)));
        }
        t.to_vec()
    } else {
        argmax_rows(&model.forward(x)?)
    };
    let mut g = Graph::new();
    let p: ParamNodes = model.register(&mut g)?;
    let xi = g.input("x", x.shape())?;
    let forward = model.forward_nodes(&mut g, &p, xi)?;
    let mask = if k > 1 { Some(g.constant(one_hot(&targets, k)?)) } else { None };
    let attr = attribution_nodes(&mut g, &[ExplainRequest { x: xi, forward, mask }], opts)?[0];
    let mut b = Bindings::new();
    model.bind_params(&mut b);
    b.insert("x".into(), x.clone());
    let values = g.eval_nodes(&b, &[attr])?.remove(0);
    Ok((values, targets))
}

fn explain_one(model: &Model, x: &Tensor, target: Option<usize>, kind: ExplainerKind) -> Result<Attribution> {
    if model.batch_size(x)?.is_some() {
        return Err(DreError::input("expected a single unbatched sample"));
    }
    if let Some(t) = target {
        if t >= model.spec.output_dim {
            return Err(DreError::input(format!(
                "target {t} out of range for {} outputs",
                model.spec.output_dim
            )));
        }
    }
    let mut shape = vec![1];
    shape.extend(x.shape());
    let xb = x.reshape(&shape)?;
    let t = target.map(|t| vec![t]);
    let (values, targets) = explain_batch(model, &xb, t.as_deref(), AttributionOptions { kind, detach_cam_weights: false })?;
    let vs = values.shape()[1..].to_vec();
    Ok(Attribution { values: values.reshape(&vs)?, method: kind, target: targets[0] })
}

/// Gradient of the explained scalar with respect to the input.
pub fn input_gradient(model: &Model, x: &Tensor, target: Option<usize>) -> Result<Attribution> {
    explain_one(model, x, target, ExplainerKind::InputGradient)
}

/// Grad-CAM map over the input's spatial grid.
pub fn grad_cam(model: &Model, x: &Tensor, target: Option<usize>) -> Result<Attribution> {
    if model.spec.kind != ModelKind::Cnn {
        return Err(DreError::UnsupportedModel("grad_cam on an mlp".into()));
    }
    explain_one(model, x, target, ExplainerKind::GradCam)
}

/// Feature indices by descending `|value|`, ties by ascending index.
pub fn rank_features(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    idx
}
