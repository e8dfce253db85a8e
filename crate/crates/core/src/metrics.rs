//! Explanation robustness and task metrics.
//!
//! - DEC: explanation-consistency discrepancy of OOD samples mixed with
//!   same-label in-distribution samples, optionally normalised by a
//!   baseline's mean.
//! - iAUC: area under the insertion curve. Features are copied from the
//!   input onto a reference canvas in descending `|attribution|` order; the
//!   score is the target logit divided by the full-input target logit.
//! - SC: cosine similarity between mean `|attribution|` and the known
//!   feature importance.

use std::io::Write;

use dre_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envdata::{EnvironmentDataset, TaskKind, Targets};
use crate::error::{DreError, Result};
use crate::explain::{argmax_rows, explain_batch, rank_features, AttributionOptions, ExplainerKind};
use crate::model::{Model, ModelKind};
use crate::objective::{consistency_discrepancy, mix_rows, sample_tau, MixConfig};
use crate::trainer::fmt_f64;

/// Rows per forward pass when scoring whole environments.
const CHUNK: usize = 512;

/// Samples whose full-input target logit is at most this are not scored.
pub const MIN_TARGET_LOGIT: f64 = 1e-6;

fn forward_chunked(model: &Model, x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut parts = Vec::new();
    for s in (0..n).step_by(CHUNK) {
        parts.push(model.forward(&x.rows(s, (s + CHUNK).min(n))?)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::concat_rows(&refs)?)
}

/// Accuracy for classifiers, mean absolute residual for regressors.
pub fn task_metric(model: &Model, env: &EnvironmentDataset) -> Result<f64> {
    let out = forward_chunked(model, &env.samples)?;
    match &env.targets {
        Targets::Classes(c) => {
            if model.spec.output_dim < 2 {
                return Err(DreError::input("class targets for a single-output model"));
            }
            let pred = argmax_rows(&out);
            Ok(pred.iter().zip(c).filter(|(p, y)| p == y).count() as f64 / c.len() as f64)
        }
        Targets::Values(v) => {
            if model.spec.output_dim != 1 {
                return Err(DreError::input("regression targets for a multi-output model"));
            }
            Ok(out.data().iter().zip(v).map(|(p, y)| (p - y).abs()).sum::<f64>() / v.len() as f64)
        }
    }
}

/// Mean cross-entropy (classification) or mean squared error (regression).
pub fn task_loss(model: &Model, env: &EnvironmentDataset) -> Result<f64> {
    let out = forward_chunked(model, &env.samples)?;
    match &env.targets {
        Targets::Classes(c) => {
            let k = model.spec.output_dim;
            let mut total = 0.0;
            for (row, &y) in out.data().chunks(k).zip(c) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            Ok(total / c.len() as f64)
        }
        Targets::Values(v) => Ok(out.data().iter().zip(v).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / v.len() as f64),
    }
}

/// Explainer used at evaluation when none is requested: Grad-CAM for
/// convolutional models, input gradients otherwise.
pub fn default_explainer(model: &Model) -> ExplainerKind {
    match model.spec.kind {
        ModelKind::Cnn => ExplainerKind::GradCam,
        ModelKind::Mlp => ExplainerKind::InputGradient,
    }
}

fn class_targets(t: &Targets) -> Option<&[usize]> {
    match t {
        Targets::Classes(c) => Some(c),
        Targets::Values(_) => None,
    }
}

/// OOD-to-ID explanation consistency.
///
/// Forms up to `n_pairs` pairs of one OOD sample and one ID sample with the
/// same label (classification) or a target within `delta` (regression),
/// mixes each pair with its own `tau ~ Beta(alpha, alpha)`, and returns the
/// mean discrepancy. Explanations target the shared ground-truth label.
pub fn dec_metric<R: Rng + ?Sized>(
    model: &Model,
    id_env: &EnvironmentDataset,
    ood_env: &EnvironmentDataset,
    n_pairs: usize,
    mix: &MixConfig,
    delta: f64,
    explainer: ExplainerKind,
    rng: &mut R,
) -> Result<f64> {
    if id_env.is_empty() || ood_env.is_empty() || n_pairs == 0 {
        return Err(DreError::input("dec_metric needs non-empty environments and n_pairs >= 1"));
    }
    mix.validate()?;
    let mut ood_order: Vec<usize> = (0..ood_env.len()).collect();
    ood_order.shuffle(rng);
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n_pairs);
    match (&id_env.targets, &ood_env.targets) {
        (Targets::Classes(ci), Targets::Classes(co)) => {
            let k = ci.iter().chain(co).max().copied().unwrap_or(0) + 1;
            let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, &y) in ci.iter().enumerate() {
                by_label[y].push(i);
            }
            for &o in ood_order.iter().cycle().take(ood_order.len().max(n_pairs)) {
                if pairs.len() == n_pairs {
                    break;
                }
                let cands = &by_label[co[o]];
                if !cands.is_empty() {
                    pairs.push((o, cands[rng.random_range(0..cands.len())]));
                }
            }
        }
        (Targets::Values(vi), Targets::Values(vo)) => {
            let mut sorted: Vec<usize> = (0..vi.len()).collect();
            sorted.sort_by(|&a, &b| vi[a].total_cmp(&vi[b]).then(a.cmp(&b)));
            let keys: Vec<f64> = sorted.iter().map(|&i| vi[i]).collect();
            for &o in ood_order.iter().cycle().take(ood_order.len().max(n_pairs)) {
                if pairs.len() == n_pairs {
                    break;
                }
                let lo = keys.partition_point(|&v| v < vo[o] - delta);
                let hi = keys.partition_point(|&v| v <= vo[o] + delta);
                if hi > lo {
                    pairs.push((o, sorted[rng.random_range(lo..hi)]));
                }
            }
        }
        _ => return Err(DreError::input("environments disagree on the task kind")),
    }
    if pairs.is_empty() {
        return Err(DreError::EmptyPairs("no OOD sample has a matching in-distribution partner".into()));
    }
    let tau: Vec<f64> = pairs.iter().map(|_| sample_tau(mix.alpha, rng)).collect::<Result<_>>()?;
    let oi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ii: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let xo = ood_env.samples.select_rows(&oi)?;
    let xi = id_env.samples.select_rows(&ii)?;
    let xm = mix_rows(&xo, &xi, &tau)?;
    let labels: Option<Vec<usize>> = class_targets(&ood_env.targets).map(|c| oi.iter().map(|&i| c[i]).collect());
    let opts = AttributionOptions { kind: explainer, detach_cam_weights: false };
    let go = explain_batch(model, &xo, labels.as_deref(), opts)?.0;
    let gi = explain_batch(model, &xi, labels.as_deref(), opts)?.0;
    let gm = explain_batch(model, &xm, labels.as_deref(), opts)?.0;
    let mixed = mix_rows(&go, &gi, &tau)?;
    let row = gm.len() / pairs.len();
    let mut total = 0.0;
    for p in 0..pairs.len() {
        let a = Tensor::vector(gm.data()[p * row..(p + 1) * row].to_vec());
        let b = Tensor::vector(mixed.data()[p * row..(p + 1) * row].to_vec());
        total += consistency_discrepancy(&a, &b, mix.discrepancy)?;
    }
    Ok(total / pairs.len() as f64)
}

/// `raw / mean(baseline)` for every entry.
pub fn normalize_dec(raws: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    if baseline.is_empty() {
        return Err(DreError::Degenerate("empty DEC baseline".into()));
    }
    let m = baseline.iter().sum::<f64>() / baseline.len() as f64;
    if !(m > 0.0) {
        return Err(DreError::Degenerate(format!("DEC baseline mean is {m}, must be > 0")));
    }
    Ok(raws.iter().map(|r| r / m).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InsertionCurve {
    pub fractions: Vec<f64>,
    pub scores: Vec<f64>,
}

impl InsertionCurve {
    pub fn area(&self) -> f64 {
        self.fractions
            .windows(2)
            .zip(self.scores.windows(2))
            .map(|(f, s)| (f[1] - f[0]) * (s[0] + s[1]) / 2.0)
            .sum()
    }
}

/// Insertion steps used by default: `min(features, 50)`.
pub fn default_steps(features: usize) -> usize {
    features.clamp(2, 50)
}

/// Groups of flat input indices inserted together, one per attribution
/// entry. A spatial `[h, w]` map over a `[c, h, w]` input inserts all
/// channels of a pixel at once.
fn insertion_units(x_shape: &[usize], attr_len: usize) -> Result<Vec<Vec<usize>>> {
    let n: usize = x_shape.iter().product();
    if attr_len == n {
        return Ok((0..n).map(|i| vec![i]).collect());
    }
    if x_shape.len() == 3 && attr_len == x_shape[1] * x_shape[2] {
        let hw = attr_len;
        return Ok((0..hw).map(|p| (0..x_shape[0]).map(|c| c * hw + p).collect()).collect());
    }
    Err(DreError::input(format!("attribution with {attr_len} entries does not fit input shape {x_shape:?}")))
}

/// Builds the canvases for fractions `k / n_steps`, `k = 0..=n_steps`.
fn insertion_canvases(x: &Tensor, attribution: &Tensor, reference: &Tensor, n_steps: usize) -> Result<(Vec<f64>, Tensor)> {
    if x.shape() != reference.shape() {
        return Err(DreError::input(format!("reference shape {:?} differs from input {:?}", reference.shape(), x.shape())));
    }
    if n_steps < 2 {
        return Err(DreError::input("iauc needs n_steps >= 2"));
    }
    let units = insertion_units(x.shape(), attribution.len())?;
    let order = rank_features(attribution.data());
    let f = units.len();
    let mut canvas = reference.data().to_vec();
    let mut data = Vec::with_capacity((n_steps + 1) * x.len());
    let mut fractions = Vec::with_capacity(n_steps + 1);
    let mut inserted = 0;
    for k in 0..=n_steps {
        let upto = ((k * f) as f64 / n_steps as f64).round() as usize;
        for &u in &order[inserted..upto] {
            for &i in &units[u] {
                canvas[i] = x.data()[i];
            }
        }
        inserted = upto;
        fractions.push(k as f64 / n_steps as f64);
        data.extend_from_slice(&canvas);
    }
    let mut shape = vec![n_steps + 1];
    shape.extend(x.shape());
    Ok((fractions, Tensor::new(&shape, data)?))
}

/// Insertion AUC of one sample. Returns `None` (sample skipped) when the
/// full-input target logit is at most [`MIN_TARGET_LOGIT`]. For classifiers
/// the target logit is measured relative to the mean logit of its row.
pub fn iauc(model: &Model, x: &Tensor, target: usize, attribution: &Tensor, reference: &Tensor, n_steps: usize) -> Result<Option<(f64, InsertionCurve)>> {
    if target >= model.spec.output_dim {
        return Err(DreError::input(format!("target {target} out of range")));
    }
    let (fractions, canvases) = insertion_canvases(x, attribution, reference, n_steps)?;
    let out = model.forward(&canvases)?;
    let k = model.spec.output_dim;
    // Classifier logits are centred per row first: softmax ignores a shared
    // offset, so the raw target logit alone carries an arbitrary sign.
    let logits: Vec<f64> = out
        .data()
        .chunks(k)
        .map(|row| if k > 1 { row[target] - row.iter().sum::<f64>() / k as f64 } else { row[target] })
        .collect();
    let full = logits[n_steps];
    if !(full > MIN_TARGET_LOGIT) {
        return Ok(None);
    }
    let scores: Vec<f64> = logits.iter().map(|l| l / full).collect();
    let curve = InsertionCurve { fractions, scores };
    Ok(Some((curve.area(), curve)))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reference {
    /// Gaussian blur, sigma 2, 5x5 kernel, per channel.
    Blur,
    /// The given per-feature values (training-split means).
    FeatureMean(Vec<f64>),
}

pub const BLUR_SIGMA: f64 = 2.0;
pub const BLUR_RADIUS: usize = 2;

fn blur_kernel() -> Vec<f64> {
    let r = BLUR_RADIUS as i64;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Symmetric (half-sample) reflection: `-1 -> 0`, `n -> n - 1`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable blur over the two trailing axes of `[c, h, w]`.
pub fn gaussian_blur(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(DreError::input(format!("blur expects [c, h, w], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let k = blur_kernel();
    let r = BLUR_RADIUS as i64;
    let src = x.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w {
                tmp[base + i * w + j] = (-r..=r)
                    .map(|d| k[(d + r) as usize] * src[base + i * w + reflect(j as i64 + d, w)])
                    .sum();
            }
        }
        for i in 0..h {
            for j in 0..w {
                out[base + i * w + j] = (-r..=r)
                    .map(|d| k[(d + r) as usize] * tmp[base + reflect(i as i64 + d, h) * w + j])
                    .sum();
            }
        }
    }
    Ok(Tensor::new(s, out)?)
}

/// Insertion reference canvas for `x`.
pub fn make_reference(x: &Tensor, kind: &Reference) -> Result<Tensor> {
    match kind {
        Reference::Blur => gaussian_blur(x),
        Reference::FeatureMean(m) => {
            if m.len() != x.len() {
                return Err(DreError::input(format!("{} feature means for an input of {} values", m.len(), x.len())));
            }
            Ok(Tensor::new(x.shape(), m.clone())?)
        }
    }
}

/// Column means of an environment's samples.
pub fn feature_means(env: &EnvironmentDataset) -> Vec<f64> {
    let n = env.len();
    let d = env.samples.len() / n;
    let mut m = vec![0.0; d];
    for row in env.samples.data().chunks(d) {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DreError::input("cosine similarity of vectors with different lengths"));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(DreError::Degenerate("cosine similarity with an all-zero vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Mean `|attribution|` per feature over an environment.
pub fn mean_importance(model: &Model, env: &EnvironmentDataset, explainer: ExplainerKind) -> Result<Vec<f64>> {
    let opts = AttributionOptions { kind: explainer, detach_cam_weights: false };
    let n = env.len();
    let mut acc: Vec<f64> = Vec::new();
    for s in (0..n).step_by(CHUNK) {
        let x = env.samples.rows(s, (s + CHUNK).min(n))?;
        let (g, _) = explain_batch(model, &x, None, opts)?;
        let f = g.len() / x.shape()[0];
        if acc.is_empty() {
            acc = vec![0.0; f];
        }
        for row in g.data().chunks(f) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.abs();
            }
        }
    }
    acc.iter_mut().for_each(|v| *v /= n as f64);
    Ok(acc)
}

/// Cosine similarity between mean `|attribution|` and `true_importance`.
/// Spatial maps are compared against the per-pixel maximum over channels.
pub fn scientific_consistency(model: &Model, env: &EnvironmentDataset, explainer: ExplainerKind, true_importance: &[f64]) -> Result<f64> {
    if true_importance.iter().all(|&v| v == 0.0) {
        return Err(DreError::Degenerate("true_importance is all zero".into()));
    }
    let imp = mean_importance(model, env, explainer)?;
    let truth: Vec<f64> = if imp.len() == true_importance.len() {
        true_importance.to_vec()
    } else {
        let fs = env.feature_shape();
        if fs.len() != 3 || fs[1] * fs[2] != imp.len() {
            return Err(DreError::input("attribution size does not match true_importance"));
        }
        let hw = imp.len();
        (0..hw).map(|p| (0..fs[0]).map(|c| true_importance[c * hw + p]).fold(0.0, f64::max)).collect()
    };
    cosine_similarity(&imp, &truth).map_err(|e| match e {
        DreError::Degenerate(_) => DreError::Degenerate("attribution importance is all zero".into()),
        e => e,
    })
}

/// Aggregate insertion results over an environment.
#[derive(Clone, Debug, PartialEq)]
pub struct IaucSummary {
    pub mean: f64,
    /// Robust to samples whose small full-input logit inflates the ratio.
    pub median: f64,
    pub scored: usize,
    pub skipped: usize,
    /// Pointwise mean curve over scored samples.
    pub curve: InsertionCurve,
}

/// Mean and median iAUC over the first `max_samples` samples of `env`, explaining and
/// scoring the ground-truth class (the prediction for regressors).
pub fn iauc_env(model: &Model, env: &EnvironmentDataset, reference: &Reference, explainer: ExplainerKind, max_samples: usize) -> Result<IaucSummary> {
    let n = env.len().min(max_samples);
    if n == 0 {
        return Err(DreError::input("iauc_env needs at least one sample"));
    }
    let x = env.samples.rows(0, n)?;
    let labels: Option<Vec<usize>> = class_targets(&env.targets).map(|c| c[..n].to_vec());
    let opts = AttributionOptions { kind: explainer, detach_cam_weights: false };
    let (attr, targets) = explain_batch(model, &x, labels.as_deref(), opts)?;
    let f = attr.len() / n;
    let d = x.len() / n;
    let steps = default_steps(f);
    let mut areas = Vec::new();
    let mut curve_acc = vec![0.0; steps + 1];
    let mut fractions = Vec::new();
    for i in 0..n {
        let xi = Tensor::new(env.feature_shape(), x.data()[i * d..(i + 1) * d].to_vec())?;
        let ai = Tensor::vector(attr.data()[i * f..(i + 1) * f].to_vec());
        let r = make_reference(&xi, reference)?;
        if let Some((a, c)) = iauc(model, &xi, targets[i], &ai, &r, steps)? {
            areas.push(a);
            for (acc, s) in curve_acc.iter_mut().zip(&c.scores) {
                *acc += s;
            }
            fractions = c.fractions;
        }
    }
    let scored = areas.len();
    if scored == 0 {
        return Ok(IaucSummary {
            mean: f64::NAN,
            median: f64::NAN,
            scored,
            skipped: n,
            curve: InsertionCurve { fractions: (0..=steps).map(|k| k as f64 / steps as f64).collect(), scores: vec![f64::NAN; steps + 1] },
        });
    }
    curve_acc.iter_mut().for_each(|v| *v /= scored as f64);
    let mean = areas.iter().sum::<f64>() / scored as f64;
    areas.sort_by(f64::total_cmp);
    let median = if scored % 2 == 1 { areas[scored / 2] } else { (areas[scored / 2 - 1] + areas[scored / 2]) / 2.0 };
    Ok(IaucSummary { mean, median, scored, skipped: n - scored, curve: InsertionCurve { fractions, scores: curve_acc } })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub dec_pairs: usize,
    pub iauc_samples: usize,
    /// `None` picks [`default_explainer`].
    pub explainer: Option<ExplainerKind>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { dec_pairs: 500, iauc_samples: 200, explainer: None }
    }
}

/// One evaluated model. `accuracy` holds accuracy for classifiers and the
/// mean absolute residual for regressors (see `task`).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub test_env: String,
    pub seed: u64,
    pub task: TaskKind,
    pub dec_raw: f64,
    pub dec_relative: Option<f64>,
    pub iauc: f64,
    pub iauc_id: f64,
    pub iauc_skipped: usize,
    pub iauc_id_skipped: usize,
    pub sc: f64,
    pub task_metric: f64,
    pub task_metric_id: f64,
    pub n_test: usize,
    pub n_id: usize,
}

impl MetricReport {
    pub fn task_metric_name(&self) -> &'static str {
        match self.task {
            TaskKind::Classification { .. } => "accuracy",
            TaskKind::Regression => "mae_residual",
        }
    }
}

pub const REPORT_COLUMNS: [&str; 15] = [
    "method",
    "test_env",
    "seed",
    "task_metric",
    "dec_raw",
    "dec_relative",
    "iauc",
    "iauc_id",
    "iauc_skipped",
    "iauc_id_skipped",
    "sc",
    "value",
    "value_id",
    "n_test",
    "n_id",
];

pub fn write_reports<W: Write>(reports: &[MetricReport], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(REPORT_COLUMNS)?;
    for r in reports {
        wr.write_record([
            r.method.clone(),
            r.test_env.clone(),
            r.seed.to_string(),
            r.task_metric_name().to_string(),
            fmt_f64(r.dec_raw),
            r.dec_relative.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.iauc),
            fmt_f64(r.iauc_id),
            r.iauc_skipped.to_string(),
            r.iauc_id_skipped.to_string(),
            fmt_f64(r.sc),
            fmt_f64(r.task_metric),
            fmt_f64(r.task_metric_id),
            r.n_test.to_string(),
            r.n_id.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_curve<W: Write>(curve: &InsertionCurve, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["fraction", "score"])?;
    for (f, s) in curve.fractions.iter().zip(&curve.scores) {
        wr.write_record([fmt_f64(*f), fmt_f64(*s)])?;
    }
    wr.flush()?;
    Ok(())
}

/// Everything `evaluate` computes besides the report row.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub curve_test: InsertionCurve,
    pub curve_id: InsertionCurve,
}

/// Scores a model on the held-out environment and on in-distribution
/// validation data. `train_pool` supplies the tabular insertion reference.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<R: Rng + ?Sized>(
    model: &Model,
    id_env: &EnvironmentDataset,
    test_env: &EnvironmentDataset,
    train_pool: &EnvironmentDataset,
    true_importance: &[f64],
    task: TaskKind,
    mix: &MixConfig,
    opts: &MetricOptions,
    rng: &mut R,
) -> Result<Evaluation> {
    let explainer = opts.explainer.unwrap_or_else(|| default_explainer(model));
    let delta = crate::trainer::pairing_delta(mix, std::slice::from_ref(train_pool));
    let dec_raw = dec_metric(model, id_env, test_env, opts.dec_pairs, mix, delta, explainer, rng)?;
    let reference = match model.spec.kind {
        ModelKind::Cnn => Reference::Blur,
        ModelKind::Mlp => Reference::FeatureMean(feature_means(train_pool)),
    };
    let it = iauc_env(model, test_env, &reference, explainer, opts.iauc_samples)?;
    let ii = iauc_env(model, id_env, &reference, explainer, opts.iauc_samples)?;
    // A model whose attributions vanish (e.g. a constant one) has no
    // defined importance direction; report NaN rather than failing the run.
    let sc = match scientific_consistency(model, test_env, explainer, true_importance) {
        Err(DreError::Degenerate(_)) => f64::NAN,
        r => r?,
    };
    let report = MetricReport {
        method: String::new(),
        test_env: test_env.env_id.clone(),
        seed: 0,
        task,
        dec_raw,
        dec_relative: None,
        iauc: it.median,
        iauc_id: ii.median,
        iauc_skipped: it.skipped,
        iauc_id_skipped: ii.skipped,
        sc,
        task_metric: task_metric(model, test_env)?,
        task_metric_id: task_metric(model, id_env)?,
        n_test: test_env.len(),
        n_id: id_env.len(),
    };
    Ok(Evaluation { report, curve_test: it.curve, curve_id: ii.curve })
}
