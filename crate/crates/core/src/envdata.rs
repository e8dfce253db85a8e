//! Synthetic multi-environment datasets with known feature importance.
//!
//! Every training environment carries a spurious signal whose correlation
//! with the label is `rho_e > 0`; the held-out test environment reverses it.
//! Core features determine the label through a fixed random teacher and are
//! marked in `true_importance`.
//!
//! Tabular feature order is `[core | spurious | noise]`.
//!
//! # Bundle file layout
//!
//! ```text
//! DRE-BUNDLE\n
//! version 1\n
//! task classification <k> | task regression\n
//! feature_shape <d0> [<d1> ...]\n
//! env train <id> <n>\n          (one line per training environment, in order)
//! env test <id> <n>\n
//! end\n
//! true_importance: prod(feature_shape) f64
//! per environment, in header order: n * prod(feature_shape) f64 samples,
//!   then n f64 targets (class ids stored as exact integers)
//! ```
//!
//! All doubles are little-endian.

use std::path::Path;

use dre_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DreError, Result};
use crate::format;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

impl TaskKind {
    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        match self {
            Targets::Classes(c) => c.iter().map(|&v| v as f64).collect(),
            Targets::Values(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentDataset {
    pub env_id: String,
    /// `[n, ...feature_shape]`
    pub samples: Tensor,
    pub targets: Targets,
}

impl EnvironmentDataset {
    pub fn new(env_id: impl Into<String>, samples: Tensor, targets: Targets) -> Result<Self> {
        let env_id = env_id.into();
        if samples.shape().is_empty() || samples.shape()[0] != targets.len() {
            return Err(DreError::input(format!(
                "environment `{env_id}`: {} targets for samples of shape {:?}",
                targets.len(),
                samples.shape()
            )));
        }
        Ok(Self { env_id, samples, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.env_id.clone(), self.samples.select_rows(idx)?, self.targets.select(idx))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub task: TaskKind,
    pub feature_shape: Vec<usize>,
    pub train_envs: Vec<EnvironmentDataset>,
    pub test_env: EnvironmentDataset,
    /// 1 on causal features, 0 elsewhere; flattened over `feature_shape`.
    pub true_importance: Vec<f64>,
}

impl DatasetBundle {
    pub fn validate(&self) -> Result<()> {
        if self.train_envs.len() < 2 {
            return Err(DreError::input("a bundle needs at least two training environments"));
        }
        let d: usize = self.feature_shape.iter().product();
        if self.true_importance.len() != d {
            return Err(DreError::input("true_importance length differs from the feature count"));
        }
        if self.true_importance.iter().any(|&v| !(v >= 0.0)) {
            return Err(DreError::input("true_importance must be non-negative"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for e in self.envs() {
            if e.feature_shape() != self.feature_shape.as_slice() {
                return Err(DreError::input(format!("environment `{}` has feature shape {:?}", e.env_id, e.feature_shape())));
            }
            if !ids.insert(e.env_id.as_str()) {
                return Err(DreError::input(format!("duplicate environment id `{}`", e.env_id)));
            }
            if let (Targets::Classes(c), TaskKind::Classification { classes }) = (&e.targets, self.task) {
                if c.iter().any(|&y| y >= classes) {
                    return Err(DreError::input(format!("environment `{}` has a label >= {classes}", e.env_id)));
                }
            }
            let ok = matches!(
                (&e.targets, self.task),
                (Targets::Classes(_), TaskKind::Classification { .. }) | (Targets::Values(_), TaskKind::Regression)
            );
            if !ok {
                return Err(DreError::input(format!("environment `{}` targets do not match the task", e.env_id)));
            }
        }
        Ok(())
    }

    /// Training environments followed by the test environment.
    pub fn envs(&self) -> impl Iterator<Item = &EnvironmentDataset> {
        self.train_envs.iter().chain(std::iter::once(&self.test_env))
    }

    pub fn feature_count(&self) -> usize {
        self.feature_shape.iter().product()
    }

    /// Every environment held out once, the rest used for training, in
    /// environment order.
    pub fn leave_one_out(&self) -> Vec<DatasetBundle> {
        let all: Vec<&EnvironmentDataset> = self.envs().collect();
        (0..all.len())
            .map(|held| DatasetBundle {
                task: self.task,
                feature_shape: self.feature_shape.clone(),
                train_envs: all.iter().enumerate().filter(|(i, _)| *i != held).map(|(_, e)| (*e).clone()).collect(),
                test_env: all[held].clone(),
                true_importance: self.true_importance.clone(),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::from("DRE-BUNDLE\nversion 1\n");
        head += &match self.task {
            TaskKind::Classification { classes } => format!("task classification {classes}\n"),
            TaskKind::Regression => "task regression\n".to_string(),
        };
        let dims: Vec<String> = self.feature_shape.iter().map(|d| d.to_string()).collect();
        head += &format!("feature_shape {}\n", dims.join(" "));
        for e in &self.train_envs {
            head += &format!("env train {} {}\n", e.env_id, e.len());
        }
        head += &format!("env test {} {}\n", self.test_env.env_id, self.test_env.len());
        head += "end\n";
        let mut out = head.into_bytes();
        format::push_f64s(&mut out, &self.true_importance);
        for e in self.envs() {
            format::push_f64s(&mut out, e.samples.data());
            format::push_f64s(&mut out, &e.targets.as_f64());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = format::parse_header(bytes, "DRE-BUNDLE", 1)?;
        let mut task = None;
        let mut shape = None;
        let mut envs: Vec<(bool, String, usize, usize)> = Vec::new();
        for (line, parts) in &header.lines {
            let line = *line;
            match parts.as_slice() {
                ["task", "classification", k] => {
                    task = Some(TaskKind::Classification { classes: format::parse_usize(line, k)? })
                }
                ["task", "regression"] => task = Some(TaskKind::Regression),
                ["feature_shape", rest @ ..] if !rest.is_empty() => shape = Some(format::parse_usizes(line, rest)?),
                ["env", role @ ("train" | "test"), id, n] => {
                    envs.push((*role == "test", id.to_string(), format::parse_usize(line, n)?, line))
                }
                _ => return Err(format::parse_err(line, format!("unrecognised header line `{}`", parts.join(" ")))),
            }
        }
        let task = task.ok_or_else(|| format::parse_err(0, "header is missing `task`"))?;
        let shape = shape.ok_or_else(|| format::parse_err(0, "header is missing `feature_shape`"))?;
        if shape.contains(&0) {
            return Err(format::parse_err(0, "feature_shape has a zero extent"));
        }
        let d: usize = shape.iter().product();
        let mut offset = header.body_offset;
        let true_importance = format::read_f64s(bytes, &mut offset, d, "true_importance")?;
        let mut train_envs = Vec::new();
        let mut test_env = None;
        for (is_test, id, n, line) in envs {
            if n == 0 {
                return Err(format::parse_err(line, format!("environment `{id}` is empty")));
            }
            let samples = format::read_f64s(bytes, &mut offset, n * d, &format!("samples of `{id}`"))?;
            let raw = format::read_f64s(bytes, &mut offset, n, &format!("targets of `{id}`"))?;
            let targets = match task {
                TaskKind::Classification { .. } => {
                    if raw.iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
                        return Err(format::parse_err(line, format!("environment `{id}` has non-integer class labels")));
                    }
                    Targets::Classes(raw.iter().map(|&v| v as usize).collect())
                }
                TaskKind::Regression => Targets::Values(raw),
            };
            let mut s = vec![n];
            s.extend(&shape);
            let env = EnvironmentDataset::new(id, Tensor::new(&s, samples)?, targets)?;
            if is_test {
                if test_env.replace(env).is_some() {
                    return Err(format::parse_err(line, "more than one test environment"));
                }
            } else {
                train_envs.push(env);
            }
        }
        format::expect_eof(bytes, offset)?;
        let bundle = DatasetBundle {
            task,
            feature_shape: shape,
            train_envs,
            test_env: test_env.ok_or_else(|| format::parse_err(0, "header names no test environment"))?,
            true_importance,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

pub fn save_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    std::fs::write(path, bundle.to_bytes())?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    DatasetBundle::from_bytes(&std::fs::read(path)?)
}

/// Seeded shuffle, then the first `round(fraction * n)` samples form the
/// training part. Both parts must be non-empty.
pub fn split_train_val(env: &EnvironmentDataset, fraction: f64, seed: u64) -> Result<(EnvironmentDataset, EnvironmentDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DreError::input(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n = env.len();
    if n == 0 {
        return Err(DreError::input(format!("environment `{}` is empty", env.env_id)));
    }
    let cut = (fraction * n as f64).round() as usize;
    if cut == 0 || cut == n {
        return Err(DreError::input(format!(
            "splitting {n} samples at {fraction} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((env.subset(&idx[..cut])?, env.subset(&idx[cut..])?))
}

/// Population standard deviation (0 for fewer than two values).
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

// ---------------------------------------------------------------------------
// generation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    TabularCls,
    TinyImageCls,
    TabularReg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    #[serde(default = "defaults::d_core")]
    pub d_core: usize,
    #[serde(default = "defaults::d_spur")]
    pub d_spur: usize,
    #[serde(default = "defaults::d_noise")]
    pub d_noise: usize,
    /// Spurious correlation of each training environment.
    #[serde(default = "defaults::train_rho")]
    pub train_rho: Vec<f64>,
    #[serde(default = "defaults::test_rho")]
    pub test_rho: f64,
    #[serde(default = "defaults::samples_per_env")]
    pub samples_per_env: usize,
    #[serde(default)]
    pub teacher_seed: u64,
    /// Hidden width of the random tanh teacher.
    #[serde(default = "defaults::teacher_hidden")]
    pub teacher_hidden: usize,
    /// Tabular classification keeps samples whose teacher output has
    /// `|t| >= margin` (in units of the teacher's output std), so the
    /// classes are separated by a gap.
    #[serde(default)]
    pub margin: f64,
    /// Teacher-output noise (tabular), target noise (regression) or pixel
    /// noise (images).
    #[serde(default = "defaults::sigma")]
    pub sigma: f64,
    /// Number of shape classes for images.
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::image_size")]
    pub image_size: usize,
}

mod defaults {
    pub fn d_core() -> usize {
        5
    }
    pub fn d_spur() -> usize {
        5
    }
    pub fn d_noise() -> usize {
        10
    }
    pub fn train_rho() -> Vec<f64> {
        vec![0.95, 0.9, 0.8]
    }
    pub fn test_rho() -> f64 {
        -0.9
    }
    pub fn samples_per_env() -> usize {
        2000
    }
    pub fn teacher_hidden() -> usize {
        8
    }
    pub fn sigma() -> f64 {
        0.1
    }
    pub fn classes() -> usize {
        3
    }
    pub fn image_size() -> usize {
        16
    }
}

impl GeneratorConfig {
    pub fn new(kind: GeneratorKind) -> Self {
        Self {
            kind,
            d_core: defaults::d_core(),
            d_spur: defaults::d_spur(),
            d_noise: defaults::d_noise(),
            train_rho: defaults::train_rho(),
            test_rho: defaults::test_rho(),
            samples_per_env: defaults::samples_per_env(),
            teacher_seed: 0,
            teacher_hidden: defaults::teacher_hidden(),
            margin: 0.0,
            sigma: defaults::sigma(),
            classes: defaults::classes(),
            image_size: defaults::image_size(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DreError::input(m));
        if self.d_core == 0 {
            return bad("d_core must be >= 1".into());
        }
        if self.train_rho.len() < 2 {
            return bad("at least two training environments are required".into());
        }
        if let Some(r) = self.train_rho.iter().chain([&self.test_rho]).find(|r| !(-1.0..=1.0).contains(*r)) {
            return bad(format!("correlation {r} outside [-1, 1]"));
        }
        if self.samples_per_env < 2 {
            return bad("samples_per_env must be >= 2".into());
        }
        if !(self.sigma >= 0.0) || !(self.margin >= 0.0) {
            return bad("sigma and margin must be >= 0".into());
        }
        if self.teacher_hidden == 0 {
            return bad("teacher_hidden must be >= 1".into());
        }
        if self.kind == GeneratorKind::TinyImageCls {
            if !(2..=SHAPES).contains(&self.classes) {
                return bad(format!("images support 2..={SHAPES} classes"));
            }
            if self.image_size < 8 {
                return bad("image_size must be >= 8".into());
            }
        }
        Ok(())
    }

    pub fn task(&self) -> TaskKind {
        match self.kind {
            GeneratorKind::TabularCls => TaskKind::Classification { classes: 2 },
            GeneratorKind::TinyImageCls => TaskKind::Classification { classes: self.classes },
            GeneratorKind::TabularReg => TaskKind::Regression,
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Fixed random two-layer network `v . tanh(W c + b) - offset`, scaled to
/// unit output standard deviation and median-centred on the core-feature
/// distribution.
#[derive(Clone, Debug)]
struct Teacher {
    w: Vec<f64>,
    b: Vec<f64>,
    v: Vec<f64>,
    hidden: usize,
    offset: f64,
    scale: f64,
}

impl Teacher {
    fn new(d: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EAC_4E55);
        let w = (0..d * hidden).map(|_| 2.0 * normal(&mut rng) / (d as f64).sqrt()).collect();
        let b = (0..hidden).map(|_| 0.5 * normal(&mut rng)).collect();
        let v = (0..hidden).map(|_| normal(&mut rng) / (hidden as f64).sqrt()).collect();
        let mut t = Teacher { w, b, v, hidden, offset: 0.0, scale: 1.0 };
        let mut outs: Vec<f64> = (0..20_000)
            .map(|_| {
                let c: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                t.raw(&c)
            })
            .collect();
        outs.sort_by(f64::total_cmp);
        t.offset = outs[outs.len() / 2];
        let centred: Vec<f64> = outs.iter().map(|o| o - t.offset).collect();
        t.scale = std_dev(&centred).max(1e-12);
        t
    }

    fn raw(&self, c: &[f64]) -> f64 {
        (0..self.hidden)
            .map(|j| {
                let z: f64 = c.iter().enumerate().map(|(i, ci)| ci * self.w[i * self.hidden + j]).sum::<f64>() + self.b[j];
                self.v[j] * z.tanh()
            })
            .sum()
    }

    fn eval(&self, c: &[f64]) -> f64 {
        (self.raw(c) - self.offset) / self.scale
    }
}

pub const ENV_IDS: [&str; 4] = ["train0", "train1", "train2", "test"];

fn env_id(i: usize, count: usize) -> String {
    if i + 1 == count {
        "test".into()
    } else {
        format!("train{i}")
    }
}

/// Generates a bundle; identical `(config, seed)` give identical bundles.
pub fn generate(config: &GeneratorConfig, seed: u64) -> Result<DatasetBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rhos: Vec<f64> = config.train_rho.iter().copied().chain([config.test_rho]).collect();
    let bundle = match config.kind {
        GeneratorKind::TabularCls | GeneratorKind::TabularReg => tabular(config, &rhos, &mut rng)?,
        GeneratorKind::TinyImageCls => images(config, &rhos, &mut rng)?,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn tabular(cfg: &GeneratorConfig, rhos: &[f64], rng: &mut ChaCha8Rng) -> Result<DatasetBundle> {
    let teacher = Teacher::new(cfg.d_core, cfg.teacher_hidden, cfg.teacher_seed);
    let d = cfg.d_core + cfg.d_spur + cfg.d_noise;
    let reg = cfg.kind == GeneratorKind::TabularReg;
    // Regression targets are standardised with the teacher-plus-noise spread.
    let reg_scale = (1.0 + cfg.sigma * cfg.sigma).sqrt();
    let mut envs = Vec::with_capacity(rhos.len());
    for (e, &rho) in rhos.iter().enumerate() {
        let n = cfg.samples_per_env;
        let mut data = Vec::with_capacity(n * d);
        let mut classes = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        let side = (1.0 - rho * rho).max(0.0).sqrt();
        while classes.len() + values.len() < n {
            let core: Vec<f64> = (0..cfg.d_core).map(|_| normal(rng)).collect();
            let t = teacher.eval(&core) + cfg.sigma * normal(rng);
            // Signal the spurious block tracks: +-1 labels or the standardised target.
            let signal = if reg {
                let y = t / reg_scale;
                values.push(y);
                y
            } else {
                if t.abs() < cfg.margin {
                    continue;
                }
                let y = usize::from(t > 0.0);
                classes.push(y);
                if y == 1 { 1.0 } else { -1.0 }
            };
            data.extend(&core);
            for _ in 0..cfg.d_spur {
                data.push(rho * signal + side * normal(rng));
            }
            for _ in 0..cfg.d_noise {
                data.push(normal(rng));
            }
        }
        let targets = if reg { Targets::Values(values) } else { Targets::Classes(classes) };
        envs.push(EnvironmentDataset::new(env_id(e, rhos.len()), Tensor::new(&[n, d], data)?, targets)?);
    }
    let mut true_importance = vec![0.0; d];
    true_importance[..cfg.d_core].fill(1.0);
    let test_env = envs.pop().expect("test env");
    Ok(DatasetBundle { task: cfg.task(), feature_shape: vec![d], train_envs: envs, test_env, true_importance })
}

const SHAPES: usize = 4;

/// Class shape masks on an `s x s` grid, centred.
pub fn shape_mask(class: usize, s: usize) -> Vec<f64> {
    let c = (s as f64 - 1.0) / 2.0;
    let r = s as f64 * 0.3;
    let mut m = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            let (y, x) = (i as f64 - c, j as f64 - c);
            let on = match class {
                // filled square
                0 => y.abs() <= r * 0.6 && x.abs() <= r * 0.6,
                // plus sign
                1 => (y.abs() <= 1.0 && x.abs() <= r) || (x.abs() <= 1.0 && y.abs() <= r),
                // ring
                2 => {
                    let d = (x * x + y * y).sqrt();
                    d <= r && d >= r - 1.5
                }
                // diagonal cross
                _ => ((y - x).abs() <= 1.0 || (y + x).abs() <= 1.0) && y.abs() <= r && x.abs() <= r,
            };
            if on {
                m[i * s + j] = 1.0;
            }
        }
    }
    m
}

fn images(cfg: &GeneratorConfig, rhos: &[f64], rng: &mut ChaCha8Rng) -> Result<DatasetBundle> {
    let s = cfg.image_size;
    let hw = s * s;
    let masks: Vec<Vec<f64>> = (0..cfg.classes).map(|k| shape_mask(k, s)).collect();
    let mut envs = Vec::with_capacity(rhos.len());
    for (e, &rho) in rhos.iter().enumerate() {
        // Environment-specific texture: a sinusoid with its own frequency and phase.
        let fx = 0.5 + 0.25 * e as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let texture: Vec<f64> = (0..hw)
            .map(|p| ((p / s) as f64 * 0.7 + (p % s) as f64 * fx + phase).sin())
            .collect();
        let n = cfg.samples_per_env;
        let mut data = Vec::with_capacity(n * 2 * hw);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.random_range(0..cfg.classes);
            labels.push(y);
            for p in 0..hw {
                data.push(masks[y][p] + cfg.sigma * normal(rng));
            }
            // Texture polarity follows label parity with probability (1 + rho) / 2.
            let parity = if y % 2 == 0 { 1.0 } else { -1.0 };
            let agree = rng.random::<f64>() < (1.0 + rho) / 2.0;
            let sign = if agree { parity } else { -parity };
            for p in 0..hw {
                data.push(sign * texture[p] + cfg.sigma * normal(rng));
            }
        }
        envs.push(EnvironmentDataset::new(
            env_id(e, rhos.len()),
            Tensor::new(&[n, 2, s, s], data)?,
            Targets::Classes(labels),
        )?);
    }
    let mut true_importance = vec![0.0; 2 * hw];
    for p in 0..hw {
        if masks.iter().any(|m| m[p] > 0.0) {
            true_importance[p] = 1.0;
        }
    }
    let test_env = envs.pop().expect("test env");
    Ok(DatasetBundle { task: cfg.task(), feature_shape: vec![2, s, s], train_envs: envs, test_env, true_importance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: GeneratorKind) -> GeneratorConfig {
        GeneratorConfig { samples_per_env: 50, ..GeneratorConfig::new(kind) }
    }

    #[test]
    fn deterministic_and_round_trips() {
        for kind in [GeneratorKind::TabularCls, GeneratorKind::TabularReg, GeneratorKind::TinyImageCls] {
            let c = small(kind);
            let a = generate(&c, 3).unwrap();
            assert_eq!(a.to_bytes(), generate(&c, 3).unwrap().to_bytes());
            assert_eq!(DatasetBundle::from_bytes(&a.to_bytes()).unwrap(), a);
        }
    }

    #[test]
    fn malformed_files_rejected() {
        let b = generate(&small(GeneratorKind::TabularCls), 0).unwrap().to_bytes();
        let err = DatasetBundle::from_bytes(&b[..b.len() - 5]).unwrap_err();
        assert!(matches!(err, DreError::Parse { .. }), "{err}");
        let text = String::from_utf8_lossy(&b[..60]).replace("version 1", "version 2");
        assert!(matches!(DatasetBundle::from_bytes(text.as_bytes()), Err(DreError::Version { .. })));
        assert!(DatasetBundle::from_bytes(b"NOT-A-BUNDLE\n").is_err());
    }

    #[test]
    fn split_sizes() {
        let env = EnvironmentDataset::new("e", Tensor::new(&[10, 1], (0..10).map(f64::from).collect()).unwrap(), Targets::Values((0..10).map(f64::from).collect())).unwrap();
        let (tr, va) = split_train_val(&env, 0.8, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        let mut all: Vec<f64> = tr.samples.data().iter().chain(va.samples.data()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(f64::from).collect::<Vec<_>>());
        assert!(split_train_val(&env, 1.0, 1).is_err());
    }

    #[test]
    fn leave_one_out_covers_each_env_once() {
        let b = generate(&small(GeneratorKind::TabularCls), 0).unwrap();
        let held: Vec<String> = b.leave_one_out().iter().map(|r| r.test_env.env_id.clone()).collect();
        assert_eq!(held, ENV_IDS.to_vec());
        for r in b.leave_one_out() {
            assert_eq!(r.train_envs.len(), 3);
            assert!(r.train_envs.iter().all(|e| e.env_id != r.test_env.env_id));
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = small(GeneratorKind::TabularCls);
        c.d_core = 0;
        assert!(generate(&c, 0).is_err());
        let mut c = small(GeneratorKind::TabularCls);
        c.train_rho = vec![0.9];
        assert!(generate(&c, 0).is_err());
        let mut c = small(GeneratorKind::TinyImageCls);
        c.classes = 9;
        assert!(generate(&c, 0).is_err());
    }
}
