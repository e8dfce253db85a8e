//! Run configuration and report generation.
//!
//! A run is described by one TOML file:
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]        # training seeds, one cell per seed
//! data_seed = 0                  # generator seed
//! methods = ["erm", "mixup", "dre"]
//! protocol = "leave_one_out"     # or "fixed": train on train*, test on `test`
//! attribution_samples = 2        # attribution dumps per evaluated cell
//!
//! [generator]                    # required; see `GeneratorConfig`
//! kind = "tabular_cls"
//!
//! [model]                        # optional
//! hidden = [32, 32]              # MLP widths, or the two CNN channel counts
//! activation = "relu"
//!
//! [train]                        # optional; see `HyperParams`
//! steps = 5000
//! [train.mix]
//! lambda = 1.0
//!
//! [metrics]                      # optional; see `MetricOptions`
//! dec_pairs = 500
//!
//! [[variants]]                   # optional extra arms, e.g. ablations
//! name = "dre_no_sparsity"
//! gamma = 0.0
//! ```
//!
//! Every artifact of a cell is named `<artifact>_<method>_<test_env>_seed<seed>`,
//! e.g. `history_dre_test_seed0.csv`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envdata::{generate, DatasetBundle, EnvironmentDataset, GeneratorConfig, GeneratorKind, Targets};
use crate::error::{DreError, Result};
use crate::explain::{explain_batch, AttributionOptions, ExplainerKind};
use crate::metrics::{default_explainer, evaluate, normalize_dec, write_curve, write_reports, Evaluation, MetricOptions, MetricReport};
use crate::model::{Activation, Model, ModelKind, ModelSpec};
use crate::trainer::{fmt_f64, pool, split_envs, train, HyperParams, Method, TrainingHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Each environment is held out once; the rest are trained on.
    #[default]
    LeaveOneOut,
    /// Train on the bundle's training environments, test on its test env.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Defaults to a CNN for image bundles and an MLP otherwise.
    pub kind: Option<ModelKind>,
    /// MLP hidden widths or CNN channel counts.
    pub hidden: Option<Vec<usize>>,
    pub activation: Activation,
}

/// A named training arm: one of `methods`, or a variant with loss weights
/// overridden.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default = "default_variant_method")]
    pub method: Method,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
}

fn default_variant_method() -> Method {
    Method::Dre
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_methods() -> Vec<Method> {
    vec![Method::Erm, Method::Mixup, Method::Dre]
}

fn default_attribution_samples() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default = "default_attribution_samples")]
    pub attribution_samples: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: HyperParams,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default)]
    pub variants: Vec<Variant>,
}

/// A method with its fully resolved hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub hyper: HyperParams,
}

impl RunConfig {
    pub fn new(generator: GeneratorConfig) -> Self {
        Self {
            seeds: default_seeds(),
            data_seed: 0,
            methods: default_methods(),
            protocol: Protocol::default(),
            attribution_samples: default_attribution_samples(),
            output_dir: None,
            generator,
            model: ModelConfig::default(),
            train: HyperParams::default(),
            metrics: MetricOptions::default(),
            variants: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| DreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DreError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            DreError::Config(m) => DreError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DreError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(DreError::Config("seed list must be nonempty".into()));
        }
        if let Some(d) = &self.output_dir {
            if d.as_os_str().is_empty() {
                return Err(DreError::Config("output_dir must not be empty".into()));
            }
        }
        self.generator.validate()?;
        self.train.validate()?;
        let arms = self.arms();
        if arms.is_empty() {
            return Err(DreError::Config("no methods or variants to run".into()));
        }
        for (i, a) in arms.iter().enumerate() {
            if a.name.is_empty() || !a.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(DreError::Config(format!("arm name `{}` must be nonempty [A-Za-z0-9_-]", a.name)));
            }
            if arms[..i].iter().any(|b| b.name == a.name) {
                return Err(DreError::Config(format!("duplicate arm name `{}`", a.name)));
            }
            a.hyper.validate()?;
        }
        Ok(())
    }

    /// Methods first, then variants, in configuration order.
    pub fn arms(&self) -> Vec<Arm> {
        let mut out: Vec<Arm> = self
            .methods
            .iter()
            .map(|&m| Arm { name: m.name().to_string(), hyper: HyperParams { method: m, ..self.train.clone() } })
            .collect();
        for v in &self.variants {
            let mut hyper = HyperParams { method: v.method, ..self.train.clone() };
            if let Some(l) = v.lambda {
                hyper.mix.lambda = l;
            }
            if let Some(g) = v.gamma {
                hyper.mix.gamma = g;
            }
            out.push(Arm { name: v.name.clone(), hyper });
        }
        out
    }

    /// The arm a single `train`/`eval` invocation uses.
    pub fn arm(&self, method: Option<&str>) -> Result<Arm> {
        match method {
            None => Ok(Arm { name: self.train.method.name().to_string(), hyper: self.train.clone() }),
            Some(name) => {
                if let Some(a) = self.arms().into_iter().find(|a| a.name == name) {
                    return Ok(a);
                }
                let m: Method = name.parse()?;
                Ok(Arm { name: name.to_string(), hyper: HyperParams { method: m, ..self.train.clone() } })
            }
        }
    }

    pub fn model_spec(&self, bundle: &DatasetBundle) -> Result<ModelSpec> {
        let images = bundle.feature_shape.len() == 3;
        let kind = self.model.kind.unwrap_or(if images { ModelKind::Cnn } else { ModelKind::Mlp });
        let k = bundle.task.output_dim();
        let act = self.model.activation;
        let spec = match kind {
            ModelKind::Mlp => {
                let hidden = self.model.hidden.clone().unwrap_or_else(|| vec![32, 32]);
                ModelSpec::mlp(bundle.feature_count(), &hidden, k, act)
            }
            ModelKind::Cnn => {
                let s = &bundle.feature_shape;
                if !images {
                    return Err(DreError::Config(format!("a cnn needs [c, h, w] features, bundle has {s:?}")));
                }
                let ch = self.model.hidden.clone().unwrap_or_else(|| vec![8, 8]);
                if ch.len() != 2 {
                    return Err(DreError::Config("a cnn takes exactly two channel counts in `hidden`".into()));
                }
                ModelSpec::cnn([s[0], s[1], s[2]], [ch[0], ch[1]], k, act)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn generator_name(kind: GeneratorKind) -> &'static str {
    match kind {
        GeneratorKind::TabularCls => "tabular_cls",
        GeneratorKind::TinyImageCls => "tiny_image_cls",
        GeneratorKind::TabularReg => "tabular_reg",
    }
}

/// Names the artifacts of one (method, test environment, seed) cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub method: String,
    pub test_env: String,
    pub seed: u64,
}

impl Cell {
    pub fn file(&self, kind: &str, suffix: &str) -> String {
        format!("{kind}_{}_{}_seed{}{suffix}", self.method, self.test_env, self.seed)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DreError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Generates the configured bundle, writes it to `out` and returns its
/// content hash.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let bundle = generate(&cfg.generator, cfg.data_seed)?;
    let bytes = bundle.to_bytes();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, &bytes)?;
    Ok(content_hash(&bytes))
}

pub struct TrainOutput {
    pub model: Model,
    pub history: TrainingHistory,
    pub checkpoint: PathBuf,
    pub history_csv: PathBuf,
}

/// Trains one arm on `bundle` and writes its checkpoint and history CSV
/// into `out_dir`.
pub fn cmd_train(bundle: &DatasetBundle, cfg: &RunConfig, arm: &Arm, seed: u64, out_dir: &Path) -> Result<TrainOutput> {
    create_dir(out_dir)?;
    let spec = cfg.model_spec(bundle)?;
    let hyper = HyperParams { seed, ..arm.hyper.clone() };
    let (model, history) = train(bundle, &spec, &hyper)?;
    let cell = Cell { method: arm.name.clone(), test_env: bundle.test_env.env_id.clone(), seed };
    let checkpoint = out_dir.join(cell.file("checkpoint", ".params"));
    model.save(&checkpoint)?;
    let history_csv = out_dir.join(cell.file("history", ".csv"));
    let mut buf = Vec::new();
    history.write_csv(&mut buf)?;
    write_file(&history_csv, &buf)?;
    Ok(TrainOutput { model, history, checkpoint, history_csv })
}

fn check_compatible(model: &Model, bundle: &DatasetBundle) -> Result<()> {
    if model.spec.input_shape != bundle.feature_shape || model.spec.output_dim != bundle.task.output_dim() {
        return Err(DreError::input(format!(
            "checkpoint (input {:?}, output {}) is incompatible with the bundle (features {:?}, output {})",
            model.spec.input_shape,
            model.spec.output_dim,
            bundle.feature_shape,
            bundle.task.output_dim()
        )));
    }
    Ok(())
}

/// Seed of the evaluation RNG. It ignores the method so that every method
/// of a cell is scored on the same DEC pairs.
fn eval_rng(seed: u64, test_env: &str) -> ChaCha8Rng {
    let h = Sha256::digest(format!("eval/{test_env}/{seed}").as_bytes());
    let mut s = [0u8; 32];
    s.copy_from_slice(&h);
    ChaCha8Rng::from_seed(s)
}

/// Evaluates a trained model: writes the one-row metrics CSV, both
/// insertion curves and attribution dumps of the first test samples.
pub fn cmd_eval(model: &Model, bundle: &DatasetBundle, cfg: &RunConfig, method: &str, seed: u64, out_dir: &Path) -> Result<Evaluation> {
    check_compatible(model, bundle)?;
    create_dir(out_dir)?;
    let (train_parts, val_parts) = split_envs(bundle, cfg.train.train_fraction, seed)?;
    let id_env = pool(&val_parts, "id")?;
    let train_pool = pool(&train_parts, "train")?;
    let mut rng = eval_rng(seed, &bundle.test_env.env_id);
    let mut ev = evaluate(
        model,
        &id_env,
        &bundle.test_env,
        &train_pool,
        &bundle.true_importance,
        bundle.task,
        &cfg.train.mix,
        &cfg.metrics,
        &mut rng,
    )?;
    ev.report.method = method.to_string();
    ev.report.seed = seed;
    let cell = Cell { method: method.to_string(), test_env: bundle.test_env.env_id.clone(), seed };
    let mut buf = Vec::new();
    write_reports(std::slice::from_ref(&ev.report), &mut buf)?;
    write_file(&out_dir.join(cell.file("metrics", ".csv")), &buf)?;
    for (name, curve) in [("test", &ev.curve_test), ("id", &ev.curve_id)] {
        let mut buf = Vec::new();
        write_curve(curve, &mut buf)?;
        write_file(&out_dir.join(cell.file("curve", &format!("_{name}.csv"))), &buf)?;
    }
    let explainer = cfg.metrics.explainer.unwrap_or_else(|| default_explainer(model));
    let n = cfg.attribution_samples.min(bundle.test_env.len());
    for i in 0..n {
        let stem = out_dir.join(cell.file("attr", &format!("_{i}")));
        dump_attribution(model, &bundle.test_env, i, explainer, &stem)?;
    }
    Ok(ev)
}

/// Explains sample `index` of `env` for its ground-truth class and writes
/// `<stem>.csv` (raw values) plus `<stem>.pgm` for spatial attributions.
pub fn dump_attribution(model: &Model, env: &EnvironmentDataset, index: usize, explainer: ExplainerKind, stem: &Path) -> Result<Vec<PathBuf>> {
    if index >= env.len() {
        return Err(DreError::input(format!("sample {index} out of range for `{}` ({} samples)", env.env_id, env.len())));
    }
    let x = env.samples.rows(index, index + 1)?;
    let target = match &env.targets {
        Targets::Classes(c) => Some(vec![c[index]]),
        Targets::Values(_) => None,
    };
    let opts = AttributionOptions { kind: explainer, detach_cam_weights: false };
    let (attr, _) = explain_batch(model, &x, target.as_deref(), opts)?;
    let shape = attr.shape()[1..].to_vec();
    let mut out = Vec::new();
    let csv_path = stem.with_extension("csv");
    let values = attr.data();
    let mut wr = csv::Writer::from_writer(Vec::new());
    if shape.len() == 1 {
        wr.write_record(["feature", "value"])?;
        for (i, v) in values.iter().enumerate() {
            wr.write_record([i.to_string(), fmt_f64(*v)])?;
        }
    } else {
        // Rows of the map; a [c, h, w] attribution stacks channels vertically.
        let w = *shape.last().unwrap_or(&1);
        for row in values.chunks(w) {
            wr.write_record(row.iter().map(|v| fmt_f64(*v)))?;
        }
    }
    let bytes = wr.into_inner().map_err(|e| DreError::Io(e.into_error()))?;
    write_file(&csv_path, &bytes)?;
    out.push(csv_path);
    if shape.len() >= 2 {
        let w = shape[shape.len() - 1];
        let h = values.len() / w;
        let pgm_path = stem.with_extension("pgm");
        write_file(&pgm_path, &pgm_bytes(values, w, h))?;
        out.push(pgm_path);
    }
    Ok(out)
}

/// Binary 8-bit PGM, min-max scaled; a constant image maps to 0.
pub fn pgm_bytes(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 }));
    out
}

/// `cmd_explain`: attribution of one sample of the named environment.
pub fn cmd_explain(model: &Model, bundle: &DatasetBundle, env_id: &str, index: usize, explainer: Option<ExplainerKind>, stem: &Path) -> Result<Vec<PathBuf>> {
    check_compatible(model, bundle)?;
    let env = bundle
        .envs()
        .find(|e| e.env_id == env_id)
        .ok_or_else(|| DreError::input(format!("bundle has no environment `{env_id}`")))?;
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    dump_attribution(model, env, index, explainer.unwrap_or_else(|| default_explainer(model)), stem)
}

/// Summary statistic columns, in table order.
pub const SUMMARY_METRICS: [&str; 6] = ["dec_relative", "iauc", "iauc_id", "value", "value_id", "sc"];

fn metric_of(r: &MetricReport, name: &str) -> f64 {
    match name {
        "dec_relative" => r.dec_relative.unwrap_or(f64::NAN),
        "dec_raw" => r.dec_raw,
        "iauc" => r.iauc,
        "iauc_id" => r.iauc_id,
        "value" => r.task_metric,
        "value_id" => r.task_metric_id,
        "sc" => r.sc,
        _ => f64::NAN,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean over seeds per (arm, metric, test env), plus an `avg` over envs.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub arms: Vec<String>,
    pub envs: Vec<String>,
    /// `values[arm][metric][env]`; the last env column is the average.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl Summary {
    pub fn from_reports(reports: &[MetricReport], arms: &[String], envs: &[String]) -> Self {
        let values = arms
            .iter()
            .map(|a| {
                SUMMARY_METRICS
                    .iter()
                    .map(|m| {
                        let mut per_env: Vec<f64> = envs
                            .iter()
                            .map(|e| {
                                let v: Vec<f64> = reports.iter().filter(|r| &r.method == a && &r.test_env == e).map(|r| metric_of(r, m)).collect();
                                if v.is_empty() {
                                    f64::NAN
                                } else {
                                    mean(&v)
                                }
                            })
                            .collect();
                        per_env.push(mean(&per_env));
                        per_env
                    })
                    .collect()
            })
            .collect();
        Self { arms: arms.to_vec(), envs: envs.to_vec(), values }
    }

    pub fn get(&self, arm: &str, metric: &str, env: Option<&str>) -> Option<f64> {
        let a = self.arms.iter().position(|x| x == arm)?;
        let m = SUMMARY_METRICS.iter().position(|x| *x == metric)?;
        let e = match env {
            None => self.envs.len(),
            Some(e) => self.envs.iter().position(|x| x == e)?,
        };
        Some(self.values[a][m][e])
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut wr = csv::Writer::from_writer(Vec::new());
        wr.write_record(["method", "metric", "test_env", "value"])?;
        for (a, arm) in self.arms.iter().enumerate() {
            for (m, metric) in SUMMARY_METRICS.iter().enumerate() {
                for (e, env) in self.envs.iter().map(String::as_str).chain(["avg"]).enumerate() {
                    wr.write_record([arm.as_str(), metric, env, &fmt_f64(self.values[a][m][e])])?;
                }
            }
        }
        wr.into_inner().map_err(|e| DreError::Io(e.into_error()))
    }

    /// Plain-text tables, one block per statistic.
    pub fn to_text(&self, value_name: &str) -> String {
        let titles = [
            "DEC loss relative to ERM (lower is better)".to_string(),
            "iAUC on the test environment (higher is better)".to_string(),
            "iAUC on in-distribution validation data".to_string(),
            format!("{value_name} on the test environment"),
            format!("{value_name} on in-distribution validation data"),
            "Scientific consistency on the test environment".to_string(),
        ];
        let width = self.arms.iter().map(String::len).max().unwrap_or(6).max(6);
        let mut s = String::new();
        for (m, title) in titles.iter().enumerate() {
            s.push_str(title);
            s.push('\n');
            s.push_str(&format!("{:<width$}", "method"));
            for e in self.envs.iter().map(String::as_str).chain(["Avg"]) {
                s.push_str(&format!(" {e:>9}"));
            }
            s.push('\n');
            for (a, arm) in self.arms.iter().enumerate() {
                s.push_str(&format!("{arm:<width$}"));
                for v in &self.values[a][m] {
                    s.push_str(&format!(" {v:>9.4}"));
                }
                s.push('\n');
            }
            s.push('\n');
        }
        s
    }
}

pub struct BenchmarkOutput {
    pub reports: Vec<MetricReport>,
    pub summary: Summary,
}

/// Trains and evaluates every (test env, arm, seed) cell, normalises DEC
/// against ERM per test environment and writes the report bundle.
///
/// `progress` is called after each finished cell.
pub fn cmd_benchmark(cfg: &RunConfig, out_dir: &Path, mut progress: impl FnMut(&Cell)) -> Result<BenchmarkOutput> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let resolved = cfg.to_toml()?;
    write_file(&out_dir.join("config.toml"), resolved.as_bytes())?;
    let bundle = generate(&cfg.generator, cfg.data_seed)?;
    let rotations = match cfg.protocol {
        Protocol::LeaveOneOut => bundle.leave_one_out(),
        Protocol::Fixed => vec![bundle.clone()],
    };
    let arms = cfg.arms();
    let kind = generator_name(cfg.generator.kind);
    let mut reports = Vec::new();
    for b in &rotations {
        for arm in &arms {
            for &seed in &cfg.seeds {
                let trained = cmd_train(b, cfg, arm, seed, out_dir)?;
                let ev = cmd_eval(&trained.model, b, cfg, &arm.name, seed, out_dir)?;
                progress(&Cell { method: arm.name.clone(), test_env: b.test_env.env_id.clone(), seed });
                reports.push(ev.report);
            }
        }
    }
    let envs: Vec<String> = rotations.iter().map(|b| b.test_env.env_id.clone()).collect();
    if arms.iter().any(|a| a.name == Method::Erm.name()) {
        for e in &envs {
            let baseline: Vec<f64> = reports.iter().filter(|r| r.method == "erm" && &r.test_env == e).map(|r| r.dec_raw).collect();
            let idx: Vec<usize> = (0..reports.len()).filter(|&i| &reports[i].test_env == e).collect();
            let raws: Vec<f64> = idx.iter().map(|&i| reports[i].dec_raw).collect();
            for (i, rel) in idx.into_iter().zip(normalize_dec(&raws, &baseline)?) {
                reports[i].dec_relative = Some(rel);
            }
        }
    }
    let mut buf = Vec::new();
    write_reports(&reports, &mut buf)?;
    write_file(&out_dir.join("metrics.csv"), &buf)?;
    let names: Vec<String> = arms.iter().map(|a| a.name.clone()).collect();
    let summary = Summary::from_reports(&reports, &names, &envs);
    write_file(&out_dir.join("summary.csv"), &summary.to_csv()?)?;
    let value_name = reports.first().map(|r| r.task_metric_name()).unwrap_or("value");
    let mut text = format!("{kind} benchmark, seeds {:?}\n\n", cfg.seeds);
    text.push_str(&summary.to_text(value_name));
    text.push_str("# resolved configuration\n");
    text.push_str(&resolved);
    write_file(&out_dir.join("summary.txt"), text.as_bytes())?;
    Ok(BenchmarkOutput { reports, summary })
}
