use dre_core::autograd::Tensor;
use dre_core::envdata::{generate, DatasetBundle, EnvironmentDataset, GeneratorConfig, GeneratorKind, Targets, TaskKind};
use dre_core::metrics::task_metric;
use dre_core::model::{Activation, ModelSpec};
use dre_core::trainer::{pool, train, HyperParams, Method};
use dre_core::DreError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two environments of 2-d points labelled by the sign of `x0`, with a gap
/// of 0.5 on each side of the boundary.
fn separable_bundle(seed: u64) -> DatasetBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = |id: &str, n: usize| {
        let mut x = Vec::with_capacity(2 * n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            let mag = rng.random_range(0.5..2.0);
            x.push(if c == 1 { mag } else { -mag });
            x.push(rng.random_range(-1.0..1.0));
            y.push(c);
        }
        EnvironmentDataset::new(id, Tensor::new(&[n, 2], x).unwrap(), Targets::Classes(y)).unwrap()
    };
    let train_envs = vec![env("train0", 60), env("train1", 60)];
    let test_env = env("test", 40);
    DatasetBundle { task: TaskKind::Classification { classes: 2 }, feature_shape: vec![2], train_envs, test_env, true_importance: vec![1.0, 0.0] }
}

fn quick(method: Method) -> HyperParams {
    HyperParams { method, steps: 300, learning_rate: 1e-2, batch_size: 16, val_every: 50, ..HyperParams::default() }
}

#[test]
fn erm_fits_separable_data() {
    let b = separable_bundle(0);
    let spec = ModelSpec::mlp(2, &[8], 2, Activation::Relu);
    let (m, h) = train(&b, &spec, &quick(Method::Erm)).unwrap();
    let all = pool(&b.train_envs, "all").unwrap();
    assert_eq!(task_metric(&m, &all).unwrap(), 1.0);
    assert_eq!(h.rows.len(), 300);
    assert!(h.rows.last().unwrap().task < h.rows[0].task);
}

#[test]
fn training_is_deterministic() {
    let b = separable_bundle(1);
    let spec = ModelSpec::mlp(2, &[4], 2, Activation::Softplus);
    for method in [Method::Erm, Method::Mixup, Method::Dre] {
        let (a, ha) = train(&b, &spec, &quick(method)).unwrap();
        let (c, hc) = train(&b, &spec, &quick(method)).unwrap();
        assert_eq!(a.to_bytes(), c.to_bytes(), "{method:?}");
        assert_eq!(ha, hc);
    }
}

#[test]
fn zero_weight_dre_reproduces_erm() {
    let b = separable_bundle(2);
    let spec = ModelSpec::mlp(2, &[6], 2, Activation::Softplus);
    let mut dre = quick(Method::Dre);
    dre.mix.lambda = 0.0;
    dre.mix.gamma = 0.0;
    let (md, hd) = train(&b, &spec, &dre).unwrap();
    let (me, he) = train(&b, &spec, &quick(Method::Erm)).unwrap();
    assert_eq!(md.to_bytes(), me.to_bytes());
    let task = |h: &dre_core::trainer::TrainingHistory| h.rows.iter().map(|r| r.task.to_bits()).collect::<Vec<_>>();
    assert_eq!(task(&hd), task(&he));
}

#[test]
fn history_columns_follow_the_method() {
    let b = separable_bundle(3);
    let spec = ModelSpec::mlp(2, &[6], 2, Activation::Softplus);
    let (_, erm) = train(&b, &spec, &quick(Method::Erm)).unwrap();
    assert!(erm.rows.iter().all(|r| r.consistency == 0.0 && r.sparsity == 0.0 && r.total == r.task));
    let (_, dre) = train(&b, &spec, &quick(Method::Dre)).unwrap();
    assert!(dre.rows.iter().any(|r| r.consistency > 0.0));
    assert!(dre.rows.iter().all(|r| r.sparsity > 0.0));
    for r in &dre.rows {
        let expect = r.task + r.consistency + 0.01 * r.sparsity;
        assert!((r.total - expect).abs() <= 1e-12 * expect.abs().max(1.0), "step {}", r.step);
    }

    let mut csv = Vec::new();
    dre.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,task,consistency,sparsity,total,val_metric"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 300);
    assert!(rows.iter().all(|r| r[..5].iter().all(|c| !c.is_empty())));
    let validated: Vec<&str> = rows.iter().filter(|r| !r[5].is_empty()).map(|r| r[0]).collect();
    assert_eq!(validated, ["50", "100", "150", "200", "250", "300"]);
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), dre.rows[0].task);
}

#[test]
fn selected_checkpoint_is_a_validated_step() {
    let b = separable_bundle(4);
    let (_, h) = train(&b, &ModelSpec::mlp(2, &[4], 2, Activation::Relu), &quick(Method::Erm)).unwrap();
    let row = &h.rows[h.selected_step - 1];
    assert_eq!(row.val_metric, Some(h.selected_val_metric));
    assert!(h.rows.iter().filter_map(|r| r.val_metric).all(|m| m <= h.selected_val_metric));
}

#[test]
fn every_method_trains_on_generated_bundles() {
    for kind in [GeneratorKind::TabularReg, GeneratorKind::TinyImageCls] {
        let mut cfg = GeneratorConfig::new(kind);
        cfg.samples_per_env = 40;
        let b = generate(&cfg, 0).unwrap();
        let spec = match kind {
            GeneratorKind::TinyImageCls => ModelSpec::cnn([2, 16, 16], [2, 2], b.task.output_dim(), Activation::Relu),
            _ => ModelSpec::mlp(b.feature_count(), &[8], 1, Activation::Relu),
        };
        for method in [Method::Erm, Method::Mixup, Method::Dre] {
            let hp = HyperParams { method, steps: 5, batch_size: 8, val_every: 5, ..HyperParams::default() };
            let (m, h) = train(&b, &spec, &hp).unwrap();
            assert_eq!(h.rows.len(), 5);
            assert!(m.params.tensors().all(|t| t.is_finite()));
        }
    }
}

#[test]
fn divergence_is_reported_with_exit_code_three() {
    let b = separable_bundle(5);
    let hp = HyperParams { method: Method::Erm, learning_rate: 1e300, clip_norm: None, steps: 50, ..HyperParams::default() };
    let err = train(&b, &ModelSpec::mlp(2, &[4], 2, Activation::Relu), &hp).unwrap_err();
    assert!(matches!(err, DreError::Divergence { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn mismatched_model_is_rejected() {
    let b = separable_bundle(6);
    let err = train(&b, &ModelSpec::mlp(3, &[4], 2, Activation::Relu), &quick(Method::Erm)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn consistency_term_falls_during_training() {
    let b = generate(&GeneratorConfig::new(GeneratorKind::TabularCls), 0).unwrap();
    let spec = ModelSpec::mlp(b.feature_count(), &[32, 32], 2, Activation::Relu);
    for seed in 0..5 {
        let (_, h) = train(&b, &spec, &HyperParams { seed, ..HyperParams::default() }).unwrap();
        let mean = |rows: &[dre_core::trainer::HistoryRow]| rows.iter().map(|r| r.consistency).sum::<f64>() / rows.len() as f64;
        let (first, last) = (mean(&h.rows[..500]), mean(&h.rows[h.rows.len() - 500..]));
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}
