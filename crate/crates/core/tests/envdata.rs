use dre_core::envdata::{generate, load_bundle, save_bundle, split_train_val, DatasetBundle, GeneratorConfig, GeneratorKind, Targets};
use dre_core::DreError;

fn cols(b: &DatasetBundle, env: usize, range: std::ops::Range<usize>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let e = if env < b.train_envs.len() { &b.train_envs[env] } else { &b.test_env };
    let d = b.feature_count();
    let rows = e.samples.data().chunks(d).map(|r| r[range.clone()].to_vec()).collect();
    (rows, e.targets.as_f64())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Logistic regression by full-batch gradient descent.
fn fit_logistic(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let d = x[0].len();
    let mut w = vec![0.0; d + 1];
    for _ in 0..500 {
        let mut g = vec![0.0; d + 1];
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = w[d] + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let r = 1.0 / (1.0 + (-z).exp()) - yi;
            for j in 0..d {
                g[j] += r * xi[j];
            }
            g[d] += r;
        }
        for j in 0..=d {
            w[j] -= 0.5 * g[j] / x.len() as f64;
        }
    }
    w
}

fn logistic_accuracy(w: &[f64], x: &[Vec<f64>], y: &[f64]) -> f64 {
    let d = w.len() - 1;
    let hits = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| {
            let z: f64 = w[d] + xi.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            (z > 0.0) == (yi > 0.5)
        })
        .count();
    hits as f64 / y.len() as f64
}

/// Majority vote of the `k` nearest training points.
fn knn_accuracy(train: &[Vec<f64>], ty: &[f64], test: &[Vec<f64>], y: &[f64], k: usize) -> f64 {
    let mut hits = 0;
    for (q, &yq) in test.iter().zip(y) {
        let mut d: Vec<(f64, f64)> = train.iter().zip(ty).map(|(p, &l)| (p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum(), l)).collect();
        d.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0));
        let ones = d[..k].iter().filter(|(_, l)| *l > 0.5).count();
        if (ones * 2 > k) == (yq > 0.5) {
            hits += 1;
        }
    }
    hits as f64 / y.len() as f64
}

#[test]
fn generation_is_deterministic() {
    for kind in [GeneratorKind::TabularCls, GeneratorKind::TabularReg, GeneratorKind::TinyImageCls] {
        let mut cfg = GeneratorConfig::new(kind);
        cfg.samples_per_env = 100;
        assert_eq!(generate(&cfg, 7).unwrap().to_bytes(), generate(&cfg, 7).unwrap().to_bytes());
        assert_ne!(generate(&cfg, 7).unwrap().to_bytes(), generate(&cfg, 8).unwrap().to_bytes());
    }
}

#[test]
fn spurious_correlation_matches_rho() {
    let mut cfg = GeneratorConfig::new(GeneratorKind::TabularCls);
    cfg.train_rho = vec![0.9, 0.9];
    cfg.samples_per_env = 5000;
    let b = generate(&cfg, 0).unwrap();
    let (x, y) = cols(&b, 0, 5..10);
    for j in 0..5 {
        let s: Vec<f64> = x.iter().map(|r| r[j]).collect();
        let c = pearson(&s, &y);
        assert!((c - 0.9).abs() < 0.05, "spurious feature {j}: corr {c}");
    }
    let mut reg = GeneratorConfig::new(GeneratorKind::TabularReg);
    reg.train_rho = vec![0.9, 0.9];
    reg.samples_per_env = 5000;
    let b = generate(&reg, 0).unwrap();
    let (x, y) = cols(&b, 0, 5..6);
    let c = pearson(&x.iter().map(|r| r[0]).collect::<Vec<_>>(), &y);
    assert!((c - 0.9).abs() < 0.05, "regression corr {c}");
}

#[test]
fn spurious_only_probe_fails_under_reversal() {
    let b = generate(&GeneratorConfig::new(GeneratorKind::TabularCls), 0).unwrap();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for e in 0..b.train_envs.len() {
        let (xe, ye) = cols(&b, e, 5..10);
        x.extend(xe);
        y.extend(ye);
    }
    let w = fit_logistic(&x, &y);
    assert!(logistic_accuracy(&w, &x, &y) > 0.85);
    let (xt, yt) = cols(&b, b.train_envs.len(), 5..10);
    let acc = logistic_accuracy(&w, &xt, &yt);
    assert!(acc < 0.5, "spurious probe test accuracy {acc}");
}

#[test]
fn core_features_suffice() {
    let b = generate(&GeneratorConfig::new(GeneratorKind::TabularCls), 0).unwrap();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for e in 0..b.train_envs.len() {
        let (xe, ye) = cols(&b, e, 0..5);
        x.extend(xe);
        y.extend(ye);
    }
    let (xt, yt) = cols(&b, b.train_envs.len(), 0..5);
    let acc = knn_accuracy(&x, &y, &xt, &yt, 15);
    assert!(acc >= 0.9, "core-only probe test accuracy {acc}");
}

#[test]
fn true_importance_marks_core_features() {
    let b = generate(&GeneratorConfig::new(GeneratorKind::TabularCls), 0).unwrap();
    assert_eq!(b.true_importance.iter().sum::<f64>(), 5.0);
    assert!(b.true_importance[..5].iter().all(|&v| v == 1.0));
    let mut img = GeneratorConfig::new(GeneratorKind::TinyImageCls);
    img.samples_per_env = 30;
    let b = generate(&img, 0).unwrap();
    assert_eq!(b.feature_shape, vec![2, 16, 16]);
    assert!(b.true_importance[256..].iter().all(|&v| v == 0.0));
    assert!(b.true_importance[..256].iter().any(|&v| v == 1.0));
}

#[test]
fn image_texture_polarity_follows_rho() {
    let mut cfg = GeneratorConfig::new(GeneratorKind::TinyImageCls);
    cfg.samples_per_env = 2000;
    cfg.train_rho = vec![0.6, 0.2];
    let b = generate(&cfg, 3).unwrap();
    for (env, rho) in b.train_envs.iter().zip([0.6, 0.2]) {
        let Targets::Classes(c) = &env.targets else { unreachable!() };
        let parity: Vec<f64> = c.iter().map(|y| if y % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let tex = |i: usize| &env.samples.data()[i * 512 + 256..(i + 1) * 512];
        // parity-weighted mean texture is rho * (env texture)
        let mut reference = vec![0.0; 256];
        for (i, p) in parity.iter().enumerate() {
            for (r, t) in reference.iter_mut().zip(tex(i)) {
                *r += p * t;
            }
        }
        let agree = (0..env.len())
            .filter(|&i| {
                let dot: f64 = tex(i).iter().zip(&reference).map(|(a, b)| a * b).sum();
                (dot > 0.0) == (parity[i] > 0.0)
            })
            .count() as f64
            / env.len() as f64;
        assert!((agree - (1.0 + rho) / 2.0).abs() < 0.03, "rho {rho}: agreement {agree}");
    }
}

#[test]
fn split_sizes_and_union() {
    let mut cfg = GeneratorConfig::new(GeneratorKind::TabularReg);
    cfg.samples_per_env = 10;
    let b = generate(&cfg, 1).unwrap();
    let e = &b.train_envs[0];
    let (t, v) = split_train_val(e, 0.8, 5).unwrap();
    assert_eq!((t.len(), v.len()), (8, 2));
    let mut all: Vec<u64> = t.targets.as_f64().into_iter().chain(v.targets.as_f64()).map(f64::to_bits).collect();
    let mut orig: Vec<u64> = e.targets.as_f64().into_iter().map(f64::to_bits).collect();
    all.sort_unstable();
    orig.sort_unstable();
    assert_eq!(all, orig);
}

#[test]
fn bundle_file_round_trip_and_errors() {
    let mut cfg = GeneratorConfig::new(GeneratorKind::TinyImageCls);
    cfg.samples_per_env = 20;
    let b = generate(&cfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.bin");
    save_bundle(&b, &path).unwrap();
    assert_eq!(load_bundle(&path).unwrap(), b);

    let bytes = b.to_bytes();
    assert!(matches!(DatasetBundle::from_bytes(&bytes[..bytes.len() / 2]), Err(DreError::Parse { .. })));
    let pos = bytes.windows(10).position(|w| w == b"version 1\n").unwrap();
    let mut v2 = bytes[..pos].to_vec();
    v2.extend_from_slice(b"version 2\n");
    v2.extend_from_slice(&bytes[pos + 10..]);
    assert!(matches!(DatasetBundle::from_bytes(&v2), Err(DreError::Version { .. })));
}

#[test]
fn leave_one_out_holds_out_each_environment() {
    let mut cfg = GeneratorConfig::new(GeneratorKind::TabularCls);
    cfg.samples_per_env = 20;
    let b = generate(&cfg, 0).unwrap();
    let rot = b.leave_one_out();
    let held: Vec<&str> = rot.iter().map(|r| r.test_env.env_id.as_str()).collect();
    assert_eq!(held, ["train0", "train1", "train2", "test"]);
    for r in &rot {
        assert_eq!(r.train_envs.len(), 3);
        assert!(r.train_envs.iter().all(|e| e.env_id != r.test_env.env_id));
    }
}
