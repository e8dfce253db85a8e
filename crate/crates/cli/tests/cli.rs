use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dre_core::autograd::Tensor;
use dre_core::model::{Activation, Model, ModelSpec, ParameterSet};

const SMALL: &str = r#"
seeds = [0, 1]
methods = ["erm", "dre"]
attribution_samples = 1

[generator]
kind = "tabular_cls"
samples_per_env = 60

[model]
hidden = [8]

[train]
steps = 20
val_every = 10
batch_size = 16

[metrics]
dec_pairs = 20
iauc_samples = 10
"#;

fn dre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dre")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines.map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(String::from)).collect()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_hash_is_stable_and_seed_dependent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = dre(&["generate", "--config", &cfg, "--out", s(&out), "--seed", seed]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap().split_whitespace().next().unwrap().to_string()
    };
    let a = run("a.bin", "3");
    assert_eq!(a.len(), 64);
    assert_eq!(a, run("b.bin", "3"));
    assert_ne!(a, run("c.bin", "4"));
    assert_eq!(fs::read(dir.path().join("a.bin")).unwrap(), fs::read(dir.path().join("b.bin")).unwrap());
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.bin");
    let missing = write_config(dir.path(), "m.toml", "seeds = [0]\n");
    let o = dre(&["generate", "--config", &missing, "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("generator"));

    let unknown = write_config(dir.path(), "u.toml", &format!("{SMALL}\nbogus = 1\n"));
    assert_eq!(code(&dre(&["generate", "--config", &unknown, "--out", s(&out)])), 2);

    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let o = dre(&["benchmark", "--config", &cfg, "--out", s(dir.path()), "--method", "irm"]);
    assert_eq!(code(&o), 2);
    let o = dre(&["train", "--config", &cfg, "--bundle", s(&dir.path().join("absent.bin")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("steps = 20", "steps = 20\nlearning_rate = 1e300\nclip_norm = 1e300");
    let cfg = write_config(dir.path(), "c.toml", &body);
    let bundle = dir.path().join("b.bin");
    assert_eq!(code(&dre(&["generate", "--config", &cfg, "--out", s(&bundle)])), 0);
    let o = dre(&["train", "--config", &cfg, "--bundle", s(&bundle), "--out", s(dir.path()), "--method", "erm"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_eval_explain_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let bundle = dir.path().join("b.bin");
    assert_eq!(code(&dre(&["generate", "--config", &cfg, "--out", s(&bundle)])), 0);
    let o = dre(&["train", "--config", &cfg, "--bundle", s(&bundle), "--out", s(dir.path()), "--method", "dre", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("checkpoint_dre_test_seed1.params");
    let history = read_csv(&dir.path().join("history_dre_test_seed1.csv"));
    assert_eq!(history.len(), 20);

    let o = dre(&["eval", "--config", &cfg, "--bundle", s(&bundle), "--checkpoint", s(&ckpt), "--out", s(dir.path()), "--method", "dre", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&dir.path().join("metrics_dre_test_seed1.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["task_metric"], "accuracy");
    for f in ["curve_dre_test_seed1_test.csv", "curve_dre_test_seed1_id.csv", "attr_dre_test_seed1_0.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let stem = dir.path().join("one");
    let o = dre(&["explain", "--bundle", s(&bundle), "--checkpoint", s(&ckpt), "--env", "train1", "--index", "3", "--out", s(&stem)]);
    assert_eq!(code(&o), 0);
    assert_eq!(read_csv(&dir.path().join("one.csv")).len(), 20);
    let o = dre(&["explain", "--bundle", s(&bundle), "--checkpoint", s(&ckpt), "--env", "nowhere", "--out", s(&stem)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn constant_model_scores_unit_iauc() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let bundle = dir.path().join("b.bin");
    assert_eq!(code(&dre(&["generate", "--config", &cfg, "--out", s(&bundle)])), 0);
    let spec = ModelSpec::mlp(20, &[8], 2, Activation::Relu);
    let params = ParameterSet::new(
        spec.param_layout()
            .into_iter()
            .map(|(n, shape)| {
                let mut t = Tensor::zeros(&shape);
                if n == "fc1.bias" {
                    t.data_mut()[0] = 1.0;
                }
                (n, t)
            })
            .collect(),
    );
    let ckpt = dir.path().join("const.params");
    Model::from_parts(spec, params).unwrap().save(&ckpt).unwrap();
    let o = dre(&["eval", "--config", &cfg, "--bundle", s(&bundle), "--checkpoint", s(&ckpt), "--out", s(dir.path()), "--method", "const"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let row = &read_csv(&dir.path().join("metrics_const_test_seed0.csv"))[0];
    assert_eq!(row["iauc"], "1.0");
    assert_eq!(row["iauc_id"], "1.0");
    assert_eq!(row["dec_raw"], "0.0");
    assert_eq!(row["sc"], "NaN");
}

#[test]
fn benchmark_is_reproducible_and_summaries_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dre(&["benchmark", "--config", &cfg, "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "summary.csv", "summary.txt", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs between runs");
    }

    let metrics = read_csv(&a.join("metrics.csv"));
    // leave-one-out over 4 environments, 2 methods, 2 seeds
    assert_eq!(metrics.len(), 16);
    let summary = read_csv(&a.join("summary.csv"));
    let lookup = |method: &str, metric: &str, env: &str| -> f64 {
        summary.iter().find(|r| r["method"] == method && r["metric"] == metric && r["test_env"] == env).unwrap()["value"].parse().unwrap()
    };
    let envs = ["train0", "train1", "train2", "test"];
    for method in ["erm", "dre"] {
        for metric in ["dec_relative", "value", "iauc_id"] {
            let mut per_env = Vec::new();
            for env in envs {
                let vals: Vec<f64> = metrics
                    .iter()
                    .filter(|r| r["method"] == method && r["test_env"] == env)
                    .map(|r| r[metric].parse::<f64>().unwrap())
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!((lookup(method, metric, env) - m).abs() < 1e-12, "{method} {metric} {env}");
                per_env.push(m);
            }
            let avg = per_env.iter().sum::<f64>() / 4.0;
            assert!((lookup(method, metric, "avg") - avg).abs() < 1e-12, "{method} {metric} avg");
        }
    }
    assert!((lookup("erm", "dec_relative", "avg") - 1.0).abs() < 1e-12);
    let text = fs::read_to_string(a.join("summary.txt")).unwrap();
    assert!(text.contains("DEC loss relative to ERM") && text.contains("[generator]"));
}
