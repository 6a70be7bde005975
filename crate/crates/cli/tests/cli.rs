use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedsilo::datagen::load_dataset;
use fedsilo::wire::inspect_model;
use fedsilo_cli::report::ExperimentReport;

fn fedsilo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsilo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, strategy: &str, extra: &str) -> PathBuf {
    let text = format!(
        "[experiment]\nseed = 3\ndata_dir = {:?}\n\
         [data]\ncenters = 3\nsamples_per_center = 80\nheight = 8\nwidth = 8\n\
         [model]\nchannels = 4, 8\n\
         [federation]\nstrategy = {strategy}\nlocal_steps = 2\nrounds = 2\nbatch_size = 8\n{extra}",
        s(&dir.join("data"))
    );
    let path = dir.join(format!("{strategy}.conf"));
    fs::write(&path, text).unwrap();
    path
}

fn generate(dir: &Path, config: &Path) {
    let out = fedsilo(&["generate", "--config", s(config), "--out", s(&dir.join("data"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn train(config: &Path, out: &Path) -> ExperimentReport {
    let o = fedsilo(&["train", "--config", s(config), "--out", s(out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn generate_writes_counted_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.conf");
    fs::write(
        &cfg,
        "[data]\ncenters = 2\nsamples_per_center = 100\nheight = 8\nwidth = 8\n",
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = fedsilo(&["generate", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success());
        assert!(String::from_utf8_lossy(&o.stdout).contains("center 1: train 60"));
    }
    let mut files = 0;
    for c in 0..2 {
        for split in ["train", "val", "test"] {
            let rel = format!("center_{c}/{split}.fsd");
            assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap());
            files += 1;
        }
        assert_eq!(load_dataset(a.join(format!("center_{c}/train.fsd"))).unwrap().len(), 60);
    }
    assert_eq!(files, 6);
}

#[test]
fn unknown_key_is_a_one_line_error_with_a_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "[optimizer]\nlr_rate = 0.01\n").unwrap();
    let o = fedsilo(&["generate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]: line 2:"), "{err}");
    assert!(err.contains("lr_rate") && err.contains("`lr`"), "{err}");
}

#[test]
fn missing_data_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "fedavg", "");
    let o = fedsilo(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[missing_data]:"));
}

#[test]
fn model_files_follow_personalization() {
    let dir = tempfile::tempdir().unwrap();
    let local = tiny_config(dir.path(), "local", "");
    generate(dir.path(), &local);
    let report = train(&local, &dir.path().join("local"));
    let models = dir.path().join("local/models/seed_3");
    assert_eq!(fs::read_dir(&models).unwrap().count(), 3);
    assert_eq!(report.seeds[0].models, ["center_0.fsm", "center_1.fsm", "center_2.fsm"]);
    assert!(report.communicated_keys.is_empty());

    let fedavg = tiny_config(dir.path(), "fedavg", "");
    train(&fedavg, &dir.path().join("fedavg"));
    let models: Vec<_> = fs::read_dir(dir.path().join("fedavg/models/seed_3")).unwrap().collect();
    assert_eq!(models.len(), 1);
}

#[test]
fn silobn_manifest_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "silobn", "");
    generate(dir.path(), &cfg);
    let report = train(&cfg, &dir.path().join("run"));
    assert!(!report.communicated_keys.is_empty());
    assert!(report
        .communicated_keys
        .iter()
        .all(|k| !k.ends_with("running_mean") && !k.ends_with("running_var")));
    assert_eq!(report.local_keys.len(), 4, "{:?}", report.local_keys);

    let bytes = fs::read(dir.path().join("run/models/seed_3/center_0.fsm")).unwrap();
    let entries = inspect_model(&bytes).unwrap();
    assert!(entries.iter().any(|e| e.key.ends_with("running_mean")));
}

#[test]
fn eval_reproduces_training_auc() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "silobn", "[eval]\nholdout = 2\nadabn = true\n");
    generate(dir.path(), &cfg);
    let report = train(&cfg, &dir.path().join("run"));
    let trained = &report.seeds[0].eval.per_center_auc;
    assert_eq!(trained.len(), 2);
    let ood = &report.seeds[0].out_of_domain;
    assert_eq!(ood.len(), 2);
    assert!(ood.iter().all(|o| o.target == 2 && o.auc_adabn.is_some()));

    let models = dir.path().join("run/models/seed_3");
    let json = dir.path().join("eval.json");
    let o = fedsilo(&[
        "eval",
        "--model",
        s(&models.join("center_0.fsm")),
        "--model",
        s(&models.join("center_1.fsm")),
        "--data",
        s(&dir.path().join("data")),
        "--foreign",
        s(&dir.path().join("data/center_2")),
        "--adabn",
        "--out",
        s(&json),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out: fedsilo_cli::commands::EvalOutput = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    for m in &out.models {
        let c = m.center.unwrap();
        assert!((m.intra[&c] - trained[&c]).abs() <= 1e-12);
        let f = m.foreign.as_ref().unwrap();
        let recorded = ood.iter().find(|r| r.source == Some(c)).unwrap();
        assert!((f.auc - recorded.auc).abs() <= 1e-12);
        assert!((f.auc_adabn.unwrap() - recorded.auc_adabn.unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn adabn_on_a_model_without_batch_norm_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "fedavg", "[eval]\nholdout = 2\n");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("[model]\n", "[model]\nbatch_norm = false\n");
    fs::write(&cfg, text).unwrap();
    generate(dir.path(), &cfg);
    train(&cfg, &dir.path().join("run"));
    let o = fedsilo(&[
        "eval",
        "--model",
        s(&dir.path().join("run/models/seed_3/global.fsm")),
        "--foreign",
        s(&dir.path().join("data/center_2")),
        "--adabn",
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no-op"));
}

#[test]
fn eval_names_both_shapes_on_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "fedavg", "");
    generate(dir.path(), &cfg);
    train(&cfg, &dir.path().join("run"));
    let other = dir.path().join("other.conf");
    fs::write(
        &other,
        "[data]\ncenters = 1\nsamples_per_center = 20\nheight = 12\nwidth = 12\n",
    )
    .unwrap();
    let o = fedsilo(&["generate", "--config", s(&other), "--out", s(&dir.path().join("big"))]);
    assert!(o.status.success());
    let o = fedsilo(&[
        "eval",
        "--model",
        s(&dir.path().join("run/models/seed_3/global.fsm")),
        "--data",
        s(&dir.path().join("big")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.starts_with("error[shape]:") && err.contains("3x8x8") && err.contains("3x12x12"),
        "{err}"
    );
}

#[test]
fn gradcheck_passes_and_fails_on_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gc.conf");
    fs::write(&cfg, "[gradcheck]\nseeds = 2\n").unwrap();
    let o = fedsilo(&["gradcheck", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));

    fs::write(
        &cfg,
        "[gradcheck]\nseeds = 2\ncorrupt_key = \"5.gamma\"\ncorrupt_factor = 2.0\n",
    )
    .unwrap();
    let o = fedsilo(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.starts_with("error[check_failed]: dcnn+bn") && err.contains("5.gamma"),
        "{err}"
    );
}

#[test]
fn bad_arguments_give_one_line() {
    let o = fedsilo(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[usage]:"));
}
