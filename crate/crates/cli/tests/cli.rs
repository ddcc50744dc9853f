use std::path::Path;
use std::process::{Command, Output};

const TINY_CHARACTER: &str = "kind = character\nglyph_classes = 10\nglyph_instances = 6\nmeta_train_classes = 6\n\
filters = 2\nepochs = 2\nbatch = 2\nmeta_queries = 2\nmeta_tasks = 6\nmaml_epochs = 2\nmaml_batch = 2\n\
way = 3\nshot = 1\nqueries = 2\nepisodes = 4\nadapt_steps = 2\n";

fn metapool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metapool")).args(args).output().expect("spawn metapool")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn meta_train_with_zero_epochs_exports_the_initial_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.cfg", "kind = synthetic-1d\ntasks = 10\nheldout_tasks = 2\nepochs = 0\n");
    let out = dir.path().join("out");
    let o = metapool(&["meta-train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["W.csv", "p.csv", "metrics.json", "log.jsonl", "checkpoint/manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn identical_seeds_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.cfg", "kind = synthetic-1d\ntasks = 20\nheldout_tasks = 2\nepochs = 3\nbatch = 4\n");
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = metapool(&["meta-train", "--config", &cfg, "--seed", seed, "--out", out.to_str().unwrap(), "--log-every", "0"]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b, c) = (run("a", "3"), run("b", "3"), run("c", "4"));
    for f in ["W.csv", "p.csv", "metrics.json", "log.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(std::fs::read(a.join("log.jsonl")).unwrap(), std::fs::read(c.join("log.jsonl")).unwrap());
}

#[test]
fn missing_dataset_root_fails_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "kind = character\ndataset_root = /no/such/omniglot\n");
    let o = metapool(&["meta-train", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such/omniglot"), "{}", stderr(&o));
}

#[test]
fn verify_passes_and_catches_an_injected_fault() {
    let ok = metapool(&["verify"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = metapool(&["verify", "--inject-fault", "flip-sign"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn eval_noise_without_adapted_weights_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", TINY_CHARACTER);
    let out = dir.path().join("out");
    let o = metapool(&["eval-noise", "--config", &cfg, "--out", out.to_str().unwrap(), "--pooling", "max"]);
    assert!(!o.status.success());
}

#[test]
fn character_stages_chain_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", TINY_CHARACTER);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let step = |args: &[&str]| {
        let mut full = args.to_vec();
        full.extend(["--config", &cfg, "--out", out_s, "--log-every", "0"]);
        let o = metapool(&full);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    step(&["meta-train"]);
    assert!(out.join("checkpoint/manifest.json").exists());
    step(&["maml-init", "--pooling", "meta"]);
    assert!(out.join("maml_meta/manifest.json").exists());
    step(&["adapt-eval", "--pooling", "meta"]);
    step(&["adapt-eval", "--pooling", "max"]);

    let csv = std::fs::read_to_string(out.join("accuracy_meta.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "episode,accuracy");
    assert_eq!(lines.len(), 1 + 4 + 2);
    assert!(lines[5].starts_with("mean,") && lines[6].starts_with("sd,"));

    step(&["eval-noise", "--pooling", "meta"]);
    let noise = std::fs::read_to_string(out.join("noise.csv")).unwrap();
    assert!(noise.starts_with("pooling,ratio,mean_accuracy,sd"));
    assert_eq!(noise.lines().count(), 1 + 7);
}
