use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
encoder_hidden = [16]
context_dim = 8
prior_width = 16
query_dim = 4
field_hidden = [16]
embed_freqs = 2
rank_hidden = 8
modes = 3
keep = 3
train_size = 48
val_size = 8
test_size = 24
epochs = 1
batch_size = 16
sweep_steps = [1, 2]
ablate_seeds = [1]
"#;

fn flows(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flows"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .env_remove("FLOWS_OUT")
        .env_remove("FLOWS_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), format!("{TINY}{extra}")).unwrap();
    dir
}

fn cfg(dir: &Path) -> String {
    dir.join("c.toml").display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_refuses_to_overwrite_and_is_reproducible() {
    let dir = setup("");
    let c = cfg(dir.path());
    assert!(flows(dir.path(), &["synth", "--config", &c]).status.success());
    let data = dir.path().join("out/data");
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let first = std::fs::read(data.join("train.jsonl")).unwrap();
    let again = flows(dir.path(), &["synth", "--config", &c]);
    assert_eq!(again.status.code(), Some(3));
    assert!(stderr(&again).contains("--force"));
    assert!(flows(dir.path(), &["synth", "--config", &c, "--force"]).status.success());
    assert_eq!(std::fs::read(data.join("train.jsonl")).unwrap(), first);
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = setup("maneuver_probs = [0.5, 0.5, 0.5, 0.5]\n");
    let o = flows(dir.path(), &["synth", "--config", &cfg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("maneuver_probs"), "{}", stderr(&o));

    let dir = setup("no_such_key = 1\n");
    let o = flows(dir.path(), &["synth", "--config", &cfg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));

    let dir = setup("");
    let o = flows(dir.path(), &["train", "--config", &cfg(dir.path()), "--variant", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn training_without_data_is_a_data_error() {
    let dir = setup("");
    let o = flows(dir.path(), &["train", "--config", &cfg(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("flows synth"));
}

#[test]
fn train_eval_sweep_report_pipeline() {
    let dir = setup("");
    let c = cfg(dir.path());
    let run = |args: &[&str]| {
        let o = flows(dir.path(), args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    run(&["synth", "--config", &c]);
    run(&["train", "--config", &c, "--seed", "5", "--variant", "prior_only"]);
    let rd = dir.path().join("out/runs/prior_only-seed5");

    let partial = flows(dir.path(), &["report", "--config", &c, "--seed", "5", "--variant", "prior_only"]);
    assert_eq!(partial.status.code(), Some(3));
    assert!(stderr(&partial).contains("metrics.json"));

    let out = run(&["eval", "--config", &c, "--seed", "5", "--variant", "prior_only", "--steps", "2", "--threads", "2"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("steps=2"));
    run(&["sweep-steps", "--config", &c, "--seed", "5", "--variant", "prior_only"]);
    run(&["report", "--config", &c, "--seed", "5", "--variant", "prior_only"]);

    let resolved = std::fs::read_to_string(rd.join("config.toml")).unwrap();
    assert!(resolved.contains("seed = 5") && resolved.contains("train_size = 48"));
    for f in ["checkpoint_final.bin", "checkpoint_best.bin", "train_log.csv", "metrics.json", "sweep.json"] {
        assert!(rd.join(f).is_file(), "{f}");
    }
    let csvs: Vec<_> = std::fs::read_dir(rd.join("report"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    assert_eq!(csvs.len(), 6, "{csvs:?}");
    let index = std::fs::read_to_string(rd.join("report/index.csv")).unwrap();
    assert_eq!(index.lines().count(), 6);

    // the same evaluation on one thread writes the same bytes
    let metrics = std::fs::read(rd.join("metrics.json")).unwrap();
    run(&["eval", "--config", &c, "--seed", "5", "--variant", "prior_only", "--steps", "2", "--threads", "1"]);
    assert_eq!(std::fs::read(rd.join("metrics.json")).unwrap(), metrics);
}

#[test]
fn ablate_writes_a_summary_row_per_variant() {
    let dir = setup("");
    let c = cfg(dir.path());
    assert!(flows(dir.path(), &["synth", "--config", &c]).status.success());
    let o = flows(dir.path(), &["ablate", "--config", &c]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("out/ablation/summary.csv")).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "prior_only", "field_only", "gaussian_baseline"]);
}
