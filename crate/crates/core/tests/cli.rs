mod common;

use std::path::Path;

use common::{path_str, run_cli};

const TINY: &str = "preset=smoke\nlayers=32,16\nepochs=1\nbatch=20\nlimit=0\nvalidation_limit=20\neval_iterations=3\n";

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate_shapes(dir: &Path, count: usize, seed: u64) -> std::path::PathBuf {
    let out = dir.join(format!("shapes{seed}.tagd"));
    let o = run_cli(&["generate", "--dataset", "shapes", "--count", &count.to_string(), "--seed", &seed.to_string(), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn train(dir: &Path, data: &Path, config: &str, extra: &[&str]) -> std::process::Output {
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("run");
    let mut args = vec!["train", "--config", path_str(&cfg), "--data", path_str(data), "--out", path_str(&out)];
    args.extend_from_slice(extra);
    run_cli(&args)
}

#[test]
fn help_and_usage_errors() {
    let o = run_cli(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("visualize"));
    assert_eq!(run_cli(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run_cli(&["generate", "--dataset", "cifar", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn textured_generation_needs_mnist_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_cli(&["generate", "--dataset", "tmnist1", "--count", "3", "--out", path_str(&dir.path().join("t"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--mnist-dir"));
}

#[test]
fn generate_writes_standard_splits_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    common::write_synthetic_mnist(dir.path(), 60, 12, 0);
    // Counts are fixed for the standard splits, so use the smallest kind.
    let base = dir.path().join("tm");
    let o = run_cli(&["generate", "--dataset", "tmnist1", "--count", "7", "--seed", "3", "--mnist-dir", path_str(dir.path()), "--out", path_str(&base)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = tagger::data::DatasetBundle::load(&base).unwrap();
    assert_eq!(data.len(), 7);
    let manifest = std::fs::read_to_string(dir.path().join("tm.manifest")).unwrap();
    assert!(manifest.contains("command=generate tmnist1"));
    assert!(manifest.contains("seed=3"));
}

#[test]
fn train_eval_visualize_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_shapes(dir.path(), 100, 1);
    let o = train(dir.path(), &data, TINY, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    let metrics = std::fs::read_to_string(run.join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 2, "{metrics}");
    assert!(lines[0].starts_with("epoch\tphase"));
    let manifest = std::fs::read_to_string(run.join("manifest.txt")).unwrap();
    let hash = tagger::cli::content_hash(TINY.as_bytes());
    assert!(manifest.contains(&format!("config_hash={hash}")), "{manifest}");

    let ckpt = run.join("checkpoint.tagd");
    let report = dir.path().join("report.tsv");
    let o = run_cli(&["eval", "--checkpoint", path_str(&ckpt), "--data", path_str(&data), "--groups", "2", "--iterations", "4", "--report", path_str(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(String::from_utf8_lossy(&o.stdout), text);
    assert!(text.contains("\n4\t"));
    assert!(text.contains("groups\t2"));
    assert!(text.contains("ami\t"));

    let viz = dir.path().join("viz");
    let o = run_cli(&["visualize", "--checkpoint", path_str(&ckpt), "--data", path_str(&data), "--example-index", "3", "--ablate-group", "1", "--out-dir", path_str(&viz)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["iteration_1.png", "iteration_3.png", "ablated_group_1.png", "manifest.txt"] {
        assert!(viz.join(name).exists(), "{name} missing");
    }
    let o = run_cli(&["visualize", "--checkpoint", path_str(&ckpt), "--data", path_str(&data), "--example-index", "100", "--out-dir", path_str(&viz)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resume_continues_the_epoch_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_shapes(dir.path(), 60, 2);
    assert!(train(dir.path(), &data, TINY, &[]).status.success());
    let ckpt = dir.path().join("run/checkpoint.tagd");
    let saved = dir.path().join("first.tagd");
    std::fs::copy(&ckpt, &saved).unwrap();
    let more = TINY.replace("epochs=1", "epochs=2");
    let o = train(dir.path(), &data, &more, &["--resume", path_str(&saved)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.tsv")).unwrap();
    let epochs: Vec<&str> = metrics.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2"]);

    // Architecture changes cannot resume.
    let other = more.replace("layers=32,16", "layers=32,8");
    let o = train(dir.path(), &data, &other, &["--resume", path_str(&saved)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_shapes(dir.path(), 60, 3);
    let o = train(dir.path(), &data, &format!("{TINY}lr=1e300\n"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(dir.path().join("run/checkpoint.tagd").exists());
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_shapes(dir.path(), 40, 4);
    let o = train(dir.path(), &data, "groups=4\nbogus=1\n", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));

    let junk = dir.path().join("junk.tagd");
    std::fs::write(&junk, b"TAGD but not really").unwrap();
    let o = train(dir.path(), &junk, TINY, &[]);
    assert_eq!(o.status.code(), Some(2));

    let o = train(dir.path(), &data, TINY, &["--labels", "/no/such/file"]);
    assert_eq!(o.status.code(), Some(2));

    let o = std::process::Command::new(common::tagger_bin())
        .args(["eval", "--checkpoint", "x", "--data", "y"])
        .env("TAGGER_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("TAGGER_THREADS"));
}
