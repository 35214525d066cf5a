use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedclust::datasets::{save_dataset, synth_blobs};
use fedclust::numerics::Rng;

fn fedclust(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedclust"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn blobs(dir: &Path) {
    let ds = synth_blobs(4, 400, 8, 8.0, 1.0, &mut Rng::new(3)).unwrap();
    save_dataset(&ds, dir.join("blobs.fstc")).unwrap();
}

#[test]
fn run_from_config_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    blobs(dir.path());
    fs::write(
        dir.path().join("exp.toml"),
        "dataset = \"blobs.fstc\"\nk = 4\nm = 2\nrounds = 9\nlocal_iters = 5\nbatch_size = 50\n",
    )
    .unwrap();
    let out = fedclust(
        &["run", "--config", "exp.toml", "--rounds", "2", "--head-lr", "0.02"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("runs/results.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[7], "2");
}

#[test]
fn missing_dataset_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedclust(&["run", "--dataset", "nope.fstc", "--k", "4"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.fstc"));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn bad_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    blobs(dir.path());
    for args in [
        &["run", "--dataset", "blobs.fstc"][..],
        &["run", "--dataset", "blobs.fstc", "--k", "4", "--epsilon", "-1"],
        &["run", "--dataset", "blobs.fstc", "--k", "4", "--no-such-key", "1"],
        &["run", "--config", "missing.toml"],
    ] {
        let out = fedclust(args, dir.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    blobs(dir.path());
    let out = fedclust(
        &[
            "run",
            "--dataset",
            "blobs.fstc",
            "--k",
            "4",
            "--m",
            "2",
            "--rounds",
            "2",
            "--local-iters",
            "5",
            "--head-lr",
            "1e300",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn baseline_partition_and_eval_commands() {
    let dir = tempfile::tempdir().unwrap();
    blobs(dir.path());

    let out = fedclust(
        &["baseline-kmeans", "--data", "blobs.fstc", "--k", "4", "--seed", "1"],
        dir.path(),
    );
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["acc"].as_f64().unwrap() > 0.9);

    let out = fedclust(
        &[
            "partition",
            "--data",
            "blobs.fstc",
            "--mode",
            "skew",
            "--m",
            "2",
            "--rho",
            "3",
            "--out",
            "shards",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    assert!(dir.path().join("shards/shard_0.fstc").is_file());
    assert!(dir.path().join("shards/shard_1.idx").is_file());

    fs::write(dir.path().join("pred.txt"), "1\n1\n0\n0\n").unwrap();
    fs::write(dir.path().join("truth.txt"), "0\n0\n1\n1\n").unwrap();
    let out = fedclust(&["eval", "--pred", "pred.txt", "--truth", "truth.txt"], dir.path());
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["acc"].as_f64(), Some(1.0));
    assert_eq!(v["nmi"].as_f64(), Some(1.0));

    let out = fedclust(
        &["baseline-kmeans", "--data", "shards/shard_0.idx", "--k", "4"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
