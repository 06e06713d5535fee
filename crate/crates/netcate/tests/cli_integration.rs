//! End-to-end checks of the `netcate` binary: every subcommand, the exit
//! code contract, determinism of artifacts, and sweep resumability.

use std::path::Path;
use std::process::{Command, Output};

fn netcate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netcate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout(out),
        stderr(out)
    );
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

const SMALL_SBM: &str = "n=60,c=3,vocab=9,mean_tokens=8";

fn generate_small(dir: &Path, seed: u64) {
    let out = netcate(&[
        "generate",
        "--synthetic-sbm",
        SMALL_SBM,
        "--k",
        "3",
        "--topics",
        "4",
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_success(&out);
}

#[test]
fn generate_is_deterministic_and_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    generate_small(&a, 1);
    generate_small(&b, 1);
    for file in ["ground_truth.csv", "units.csv", "edges.tsv", "features.txt"] {
        assert_eq!(
            read(&a.join(file)),
            read(&b.join(file)),
            "{file} differs between identical runs"
        );
    }
    let ds = netcate::graphdata::load_dataset(&a).expect("generated dataset loads");
    assert_eq!(ds.n_units(), 60);
    assert_eq!(ds.k(), 3);
}

#[test]
fn generate_rejects_single_treatment_as_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = netcate(&[
        "generate",
        "--synthetic-sbm",
        SMALL_SBM,
        "--k",
        "1",
        "--out",
        tmp.path().join("ds").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_model_is_a_usage_error_listing_valid_names() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    generate_small(&ds, 1);
    let out = netcate(&[
        "train",
        "--model",
        "resnet",
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for name in ["gcn-wass", "gcn-mmd", "tarnet", "cfrnet-wass", "cfrnet-mmd"] {
        assert!(err.contains(name), "stderr missing {name}: {err}");
    }
}

#[test]
fn gradcheck_passes_fails_and_repeats_deterministically() {
    let pass = netcate(&["gradcheck", "--models", "tarnet", "--tolerance", "1e-3"]);
    assert_success(&pass);
    assert!(stdout(&pass).contains("PASS"));

    let fail = netcate(&["gradcheck", "--models", "tarnet", "--tolerance", "0"]);
    assert_eq!(fail.status.code(), Some(1));
    assert!(stdout(&fail).contains("FAIL"));
    assert!(stdout(&fail).contains("worst offender"));

    let first = netcate(&["gradcheck", "--models", "cfrnet-mmd", "--seed", "7"]);
    let second = netcate(&["gradcheck", "--models", "cfrnet-mmd", "--seed", "7"]);
    assert_success(&first);
    assert_eq!(stdout(&first), stdout(&second));
}

#[test]
fn train_then_evaluate_appends_one_results_row() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let out_dir = tmp.path().join("out");
    generate_small(&ds, 1);

    let trained = netcate(&[
        "train",
        "--model",
        "gcn-mmd",
        "--dataset",
        ds.to_str().unwrap(),
        "--seed",
        "1",
        "--rep-layers",
        "8,8",
        "--head-layers",
        "6",
        "--max-epochs",
        "15",
        "--patience",
        "0",
        "--val-fraction",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_success(&trained);
    assert!(out_dir.join("gcn-mmd-seed1.ckpt").exists());
    let report = String::from_utf8(read(&out_dir.join("gcn-mmd-seed1-train.csv"))).unwrap();
    assert!(report.starts_with("epoch,l1_train,l2_train,total_train,l1_val,stop_flag"));
    // Header plus one line per epoch.
    assert_eq!(report.lines().count(), 16);

    let evaluated = netcate(&[
        "evaluate",
        "--model",
        "gcn-mmd",
        "--dataset",
        ds.to_str().unwrap(),
        "--seeds",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
        "--table",
    ]);
    assert_success(&evaluated);
    let text = String::from_utf8(read(&out_dir.join("results.csv"))).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], netcate::evalmetrics::RESULTS_HEADER);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "gcn-mmd");
    assert_eq!(fields[1], "ds");
    assert_eq!(fields[2], "3");
    assert_eq!(fields[3], "0.5");
    // Single seed: both standard deviations are exactly zero.
    assert_eq!(fields[5], "0");
    assert_eq!(fields[7], "0");
    assert!(stdout(&evaluated).contains("| model | dataset | K | sqrt PEHE | ATE error |"));

    let missing = netcate(&[
        "evaluate",
        "--model",
        "gcn-mmd",
        "--dataset",
        ds.to_str().unwrap(),
        "--seeds",
        "1,9",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("missing file"));
}

#[test]
fn sweep_resumes_without_recomputing_finished_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep_out = tmp.path().join("sweep");
    let config = tmp.path().join("sweep.conf");
    std::fs::write(
        &config,
        format!(
            "dataset.synthetic_sbm = \"n=40,c=2,vocab=6,mean_tokens=5\"\n\
             sim.k = 2\n\
             sim.topics = 3\n\
             model.rep_layers = [4]\n\
             model.head_layers = [3]\n\
             train.max_epochs = 3\n\
             train.patience = 0\n\
             train.val_fraction = 0\n\
             models = [\"tarnet\", \"cfrnet-mmd\"]\n\
             seeds = [1]\n\
             output = {}\n",
            sweep_out.display()
        ),
    )
    .unwrap();

    let first = netcate(&["sweep", "--config", config.to_str().unwrap()]);
    assert_success(&first);
    assert!(stdout(&first).contains("2 cells total, 0 already recorded, 2 to run"));
    let cells_after_first = read(&sweep_out.join("cells.csv"));
    let body = String::from_utf8(cells_after_first.clone()).unwrap();
    // Header, schema stamp, one line per cell.
    assert_eq!(body.lines().count(), 4);
    assert!(body.starts_with("dataset,model,seed,sqrt_pehe,ate_error\n# schema "));

    let second = netcate(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--seeds",
        "1,2",
        "--jobs",
        "2",
    ]);
    assert_success(&second);
    assert!(stdout(&second).contains("4 cells total, 2 already recorded, 2 to run"));
    let cells_after_second = read(&sweep_out.join("cells.csv"));
    assert_eq!(
        &cells_after_second[..cells_after_first.len()],
        &cells_after_first[..],
        "resume must append, not rewrite"
    );
    let rows = String::from_utf8(cells_after_second).unwrap();
    assert_eq!(rows.lines().count(), 6);

    let third = netcate(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--seeds",
        "1,2",
    ]);
    assert_success(&third);
    assert!(stdout(&third).contains("4 cells total, 4 already recorded, 0 to run"));

    let results = String::from_utf8(read(&sweep_out.join("results.csv"))).unwrap();
    assert_eq!(results.lines().count(), 3, "two models, one dataset:\n{results}");
    assert!(stdout(&third).contains("#### k2 = 0.5"));

    // Empty seed list is a usage error.
    std::fs::write(
        &config,
        "dataset.synthetic_sbm = \"n=40,c=2,vocab=6\"\nseeds = []\n",
    )
    .unwrap();
    let empty = netcate(&["sweep", "--config", config.to_str().unwrap()]);
    assert_eq!(empty.status.code(), Some(2), "stderr: {}", stderr(&empty));
}
