use std::fs;
use std::path::Path;
use std::process::Command;

use myoseg_core::config::ExperimentConfig;

fn myoseg(args: &[&str], dir: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_myoseg")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) {
    let mut cfg = ExperimentConfig { n_train: 1, n_test: 2, phantom_dims: [32; 3], ..ExperimentConfig::default() };
    cfg.train.iterations = 2;
    cfg.train.batch_size = 1;
    cfg.train.patch_size = 16;
    cfg.arch.base_channels = 2;
    cfg.arch.num_res_blocks = 1;
    fs::write(dir.join("tiny.cfg"), cfg.to_text()).unwrap();
}

#[test]
fn subcommands_chain_together() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_config(d);
    myoseg(&["phantom", "gen", "--config", "tiny.cfg", "--out", "ph"], d);
    for f in ["train_000_image.mhd", "train_000_labels.raw", "test_001_image.raw", "test_001_labels.mhd"] {
        assert!(d.join("ph").join(f).exists(), "{}", f);
    }
    myoseg(&["train", "--config", "tiny.cfg", "--strategy", "compartment", "--out", "m.ckpt", "--loss-log", "loss.csv"], d);
    assert_eq!(fs::read_to_string(d.join("loss.csv")).unwrap().lines().count(), 3);
    myoseg(&["infer", "--ckpt", "m.ckpt", "--image", "ph/test_000_image.mhd", "--out", "pred.mhd", "--probs", "probs"], d);
    assert!(d.join("probs/class_7.mhd").exists());
    let said = myoseg(
        &["evaluate", "--pred", "pred.mhd", "--ref", "ph/test_000_labels.mhd", "--image", "ph/test_000_image.mhd", "--out", "eval.csv", "--verbose"],
        d,
    );
    assert!(said.contains("largest component"));
    let csv = fs::read_to_string(d.join("eval.csv")).unwrap();
    assert!(csv.starts_with("case_id,experiment,dsc,assd_mm,bloodpool_mean_hu,flag\n"));

    let mut metrics = String::from("case_id,experiment,dsc,assd_mm,bloodpool_mean_hu,flag\n");
    for i in 0..5 {
        for (e, name) in ["exp1", "exp2", "exp3", "exp4"].iter().enumerate() {
            metrics += &format!("test_{:03},{},{},1.0,{},\n", i, name, 0.5 + 0.1 * e as f64 + 0.01 * i as f64, 300 + 10 * i);
        }
    }
    fs::write(d.join("metrics.csv"), metrics).unwrap();
    myoseg(&["stats", "--metrics", "metrics.csv", "--out", "stats.csv"], d);
    let stats = fs::read_to_string(d.join("stats.csv")).unwrap();
    assert!(stats.contains("exp1_vs_exp2") && stats.contains("friedman"));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.cfg"), "n_train = 3\nbogus_key = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_myoseg"))
        .args(["phantom", "gen", "--config", "bad.cfg", "--out", "x"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("line 2"), "{}", err);
}
