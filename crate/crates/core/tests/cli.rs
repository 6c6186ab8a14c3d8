//! End-to-end runs of the `mrp-lab` binary on the smoke configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mrp_lab::experiment::ComparisonReport;
use mrp_lab::io::{load_checkpoint, load_dataset};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml")
}

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrp-lab")).args(args).output().expect("spawn mrp-lab")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn compare_writes_a_consistent_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = lab(&["compare", "--config", smoke().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    for f in ["config.toml", "comparison.json", "dataset_summary.json", "candidate_sets.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    for p in ["ts_mrp", "mae_mrp"] {
        for f in ["pretrain_trace.csv", "capture.json", "encoder.ckpt", "finetune_trace.csv", "model.ckpt", "eval.json"] {
            assert!(out.join(p).join(f).is_file(), "missing {p}/{f}");
        }
    }
    assert!(!out.join("supervised/encoder.ckpt").exists());

    let report: ComparisonReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(report.pipelines.len(), 3);
    assert_eq!(report.single_view_gaps.len(), 2);
    assert!(report.is_consistent());
    assert!(report.timings.is_none());

    // the echoed config reproduces the run
    let again = tmp.path().join("again");
    let o = lab(&["compare", "--config", out.join("config.toml").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(out.join("comparison.json")).unwrap(),
        std::fs::read(again.join("comparison.json")).unwrap()
    );
}

#[test]
fn existing_output_is_refused_unless_asked() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gen");
    let cfg = smoke();
    let args = ["generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert!(lab(&args).status.success());

    let o = lab(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("exists"), "{}", stderr(&o));

    let mut versioned = args.to_vec();
    versioned.push("--versioned");
    assert!(lab(&versioned).status.success());
    assert!(tmp.path().join("gen-1/data/test.bin").is_file());

    let mut overwrite = args.to_vec();
    overwrite.push("--overwrite");
    assert!(lab(&overwrite).status.success());
}

#[test]
fn generated_splits_load_back() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gen");
    let o = lab(&["generate", "--config", smoke().to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "99"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (pre, dict, seed) = load_dataset(&out.join("data/pretrain.bin")).unwrap();
    assert_eq!(seed, Some(99));
    assert_eq!(pre.len(), 200);
    assert_eq!(dict.k(), 4);
    let (test, dict2, _) = load_dataset(&out.join("data/test.bin")).unwrap();
    assert_eq!(test.len(), 400);
    assert_eq!(dict, dict2);
}

#[test]
fn staged_commands_chain_through_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let cfg = cfg.to_str().unwrap();
    let pre = tmp.path().join("pre");
    let o = lab(&["pretrain", "--config", cfg, "--out", pre.to_str().unwrap(), "--pipeline", "ts-mrp"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let enc = pre.join("ts_mrp/encoder.ckpt");
    let (w, head, _) = load_checkpoint(&enc).unwrap();
    assert!(head.is_none());
    assert_eq!(w.num_kernels(), 12);

    let ft = tmp.path().join("ft");
    let o = lab(&[
        "finetune", "--config", cfg, "--out", ft.to_str().unwrap(), "--pipeline", "ts-mrp",
        "--encoder", enc.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let ev = tmp.path().join("ev");
    let model = ft.join("ts_mrp/model.ckpt");
    let o = lab(&["evaluate", "--config", cfg, "--out", ev.to_str().unwrap(), "--model", model.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(ev.join("eval.json")).unwrap(),
        std::fs::read(ft.join("ts_mrp/eval.json")).unwrap()
    );
}

#[test]
fn bad_inputs_fail_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ft");
    let o = lab(&["finetune", "--config", smoke().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--encoder"));
    assert!(!out.exists());

    let o = lab(&["accept", "nonsense", "--out", tmp.path().join("acc").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("oracle"), "{}", stderr(&o));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[data]\nk = 0\n").unwrap();
    let o = lab(&["generate", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}
