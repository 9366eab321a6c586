use std::path::Path;
use std::process::{Command, Output};

use lmn_core::data::{load_jsonl_with_vocab, DatasetMeta};
use lmn_core::pcn::{mean_cross_entropy, pcn_load, PcnModel};

fn lmn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmn"))
        .current_dir(dir)
        .env_remove("LMN_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL_SEQ: &[&str] = &[
    "--task", "repeat_markov", "--num-labels", "30", "--episodes", "12", "--test-episodes", "4",
    "--val-episodes", "3", "--min-len", "15", "--max-len", "25",
];

fn seq_pipeline(dir: &Path) {
    let mut args = vec!["gen-data", "--seed", "4", "--out", "o"];
    args.extend_from_slice(SMALL_SEQ);
    ok(&lmn(dir, &args));
    ok(&lmn(dir, &["train-pcn", "--seed", "4", "--out", "o", "--epochs", "2"]));
}

#[test]
fn gradcheck_reports_every_suite_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&lmn(dir.path(), &["gradcheck", "--instances", "4"]));
    for suite in ["gru", "softmax_ce", "mlp", "combiner_gate"] {
        let line = text.lines().find(|l| l.starts_with(suite)).expect(suite);
        assert!(line.contains("max_rel_error") && line.ends_with("ok"), "{line}");
    }
}

#[test]
fn gradcheck_fails_with_impossible_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmn(dir.path(), &["gradcheck", "--instances", "2", "--tol", "1e-30"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn missing_seed_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmn(dir.path(), &["train-pcn"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`seed`"));
}

#[test]
fn unknown_flag_exits_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = lmn(dir.path(), &["run-online", "--no-such-flag", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(lmn(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn config_violation_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    seq_pipeline(dir.path());
    let out = lmn(dir.path(), &["run-online", "--seed", "1", "--out", "o", "--capacity", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("capacity"));

    std::fs::write(dir.path().join("c.cfg"), "# comment\nmodes = lmn\n").unwrap();
    let out = lmn(dir.path(), &["run-online", "--seed", "1", "--out", "o", "--config", "c.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`modes`"));
}

#[test]
fn pcn_only_log_perplexity_matches_direct_cross_entropy() {
    let dir = tempfile::tempdir().unwrap();
    seq_pipeline(dir.path());
    ok(&lmn(dir.path(), &["run-online", "--seed", "4", "--out", "o", "--mode", "pcn_only"]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/report.json")).unwrap()).unwrap();
    let o = dir.path().join("o");
    let meta = DatasetMeta::load(&o.join("test.meta.json")).unwrap();
    let ds = load_jsonl_with_vocab(&o.join("test.jsonl"), meta.vocab().unwrap()).unwrap();
    let pcn: PcnModel<f64> = pcn_load(&o.join("pcn.ckpt")).unwrap();
    let ce = mean_cross_entropy(&pcn, &ds).unwrap();
    let lp = report["log_perplexity"].as_f64().unwrap();
    assert!((lp - ce).abs() < 1e-9, "{lp} vs {ce}");
}

#[test]
fn outputs_are_written_and_replayable_from_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    seq_pipeline(dir.path());
    let d = dir.path();
    ok(&lmn(d, &["train-combiner", "--seed", "4", "--out", "o", "--epochs", "1"]));
    ok(&lmn(d, &["run-online", "--seed", "4", "--out", "o", "--mode", "lmn", "--combiner", "o/combiner.ckpt"]));
    for f in ["trace.tsv", "report.txt", "report.json", "config.resolved", "combiner.ckpt"] {
        assert!(d.join("o").join(f).exists(), "{f}");
    }
    let trace = std::fs::read_to_string(d.join("o/trace.tsv")).unwrap();
    assert!(trace.starts_with("episode\tt\ty_true\ty_pred\tnll\trank\ttheta_mean\tgated\treplaced\n"));
    let first = std::fs::read(d.join("o/report.json")).unwrap();

    std::fs::copy(d.join("o/config.resolved"), d.join("replay.cfg")).unwrap();
    ok(&lmn(d, &["run-online", "--config", "replay.cfg", "--out", "o2"]));
    assert_eq!(first, std::fs::read(d.join("o2/report.json")).unwrap());

    let wrong = lmn(d, &["train-pcn", "--config", "replay.cfg"]);
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn ablation_tables_in_three_formats() {
    let dir = tempfile::tempdir().unwrap();
    seq_pipeline(dir.path());
    let text = ok(&lmn(
        dir.path(),
        &["ablate", "--seed", "4", "--out", "o", "--modes", "pcn_only,lmn_fixed", "--policies", "label_partitioned"],
    ));
    assert_eq!(text.lines().count(), 3);
    let csv = std::fs::read_to_string(dir.path().join("o/table.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("mode,policy,logppl,mrr,acc,acc_seen,acc_unseen"));
    assert_eq!(csv.lines().count(), 3);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/table.json")).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 2);
}

#[test]
fn failed_training_keeps_the_existing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    seq_pipeline(dir.path());
    let ckpt = dir.path().join("o/pcn.ckpt");
    let before = std::fs::read(&ckpt).unwrap();
    let out = lmn(dir.path(), &["train-pcn", "--seed", "9", "--out", "o", "--train", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(before, std::fs::read(&ckpt).unwrap());
}

#[test]
fn lmn_out_sets_the_default_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lmn"))
        .current_dir(dir.path())
        .env("LMN_OUT", "from_env")
        .args(["gen-data", "--seed", "2"])
        .args(SMALL_SEQ)
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("from_env/train.jsonl").exists());
    assert!(dir.path().join("from_env/train.meta.json").exists());
}

#[test]
fn label_stream_generation_keeps_the_split() {
    let dir = tempfile::tempdir().unwrap();
    ok(&lmn(
        dir.path(),
        &["gen-data", "--seed", "3", "--out", "o", "--task", "label_stream", "--num-labels", "8", "--seen", "5", "--unseen", "3", "--episodes", "4", "--test-episodes", "3", "--picks", "3", "--draws", "6"],
    ));
    let meta = DatasetMeta::load(&dir.path().join("o/test.meta.json")).unwrap();
    assert_eq!(meta.labels.len(), 8);
    assert_eq!(meta.unseen, vec!["c5", "c6", "c7"]);
    ok(&lmn(dir.path(), &["train-pcn", "--seed", "3", "--out", "o", "--epochs", "1"]));
    ok(&lmn(
        dir.path(),
        &["run-online", "--seed", "3", "--out", "o", "--mode", "pcn_only", "--trained-rows-only", "--second-occurrence-only"],
    ));
    let report = std::fs::read_to_string(dir.path().join("o/report.txt")).unwrap();
    assert!(report.contains("second_occurrence_only: true"));
}

#[test]
fn same_seed_same_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        seq_pipeline(d);
        ok(&lmn(d, &["run-online", "--seed", "4", "--out", "o"]));
    }
    for f in ["train.jsonl", "pcn.ckpt", "trace.tsv", "report.json"] {
        assert_eq!(
            std::fs::read(a.path().join("o").join(f)).unwrap(),
            std::fs::read(b.path().join("o").join(f)).unwrap(),
            "{f}"
        );
    }
}
