use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tabform_cli::presets::preset;

fn tabform(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabform")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = tabform(args);
    assert!(o.status.success(), "tabform {args:?} failed: {}", stderr(&o));
    o
}

/// A small copy of a built-in preset written as a config file.
fn small_config(dir: &Path, name: &str, entities: usize, edit: impl FnOnce(&mut tabform_cli::RunConfig)) -> String {
    let mut cfg = preset(name).unwrap();
    cfg.dataset.synthetic.as_mut().unwrap().n_entities = entities;
    cfg.pretrain.epochs = 1;
    cfg.finetune.epochs = 1;
    cfg.seeds = vec![1];
    edit(&mut cfg);
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

#[test]
fn help_and_usage_errors() {
    ok(&["--help"]);
    assert!(!tabform(&["no-such-command"]).status.success());
    let o = tabform(&["prepare"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--config"));
    let o = tabform(&["--config", "preset:nope", "prepare"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("tiny-probe"), "should list presets: {}", stderr(&o));
}

#[test]
fn missing_raw_file_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.csv");
    let o = tabform(&["--config", "preset:pollution-ref", "--data", s(&missing), "--out", s(tmp.path()), "prepare"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("absent.csv"), "{}", stderr(&o));
}

#[test]
fn prepare_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "tiny-regression", 40, |_| {});
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["--config", &cfg, "--out", s(&a), "prepare"]);
    ok(&["--config", &cfg, "--out", s(&b), "prepare"]);
    let mut compared = 0;
    for entry in fs::read_dir(a.join("data")).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "run.json" {
            continue; // echoes the output directory
        }
        assert_eq!(fs::read(a.join("data").join(&name)).unwrap(), fs::read(b.join("data").join(&name)).unwrap(), "{name:?}");
        compared += 1;
    }
    assert!(compared >= 4);
}

#[test]
fn unknown_split_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "tiny-regression", 40, |_| {});
    ok(&["--config", &cfg, "--out", s(tmp.path()), "prepare"]);
    let o = tabform(&["--config", &cfg, "--out", s(tmp.path()), "evaluate", "--split", "holdout"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("holdout"), "{}", stderr(&o));
}

#[test]
fn bench_reports_closed_form_counts() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["--config", "preset:tiny-regression", "--out", s(tmp.path()), "--family", "ft_flat,fieldy", "bench", "--grid", "10x16", "--grid", "4x5"]);
    let csv = fs::read_to_string(tmp.path().join("bench").join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("family,rows,cols,stage"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.iter().all(|r| r[9] == "true"), "{csv}");
    let flat = rows.iter().find(|r| r[0] == "ft_flat" && r[1] == "10" && r[2] == "16" && r[3] == "1").unwrap();
    assert_eq!(flat[8], "25600");
    let fieldy2 = rows.iter().find(|r| r[0] == "fieldy" && r[1] == "10" && r[2] == "16" && r[3] == "2").unwrap();
    assert_eq!(fieldy2[8], "25600");
}

#[test]
fn seeds_flag_gives_one_run_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "tiny-regression", 40, |c| c.families = vec![tabform::arch::Family::TabbertRow]);
    let out = tmp.path().join("out");
    ok(&["--config", &cfg, "--out", s(&out), "prepare"]);
    ok(&["--config", &cfg, "--out", s(&out), "--seeds", "1,2", "pretrain"]);
    for seed in [1, 2] {
        assert!(out.join("pretrain/tabbert_row").join(format!("seed-{seed}")).join("best.ckpt").is_file());
    }
    assert!(!out.join("pretrain/tabbert_row/seed-3").exists());
}

#[test]
fn finetune_warns_without_pretraining_and_refuses_foreign_vocab() {
    let tmp = tempfile::tempdir().unwrap();
    let fam = |c: &mut tabform_cli::RunConfig| c.families = vec![tabform::arch::Family::Fieldy];
    let cfg = small_config(tmp.path(), "tiny-regression", 40, fam);
    let out = tmp.path().join("out");
    ok(&["--config", &cfg, "--out", s(&out), "prepare"]);
    let o = ok(&["--config", &cfg, "--out", s(&out), "finetune"]);
    assert!(stderr(&o).contains("random initialization"), "{}", stderr(&o));
    let metrics = read_json(out.join("finetune/fieldy/seed-1/metrics.json"));
    assert_eq!(metrics["metric"], "rmse");

    // Pretrain on data with different columns, then try to fine-tune from it.
    let other_cfg = small_config(tmp.path(), "tiny-probe", 40, fam);
    let other = tmp.path().join("other");
    ok(&["--config", &other_cfg, "--out", s(&other), "prepare"]);
    ok(&["--config", &other_cfg, "--out", s(&other), "pretrain"]);
    let o = tabform(&["--config", &cfg, "--out", s(&out), "finetune", "--from", s(&other.join("pretrain"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("different vocabulary"), "{}", stderr(&o));
}

#[test]
fn probe_needs_the_hour_column() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "tiny-regression", 40, |_| {});
    ok(&["--config", &cfg, "--out", s(tmp.path()), "prepare"]);
    let o = tabform(&["--config", &cfg, "--out", s(tmp.path()), "probe"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("\"Hour\""), "{}", stderr(&o));
}

#[test]
fn probe_report_lists_families_and_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "tiny-probe", 60, |c| c.probe.n_sequences = 10);
    let out = tmp.path().join("out");
    ok(&["--config", &cfg, "--out", s(&out), "prepare"]);
    ok(&["--config", &cfg, "--out", s(&out), "pretrain"]);
    ok(&["--config", &cfg, "--out", s(&out), "probe"]);
    let report = read_json(out.join("probe/report.json"));
    let run = read_json(out.join("probe/run.json"));
    assert_eq!(report["config_hash"], run["config_hash"]);
    assert_eq!(report["seeds"], serde_json::json!([1]));
    let rows = report["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["model"].as_str().unwrap()).collect();
    assert_eq!(names, ["fieldy", "tabbert_row", "oracle_copy", "uniform"]);
    let oracle = &rows[2];
    assert_eq!(oracle["median"], 1.0);
    for row in rows {
        let acc = row["seeds"][0]["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
