use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const FACTOR_046: &str = "IfElse(Greater(Std($returns, 12), Mean(Std($returns, 12), 48)), Neg(CsRank(Delta($close, 3))), Neg(CsRank(Div(Sub($close, $low), Add(Sub($high, $low), 0.0001)))))";

fn alphaloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alphaloop"))
        .args(args)
        .env_remove("ALPHALOOP_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = alphaloop(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, assets: &str, bars: &str) -> String {
    let p = dir.join("panel.csv").display().to_string();
    ok(&["synth", "--assets", assets, "--bars", bars, "--seed", "3", "--alpha", "0.3", "-o", &p]);
    p
}

#[test]
fn synth_then_eval_writes_tear_sheet() {
    let dir = tempfile::tempdir().unwrap();
    let panel = synth(dir.path(), "12", "400");
    let out = dir.path().join("eval");
    let stdout = ok(&["eval", "--panel", &panel, "--formula", FACTOR_046, "-o", out.to_str().unwrap()]);
    let summary: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(summary["ic_mean"].as_f64().unwrap().is_finite());

    let sheet = fs::read_to_string(out.join("tear_sheet.csv")).unwrap();
    let mut lines = sheet.lines();
    assert_eq!(
        lines.next().unwrap(),
        "formula,ic_mean,icir,daily_win_rate,q1_return,qN_return,ls_return,ls_cumulative,monotonicity,avg_turnover"
    );
    assert!(lines.next().unwrap().starts_with("\"IfElse("));
    let ic = fs::read_to_string(out.join("ic_series.csv")).unwrap();
    assert_eq!(ic.lines().count(), 401);
    let q = fs::read_to_string(out.join("quantile_returns.csv")).unwrap();
    assert_eq!(q.lines().count(), 6);
    assert!(out.join("long_short.csv").exists());
}

fn write_manifest(dir: &Path) -> String {
    let cfg = dir.join("run.json");
    fs::write(
        &cfg,
        r#"{
  "panel": {"synth": {"n_assets": 16, "n_bars": 300, "seed": 5, "alpha_strength": 0.3}},
  "mining": {"target_size": 4, "max_batches": 4, "batch_size": 16, "fast_assets": 8, "full_assets": 16, "seed": 9},
  "output_dir": "out"
}"#,
    )
    .unwrap();
    cfg.display().to_string()
}

#[test]
fn mining_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_manifest(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["mine", "--config", &cfg, "--workers", "1", "-o", a.to_str().unwrap()]);
    ok(&["mine", "--config", &cfg, "--workers", "4", "-o", b.to_str().unwrap()]);
    for f in ["library.tsv", "memory.json", "run_log.jsonl"] {
        let x = fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty(), "{f} empty");
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    // The default output directory comes from the manifest.
    ok(&["mine", "--config", &cfg]);
    assert!(dir.path().join("out/library.tsv").exists());
}

#[test]
fn ablate_writes_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_manifest(dir.path());
    let out = dir.path().join("ab");
    ok(&["ablate", "--config", &cfg, "-o", out.to_str().unwrap()]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mode,generated,high_quality,yield_pct,rejected_redundant,rejection_pct,admitted");
    assert!(lines[1].starts_with("with_memory,"));
    assert!(lines[2].starts_with("no_memory,"));
    assert!(out.join("no_memory/run_log.jsonl").exists());
}

#[test]
fn combine_select_and_stress_on_mined_library() {
    let dir = tempfile::tempdir().unwrap();
    let panel = synth(dir.path(), "16", "300");
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"panel": {"csv": "panel.csv"},
            "mining": {"target_size": 4, "max_batches": 6, "batch_size": 16, "fast_assets": 8, "full_assets": 16}}"#,
    )
    .unwrap();
    let lib_dir = dir.path().join("lib");
    ok(&["mine", "--config", cfg.to_str().unwrap(), "-o", lib_dir.to_str().unwrap()]);
    let lib = lib_dir.join("library.tsv").display().to_string();

    let comb = dir.path().join("comb");
    ok(&["combine", "--panel", &panel, "--library", &lib, "--split", "200", "-o", comb.to_str().unwrap()]);
    let csv = fs::read_to_string(comb.join("combination.csv")).unwrap();
    let methods: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["equal", "ic_weighted", "orthogonal"]);

    let lasso = dir.path().join("lasso.csv");
    ok(&["select", "--panel", &panel, "--library", &lib, "--method", "lasso", "-o", lasso.to_str().unwrap()]);
    assert!(fs::read_to_string(&lasso)
        .unwrap()
        .starts_with("rank,factor_id,coefficient,abs_coefficient\n"));

    let step = dir.path().join("step.csv");
    let design = dir.path().join("design.csv");
    ok(&[
        "select", "--panel", &panel, "--library", &lib, "--method", "stepwise", "--max-steps", "3",
        "--export-design", design.to_str().unwrap(), "-o", step.to_str().unwrap(),
    ]);
    assert!(fs::read_to_string(&step).unwrap().starts_with("step,factor_id,"));
    let header = fs::read_to_string(&design).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("time,asset,f_") && header.ends_with(",target"));

    let stress = dir.path().join("stress.csv");
    ok(&["stress", "--panel", &panel, "--formula", FACTOR_046, "-o", stress.to_str().unwrap()]);
    let text = fs::read_to_string(&stress).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "time,net_0bps,net_1bps,net_4bps,net_7bps,net_10bps,net_11bps"
    );
    assert_eq!(text.lines().count(), 301);
}

#[test]
fn bench_emits_schema() {
    let stdout = ok(&["bench", "--assets", "6", "--bars", "200", "--window", "10", "--formula", "Neg(TsRank($close, 5))"]);
    let mut lines = stdout.lines();
    assert_eq!(lines.next().unwrap(), "name,kind,backend,median_ms,speedup_vs_naive");
    let rows: Vec<&str> = lines.collect();
    assert!(rows.iter().any(|r| r.starts_with("TsRank,operator,optimized,")));
    assert!(rows.iter().any(|r| r.contains(",factor,naive,")));
}

#[test]
fn errors_are_single_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let panel = synth(dir.path(), "4", "50");
    let out = dir.path().join("x");

    let bad = alphaloop(&["eval", "--panel", &panel, "--formula", "Foo($close)", "-o", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    let stderr = String::from_utf8(bad.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(v["error"], "runtime");
    assert!(v["message"].as_str().unwrap().contains("Foo"));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"panel": {"csv": "panel.csv"}, "mining": {"batch_sise": 3}}"#).unwrap();
    let bad = alphaloop(&["mine", "--config", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&bad.stderr).unwrap();
    let msg = v["message"].as_str().unwrap();
    assert!(msg.contains("mining") && msg.contains("batch_sise"), "{msg}");

    let usage = alphaloop(&["frobnicate"]);
    assert_eq!(usage.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&usage.stderr).unwrap();
    assert_eq!(v["error"], "usage");

    assert!(alphaloop(&["--help"]).status.success());
}
