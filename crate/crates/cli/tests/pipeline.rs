use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use salt_cli::pipeline::{sha256_hex, sidecar, RoleEval, Workspace};
use salt_cli::{ExperimentConfig, Role};
use salt_core::diagnostics::REPORT_KEYS;
use salt_core::evalx::{bucket_partition, per_bucket_metrics};
use salt_core::synth::Corpus;
use serde_json::Value;

fn smoke_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn workspace(dir: &Path, overrides: &[&str]) -> Workspace {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let mut ws = Workspace::new(ExperimentConfig::load(&smoke_path(), &o).unwrap(), dir);
    ws.quiet = true;
    ws
}

/// One full smoke run shared by the read-only checks below.
fn full_run() -> &'static Workspace {
    static RUN: OnceLock<(tempfile::TempDir, Workspace)> = OnceLock::new();
    let (_, ws) = RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let ws = workspace(dir.path(), &[]);
        ws.run_all(&Role::LARGE).unwrap();
        (dir, ws)
    });
    ws
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn every_artifact_carries_provenance() {
    let ws = full_run();
    let corpus_hash = sha256_hex(&fs::read(ws.train_corpus_path()).unwrap());
    let config_hash = ws.cfg.hash();
    let mut plain = vec![
        ws.train_corpus_path(),
        ws.heldout_corpus_path(),
        ws.early_teacher_path(),
        ws.scores_path(),
        ws.selected_path(),
        ws.selected_corpus_path(),
        ws.buckets_path(),
        ws.comparison_path(),
        ws.sweep_path(),
    ];
    for role in Role::ALL {
        plain.extend([ws.model_path(role), ws.metrics_path(role), ws.curve_path(role), ws.role_buckets_path(role)]);
    }
    for p in &plain {
        let meta = json(&sidecar(p));
        assert_eq!(meta["sha256"], sha256_hex(&fs::read(p).unwrap()), "{}", p.display());
        assert_eq!(meta["config_hash"], config_hash.as_str());
        assert_eq!(meta["corpus_hash"], corpus_hash.as_str());
    }
    let mut with_hashes = vec![ws.manifest_path(), ws.report_path()];
    with_hashes.extend(Role::ALL.map(|r| ws.eval_path(r)));
    for p in with_hashes {
        let v = json(&p);
        assert_eq!(v["config_hash"], config_hash.as_str(), "{}", p.display());
        assert_eq!(v["corpus_hash"], corpus_hash.as_str(), "{}", p.display());
    }
}

#[test]
fn comparison_rows_share_one_corpus() {
    let ws = full_run();
    let text = fs::read_to_string(ws.comparison_path()).unwrap();
    let hashes: Vec<&str> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(hashes.len(), Role::ALL.len());
    assert!(hashes.iter().all(|h| *h == hashes[0]));
}

#[test]
fn curves_are_step_ordered() {
    let ws = full_run();
    for role in Role::ALL {
        let text = fs::read_to_string(ws.curve_path(role)).unwrap();
        let steps: Vec<usize> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(!steps.is_empty() && steps.windows(2).all(|w| w[0] < w[1]), "{role}");
    }
}

#[test]
fn report_has_every_key() {
    let v = json(&full_run().report_path());
    for k in REPORT_KEYS {
        assert!(v.get(k).is_some(), "missing {k}");
    }
}

#[test]
fn bucket_tables_match_direct_evaluation() {
    let ws = full_run();
    let heldout = ws.load_heldout().unwrap();
    let buckets = bucket_partition(&ws.load_model(Role::Slm).unwrap(), &heldout).unwrap();
    assert_eq!(fs::read_to_string(ws.buckets_path()).unwrap(), buckets.to_csv());
    let ev: RoleEval = serde_json::from_slice(&fs::read(ws.eval_path(Role::Salt)).unwrap()).unwrap();
    let direct = per_bucket_metrics(&ws.load_model(Role::Salt).unwrap(), &heldout, &buckets).unwrap();
    assert_eq!(ev.final_model.buckets, direct);
    assert_eq!(ev.snapshot.unwrap().step, ws.cfg.kd.kd_steps);
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), &[]);
    let first = ws.gen_data().unwrap();
    let bytes = fs::read(ws.train_corpus_path()).unwrap();
    assert_eq!(ws.gen_data().unwrap(), first);
    assert_eq!(fs::read(ws.train_corpus_path()).unwrap(), bytes);
    assert_eq!(ws.read_manifest().unwrap(), first);
}

#[test]
fn missing_prerequisite_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), &[]);
    let err = format!("{:#}", ws.train(Role::Salt).unwrap_err());
    assert!(err.contains("missing") && err.contains("gen-data"), "{err}");
    ws.gen_data().unwrap();
    let err = format!("{:#}", ws.train(Role::Salt).unwrap_err());
    assert!(err.contains("slm.ckpt") && err.contains("train --role slm"), "{err}");
}

#[test]
fn undersized_selection_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), &["selection.m=10"]);
    ws.gen_data().unwrap();
    ws.train(Role::Slm).unwrap();
    ws.score().unwrap();
    ws.select().unwrap();
    let err = format!("{:#}", ws.train(Role::SaltDs).unwrap_err());
    // kd_steps 30 x batch 16
    assert!(err.contains("30 x 16 = 480") && err.contains("m = 10"), "{err}");
}

#[test]
fn selecting_everything_reorders_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), &["selection.m=512", "selection.k=8"]);
    ws.gen_data().unwrap();
    ws.train(Role::Slm).unwrap();
    let records = ws.score().unwrap();
    // k = V keeps every position
    assert!(records.iter().all(|r| r.kept_tokens == 8 && r.score.is_some()));
    let chosen = ws.select().unwrap();
    let mut sorted = chosen.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..512).collect::<Vec<_>>());
    let scores: Vec<f64> = chosen.iter().map(|&i| records[i].score.unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let subset = Corpus::load(&ws.selected_corpus_path()).unwrap();
    let train = ws.load_train().unwrap();
    for (rank, &i) in chosen.iter().enumerate() {
        assert_eq!(subset.get(rank), train.get(i));
    }
}

#[test]
fn source_as_teacher_has_no_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), &["diagnostics.teacher=source", "diagnostics.student=baseline", "kd.rho=1.0"]);
    ws.gen_data().unwrap();
    ws.train(Role::Slm).unwrap();
    ws.train(Role::Baseline).unwrap();
    let report = ws.diagnose().unwrap();
    assert!(report.exact);
    assert_eq!(report.div_term.value, 0.0);
    assert_eq!(report.risk_gap.unwrap().rhs, 0.0);
}

fn salt(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_salt")).args(args).output().unwrap()
}

#[test]
fn cli_rejects_distilling_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_path();
    let out_dir = dir.path().to_str().unwrap();
    let base = ["-q", "-c", cfg.to_str().unwrap(), "-o", out_dir];
    assert!(salt(&[&base[..], &["gen-data"]].concat()).status.success());
    let out = salt(&[&base[..], &["-s", "roles.baseline.omega=0.5", "train", "--role", "baseline"]].concat());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("roles.baseline.omega"), "{err}");
}

#[test]
fn cli_show_config_applies_overrides() {
    let cfg = smoke_path();
    let out = salt(&["-c", cfg.to_str().unwrap(), "-s", "kd.omega=0.5", "show-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed = ExperimentConfig::from_toml(&text, &[]).unwrap();
    assert_eq!(parsed.kd.omega, 0.5);
}
