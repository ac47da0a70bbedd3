use std::path::Path;
use std::process::{Command, Output};

use vibcorr::correlations::Detector;
use vibcorr::trace_io::read_trace;
use vibcorr::{BathParams, PropagatorConfig, VibronicParams};
use vibcorr_cli::config::{parse_config_str, Anchor, SystemAxis, TaskKind, DEFAULTS_TOML};

fn vibcorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vibcorr")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

/// Closed three-level model, short windows: seconds per run.
const SMALL: &str = r#"
[model]
n_levels = 3
delta = 0.8

[bath]
eta_cm1 = 0.0

[propagator]
record_stride = 40

[task]
kind = "g2"
first = "phonon"
second = "photon"
t_end_ps = 0.3
tau_end_ps = 0.2
t_anchor_ps = 0.1
normalize = false
"#;

#[test]
fn defaults_file_is_the_documented_parameter_set() {
    let cfg = parse_config_str(DEFAULTS_TOML).unwrap();
    assert_eq!(cfg.params, VibronicParams::default());
    assert_eq!(cfg.params.lambda_reorg(), 360.0);
    assert_eq!(cfg.bath, BathParams::default());
    assert_eq!(cfg.propagator, PropagatorConfig::default());
    assert_eq!(cfg.pre_equilibration_fs, 2000.0);
    assert_eq!(cfg.task.kind, TaskKind::G2);
    assert_eq!(cfg.task.t_anchor, Anchor::Steady);
    assert_eq!((cfg.task.first, cfg.task.second), (Detector::Photon, Detector::Photon));
    assert!(cfg.scan.is_none());
    // every key spelled out equals the built-in defaults
    assert_eq!(parse_config_str("[task]\nkind = \"g2\"\n").unwrap(), cfg);
}

#[test]
fn missing_or_empty_task_is_rejected() {
    let e = parse_config_str("[model]\nn_levels = 4\n").unwrap_err();
    assert!(e.message.contains("task required"), "{e}");
    let e = parse_config_str("[model]\nn_levels = 4\n\n[task]\n").unwrap_err();
    assert!(e.message.contains("task required"), "{e}");
    assert_eq!(e.line, Some(4));
}

#[test]
fn unknown_keys_report_their_line() {
    let e = parse_config_str("[task]\nkind = \"g2\"\n\n[bath]\neta_cm1 = 5.0\neta = 3.0\n").unwrap_err();
    assert_eq!(e.line, Some(6), "{e}");
    assert!(e.message.contains("eta"), "{e}");
    let e = parse_config_str("[task]\nkind = \"g3\"\n").unwrap_err();
    assert_eq!(e.line, Some(2), "{e}");
}

#[test]
fn displacement_and_reorganization_must_agree() {
    let e = parse_config_str("[model]\ndelta = 1.2\nlambda_cm1 = 300.0\n[task]\nkind = \"g1\"\n").unwrap_err();
    assert_eq!(e.line, Some(3), "{e}");
    assert!(e.message.contains("lambda_cm1"), "{e}");
    let ok = parse_config_str("[model]\ndelta = 1.2\nlambda_cm1 = 360.0\n[task]\nkind = \"g1\"\n").unwrap();
    assert_eq!(ok.params.delta, 1.2);
    let from_lambda = parse_config_str("[model]\nlambda_cm1 = 90.0\n[task]\nkind = \"g1\"\n").unwrap();
    assert!((from_lambda.params.delta - 0.6).abs() < 1e-15);
}

#[test]
fn unit_violations_point_at_the_key() {
    let e = parse_config_str("[task]\nkind = \"g1\"\n[model]\ntemperature_k = -3.0\n").unwrap_err();
    assert_eq!(e.line, Some(4), "{e}");
    assert!(e.message.contains("temperature_k"), "{e}");
    let e = parse_config_str("[task]\nkind = \"g2\"\nt_anchor_ps = 0.01234\n").unwrap_err();
    assert_eq!(e.line, Some(3), "{e}");
    let e = parse_config_str("[task]\nkind = \"g2\"\nt_anchor_ps = \"soon\"\n").unwrap_err();
    assert_eq!(e.line, Some(3), "{e}");
}

#[test]
fn scan_block_presets() {
    let cfg = parse_config_str(
        "[task]\nkind = \"scan\"\n[scan]\neta_cm1 = [0.0, 5.0, 10.0]\nlambda_cm1 = [0.0, 180.0, 360.0, 720.0]\n",
    )
    .unwrap();
    let spec = cfg.scan.as_ref().unwrap();
    assert_eq!(spec.task, TaskKind::G2);
    assert_eq!(spec.system, SystemAxis::Lambda(vec![0.0, 180.0, 360.0, 720.0]));
    let cells = vibcorr_cli::scan::cells(&cfg, spec).unwrap();
    assert_eq!(cells.len(), 12);
    // λ = ω₀Δ²/2 presets: Δ = 0, 0.6√2, 1.2, 1.2√2
    let deltas: Vec<f64> = cells[..4].iter().map(|c| c.config.params.delta).collect();
    for (d, want) in deltas.iter().zip([0.0, 0.6 * 2f64.sqrt(), 1.2, 1.2 * 2f64.sqrt()]) {
        assert!((d - want).abs() < 1e-12);
    }
    let mut labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
    labels.dedup();
    assert_eq!(labels.len(), 12);
    assert!(parse_config_str("[task]\nkind = \"scan\"\n").unwrap_err().message.contains("[scan]"));
}

#[test]
fn config_errors_exit_with_status_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[model]\nn_levels = 4\n");
    let out = vibcorr(&["g2", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("task required"));
    let cfg = write(dir.path(), "other.toml", SMALL);
    let out = vibcorr(&["g1", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn g2_runs_are_deterministic_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let mut texts = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = vibcorr(&["g2", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        texts.push(std::fs::read(out_dir.join("g2_phonon_photon.csv")).unwrap());
        assert!(out_dir.join("g2_phonon_photon.svg").exists());
    }
    assert_eq!(texts[0], texts[1]);
    let (trace, meta) = read_trace(&texts[0][..]).unwrap();
    assert_eq!(trace.op_first, Some(Detector::Phonon));
    assert_eq!(trace.op_second, Some(Detector::Photon));
    assert_eq!(trace.grid.len(), 101);
    assert!(meta.iter().any(|(k, v)| k == "t_anchor_used_ps" && v == "0.1"));
}

#[test]
fn single_cell_scan_matches_direct_run() {
    let dir = tempfile::tempdir().unwrap();
    let direct_cfg = SMALL.to_string();
    let cfg = write(dir.path(), "direct.toml", &direct_cfg);
    let out = vibcorr(&["g2", "--config", &cfg, "--out", dir.path().join("direct").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let scan_cfg = direct_cfg.replace("kind = \"g2\"", "kind = \"scan\"") + "\n[scan]\neta_cm1 = [0.0]\ndelta = [0.8]\n";
    let cfg = write(dir.path(), "scan.toml", &scan_cfg);
    let out = vibcorr(&["scan", "--config", &cfg, "--threads", "2", "--out", dir.path().join("scan").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = std::fs::read(dir.path().join("direct/g2_phonon_photon.csv")).unwrap();
    let b = std::fs::read(dir.path().join("scan/g2_phonon_photon_eta0_delta0.8.csv")).unwrap();
    assert_eq!(a, b);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("scan/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], true);
    assert_eq!(manifest["cells"][0]["params"]["delta"], "0.8");
    assert!(dir.path().join("scan/scan.svg").exists());
}

#[test]
fn scan_grid_writes_every_cell_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("kind = \"g2\"", "kind = \"scan\"")
        + "\n[scan]\ntask = \"g1\"\neta_cm1 = [0.0, 2.0]\nlambda_cm1 = [0.0, 100.0]\n";
    let text = text.replace("[propagator]\n", "[propagator]\npre_equilibration_fs = 50.0\ndepth = 2\n");
    let cfg = write(dir.path(), "grid.toml", &text);
    let mut runs = Vec::new();
    for (sub, threads) in [("t1", "1"), ("t3", "3")] {
        let out = vibcorr(&["scan", "--config", &cfg, "--threads", threads, "--out", dir.path().join(sub).to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let mut names: Vec<String> = std::fs::read_dir(dir.path().join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".csv"))
            .collect();
        names.sort();
        assert_eq!(names.len(), 4);
        runs.push(names.iter().map(|n| std::fs::read(dir.path().join(sub).join(n)).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn scan_failure_leaves_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    // a closed-system reference needs a half-range crossing after 3.5 ps,
    // which a 0.3 ps run does not have
    let text = SMALL.replace("kind = \"g2\"", "kind = \"scan\"").replace("normalize = false", "normalize = true")
        + "\n[scan]\neta_cm1 = [0.0]\ndelta = [0.0, 0.8]\n";
    let cfg = write(dir.path(), "fail.toml", &text);
    let out = vibcorr(&["scan", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], false);
    assert_eq!(manifest["cells"].as_array().unwrap().len(), 2);
}

#[test]
fn equilibrate_writes_checkpoint_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[model]\nn_levels = 3\n[bath]\neta_cm1 = 5.0\n[propagator]\ndepth = 2\npre_equilibration_fs = 100.0\n[task]\nkind = \"equilibrate\"\n";
    let cfg = write(dir.path(), "eq.toml", text);
    let out = vibcorr(&["equilibrate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("equilibrate.json")).unwrap()).unwrap();
    assert!((summary["trace"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(summary["n_ados"], 10);
    assert!(dir.path().join("equilibrated.ckpt").metadata().unwrap().len() > 32);
}

#[test]
fn verify_writes_passing_oracle_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = vibcorr(&["verify", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("oracle.jsonl")).unwrap();
    let reports: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 9);
    assert!(reports.iter().all(|r| r["pass"] == true));
    assert!(String::from_utf8_lossy(&out.stdout).lines().filter(|l| l.starts_with("PASS")).count() == 9);
}
