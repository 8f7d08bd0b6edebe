//! End-to-end checks of the run-config contract, command artifacts, exit
//! codes, and the vtlab binary itself.

use std::path::Path;
use std::process::Command;

use vtlab_core::cli::{
    cmd_analyze, cmd_bench, cmd_eval, cmd_flops, cmd_sweep, cmd_train, RunConfig,
};
use vtlab_core::error::Error;
use vtlab_core::strategy::StrategyTag;

fn tiny_config_json(out_dir: &Path) -> String {
    format!(
        r#"{{
  "schema_version": 1,
  "seed": 7,
  "out_dir": "{}",
  "model": {{
    "n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32,
    "vocab_size": 16, "grid": 2, "patch_dim": 4, "d_vision": 8
  }},
  "strategy": {{ "tag": "victor", "m": 2, "k": 1 }},
  "data": {{ "colors": 4, "noise_std": 0.02, "train_count": 32, "eval_count": 16 }},
  "train": {{
    "stage1": {{ "lr": 0.001, "steps": 3, "batch_size": 2 }},
    "stage2": {{ "lr": 0.0005, "steps": 4, "batch_size": 2 }}
  }},
  "scenario": {{ "prompt_text_len": 3, "gen_len": 2, "batch": 2, "repetitions": 2, "warmup": 1 }}
}}"#,
        out_dir.display()
    )
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("run");
    let path = dir.join("config.json");
    std::fs::write(&path, tiny_config_json(&out)).unwrap();
    path
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut text = tiny_config_json(dir.path());
    text = text.replacen("\"seed\": 7,", "\"seed\": 7, \"mystery_knob\": 1,", 1);
    std::fs::write(&path, text).unwrap();
    match RunConfig::from_path(&path) {
        Err(Error::Config(msg)) => assert!(msg.contains("mystery_knob"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn schema_version_is_required() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let text = tiny_config_json(dir.path()).replacen("\"schema_version\": 1,", "", 1);
    std::fs::write(&path, text).unwrap();
    match RunConfig::from_path(&path) {
        Err(Error::Config(msg)) => assert!(msg.contains("schema_version"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn missing_config_file_is_a_config_error_naming_the_path() {
    let err = RunConfig::from_path(Path::new("/no/such/config.json")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("/no/such/config.json"));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::from_path(&write_config(dir.path())).unwrap();
    let artifacts = cmd_train(&config).unwrap();
    assert!(artifacts.checkpoint.exists());
    assert!(config.out_dir.join("train_log_stage1.jsonl").exists());
    assert!(config.out_dir.join("train_log_stage2.jsonl").exists());
    assert!(config.out_dir.join("timing_probe.json").exists());

    // Logs parse line by line with the pinned fields.
    let text = std::fs::read_to_string(config.out_dir.join("train_log_stage2.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "loss", "lr", "seconds"] {
            assert!(v.get(key).is_some());
        }
    }

    let result = cmd_eval(&config, None).unwrap();
    assert!(result.accuracy >= 0.0 && result.accuracy <= 1.0);
    let eval_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config.out_dir.join("eval.json")).unwrap())
            .unwrap();
    assert!(eval_json.get("accuracy").is_some());
}

#[test]
fn eval_without_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::from_path(&write_config(dir.path())).unwrap();
    let err = cmd_eval(&config, None).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn bench_emits_both_scenarios_with_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::from_path(&write_config(dir.path())).unwrap();
    let reports = cmd_bench(&config, None).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].config.gen_len, 2);
    assert_eq!(reports[1].config.gen_len, 128);
    for (g, r) in [(2usize, &reports[0]), (128, &reports[1])] {
        assert!(r.ratio_vs_baseline.is_some());
        let path = config.out_dir.join(format!("bench_gen{g}.json"));
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        for key in ["tps", "prefill_ms", "decode_ms", "config", "ratio_vs_baseline"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}

#[test]
fn bench_single_gen_len_and_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::from_path(&write_config(dir.path())).unwrap();
    let reports = cmd_bench(&config, Some(2)).unwrap();
    assert_eq!(reports.len(), 1);

    config.bench_checkpoint = Some(dir.path().join("missing_checkpoint.json"));
    let err = cmd_bench(&config, Some(2)).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn flops_file_is_valid_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::from_path(&write_config(dir.path())).unwrap();
    cmd_flops(&config).unwrap();
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config.out_dir.join("flops.json")).unwrap())
            .unwrap();
    // Per-layer formula 2048n + 32n^2 at n = {9, 5} vs baseline n = 7, 7.
    // At this tiny scale the two registers cost more than the drop saves.
    let expect = (21024.0 + 11040.0) / (2.0 * 15904.0);
    let ratio = v["flops"]["ratio_vs_baseline"].as_f64().unwrap();
    assert!((ratio - expect).abs() < 1e-12, "ratio {ratio} vs {expect}");
    assert_eq!(v["extra_params"]["extra"].as_u64().unwrap(), 32); // m*d = 2*16
}

#[test]
fn analyze_emits_maps_for_each_predrop_layer_and_grid_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::from_path(&write_config(dir.path())).unwrap();
    cmd_train(&config).unwrap();
    let summary = cmd_analyze(&config, None, 0).unwrap();
    assert_eq!(summary.per_layer_visual_mass.len(), 1); // k = 1
    let map = std::fs::read_to_string(config.out_dir.join("attn_map_layer0.csv")).unwrap();
    let rows: Vec<&str> = map.lines().collect();
    assert_eq!(rows.len(), 2); // m = 2 registers
    assert_eq!(rows[0].split(',').count(), 4); // n = 4 visual tokens

    let grid = std::fs::read_to_string(config.out_dir.join("grid_layer0.csv")).unwrap();
    let rows: Vec<&str> = grid.lines().collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.split(',').count(), 2);
        for cell in r.split(',') {
            cell.parse::<f64>().unwrap();
        }
    }
    let analysis: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(config.out_dir.join("analysis.json")).unwrap(),
    )
    .unwrap();
    assert!(analysis["similarity_visual"]["histogram"].is_array());
}

#[test]
fn analyze_rejects_capture_free_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path());
    let mut text = std::fs::read_to_string(&path).unwrap();
    text = text.replacen(
        "\"d_vision\": 8",
        "\"d_vision\": 8, \"attention_impl\": \"fused\"",
        1,
    );
    std::fs::write(&path, text).unwrap();
    let config = RunConfig::from_path(&path).unwrap();
    cmd_train(&config).unwrap();
    let err = cmd_analyze(&config, None, 0).unwrap_err();
    assert!(matches!(err, Error::Strategy(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn sweep_single_cell_matches_individual_commands() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::from_path(&write_config(dir.path())).unwrap();
    let rows = cmd_sweep(&config, &[StrategyTag::Victor], &[2], &[1]).unwrap();
    assert_eq!(rows.len(), 2); // baseline + one cell
    let cell = &rows[1];

    // The same cell as individual commands.
    let mut single = config.clone();
    single.out_dir = dir.path().join("single");
    single.strategy.m = 2;
    single.strategy.k = 1;
    cmd_train(&single).unwrap();
    let eval = cmd_eval(&single, None).unwrap();
    let flops = cmd_flops(&single).unwrap();
    assert_eq!(cell.accuracy, eval.accuracy);
    assert_eq!(cell.flops_ratio, flops.flops.ratio_vs_baseline);
    assert_eq!(cell.extra_params, flops.extra_params.extra);

    // CSV columns are pinned.
    let csv = std::fs::read_to_string(config.out_dir.join("sweep.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "strategy,m,k,accuracy,normalized_score,tps_ratio,flops_ratio,extra_params"
    );
    assert_eq!(csv.lines().count(), 3);
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').count(), 8);
    }
}

#[test]
fn sweep_rejects_empty_lists() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::from_path(&write_config(dir.path())).unwrap();
    let err = cmd_sweep(&config, &[StrategyTag::Victor], &[], &[1]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

// ── Binary smoke tests ──────────────────────────────────────────────────

fn vtlab_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vtlab"))
}

#[test]
fn binary_flops_succeeds_on_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path());
    let out = vtlab_bin().arg("flops").arg(&path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("victor"));
}

#[test]
fn binary_exit_codes_per_error_class() {
    // Missing config file: exit 2, message names the path.
    let out = vtlab_bin()
        .arg("train")
        .arg("/no/such/file.json")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/file.json"));

    // Runtime error (eval with no checkpoint): exit 3.
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path());
    let out = vtlab_bin().arg("eval").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn binary_flag_overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path());
    let out = vtlab_bin()
        .arg("flops")
        .arg(&path)
        .args(["--strategy", "fastv", "--m", "2", "--k", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("fastv"));
}
