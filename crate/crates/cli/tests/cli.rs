//! End-to-end tests of the `delora` binary: exit codes, artifact layout, and
//! the documented CSV schemas.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_delora"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("delora_cli_{name}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

const TINY: &str = r#"{
    "d": 10, "f": 10, "depth": 2, "n_samples": 32,
    "steps": 40, "trace_every": 10,
    "multipliers": [1.0, 2.0]
}"#;

#[test]
fn no_subcommand_is_a_usage_error() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["dance"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_variant_name_exits_one_and_names_it() {
    let dir = scratch("bad_variant");
    let cfg = write_config(&dir, r#"{"variant": "lroa"}"#);
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lroa"), "{stderr}");
}

#[test]
fn unknown_config_key_is_fatal() {
    let dir = scratch("bad_key");
    let cfg = write_config(&dir, r#"{"sede": 3}"#);
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("sede"), "{stderr}");
}

#[test]
fn train_writes_trace_and_checkpoints() {
    let dir = scratch("train");
    let cfg = write_config(&dir, TINY);
    let out_dir = dir.join("out");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    // header + init record + steps/trace_every records
    assert_eq!(trace.lines().count(), 1 + 40 / 10 + 1);
    assert!(trace.starts_with("step,loss,dist_l0,dist_l1,"));
    for k in 0..2 {
        assert!(out_dir.join(format!("layer_{k}.bin")).exists());
        assert!(out_dir.join(format!("adapter_{k}.bin")).exists());
        assert!(out_dir.join(format!("adapter_{k}.json")).exists());
    }
}

#[test]
fn repeated_seed_gives_identical_bytes() {
    let dir = scratch("determinism");
    let cfg = write_config(&dir, TINY);
    for pass in ["a", "b"] {
        let out_dir = dir.join(pass);
        let out = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    for name in ["trace.csv", "adapter_0.bin", "adapter_1.bin", "layer_0.bin"] {
        let a = fs::read(dir.join("a").join(name)).unwrap();
        let b = fs::read(dir.join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn sweep_emits_summary_rows_per_variant_and_multiplier() {
    let dir = scratch("sweep");
    let cfg = write_config(
        &dir,
        r#"{
            "d": 10, "f": 10, "depth": 2, "n_samples": 32,
            "steps": 30, "trace_every": 10,
            "multipliers": [1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            "sweep_variants": ["lora", "delora"]
        }"#,
    );
    let out_dir = dir.join("out");
    let out = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    // two variants x six multipliers plus the header
    assert_eq!(summary.lines().count(), 1 + 12);
    assert_eq!(
        summary.lines().next().unwrap(),
        "variant,multiplier,final_loss,final_distance,diverged"
    );
    assert!(out_dir.join("trace_lora_x32.csv").exists());
    assert!(out_dir.join("trace_delora_x1.csv").exists());
}

#[test]
fn gradcheck_passes_and_lists_every_variant() {
    let dir = scratch("gradcheck");
    let out = run(&["gradcheck", "--out", dir.join("out").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for variant in [
        "lora",
        "dora",
        "dora_fixed_mag",
        "delora",
        "delora_no_weight_scale",
        "ether_one_sided",
        "ether_plus_one_sided",
        "ether_plus_ctrl",
        "ether_plus_high_rank",
        "ether_plus_relaxed",
    ] {
        assert!(stdout.contains(variant), "missing {variant}");
    }
    assert!(stdout.contains("all 10 variants pass"));
    // the fixed-magnitude DoRA reports no magnitude row
    let csv = fs::read_to_string(dir.join("out").join("gradcheck.csv")).unwrap();
    assert!(!csv.contains("dora_fixed_mag,m"));
    assert!(csv.contains("dora,m"));
}

#[test]
fn unreachable_tolerance_reports_failures_without_crashing() {
    let dir = scratch("gradcheck_tol");
    let out = run(&[
        "gradcheck",
        "--tolerance",
        "1e-12",
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL"));
}

#[test]
fn rankcheck_passes_and_reports_the_ladder() {
    let dir = scratch("rankcheck");
    let out = run(&["rankcheck", "--out", dir.join("out").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("reflection (one-sided)"));
    assert!(stdout.contains("degenerate"));
    let csv = fs::read_to_string(dir.join("out").join("rankcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn norms_on_a_generated_depth_three_task() {
    let dir = scratch("norms");
    let cfg = write_config(&dir, r#"{"d": 12, "f": 12, "depth": 3, "n_samples": 8}"#);
    let out_dir = dir.join("out");
    let out = run(&[
        "norms",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(out_dir.join("norms.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3);
    assert_eq!(lines[0], "label,mean_column_norm,std_column_norm");
    // schema parses back: three fields, numeric mean/std
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3);
        fields[1].parse::<f64>().unwrap();
        fields[2].parse::<f64>().unwrap();
    }
}

#[test]
fn norms_with_missing_layers_dir_is_a_hard_error() {
    let dir = scratch("norms_missing");
    let cfg = write_config(&dir, r#"{"layers_dir": "/nonexistent/delora_layers"}"#);
    let out = run(&[
        "norms",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn merge_round_trips_through_checkpoints() {
    let dir = scratch("merge");
    let cfg = write_config(&dir, TINY);
    let out_dir = dir.join("out");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let out = run(&[
        "merge",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    // merged checkpoint behaves exactly like adapter + layer
    use delora_core::adapters::{checkpoint, forward};
    use delora_core::numkit::{gaussian_matrix, Rng};
    for k in 0..2 {
        let adapter = checkpoint::load_adapter(&out_dir.join(format!("adapter_{k}.bin"))).unwrap();
        let layer = checkpoint::load_layer(&out_dir.join(format!("layer_{k}.bin"))).unwrap();
        let merged = checkpoint::load_layer(&out_dir.join(format!("merged_{k}.bin"))).unwrap();
        let x = gaussian_matrix(layer.input_dim(), 20, &mut Rng::new(5));
        let adapted = forward(&adapter, &layer, &x).unwrap();
        let plain = merged.forward(&x).unwrap();
        assert!(adapted.max_abs_diff(&plain) < 1e-10);
        assert!(merged.w_init_offset().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn merge_without_checkpoints_exits_one() {
    let dir = scratch("merge_empty");
    let out = run(&["merge", "--out", dir.join("empty").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_two() {
    let dir = scratch("diverge");
    let cfg = write_config(
        &dir,
        r#"{
            "d": 10, "f": 10, "depth": 2, "n_samples": 32,
            "steps": 200, "trace_every": 50,
            "optimizer": "sgd", "lr_main": 1e6, "lr_lambda": 1e6
        }"#,
    );
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("diverged"), "{stderr}");
}

#[test]
fn default_config_train_fits_the_time_budget() {
    let dir = scratch("default_train");
    let started = std::time::Instant::now();
    let out = run(&["train", "--out", dir.join("out").to_str().unwrap()]);
    let elapsed = started.elapsed();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(elapsed.as_secs() < 30, "default train took {elapsed:?}");
    let trace = fs::read_to_string(dir.join("out").join("trace.csv")).unwrap();
    // header + init record + steps/trace_every records
    assert_eq!(trace.lines().count(), 1 + 1 + 2000 / 50);
}
