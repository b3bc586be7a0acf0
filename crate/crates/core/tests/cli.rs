//! End-to-end tests of the `crispe` binary: flag surface, exit codes, and
//! the cache-amortization equivalence.

use std::path::Path;
use std::process::Command;

fn crispe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crispe"))
}

fn run_ok(args: &[&str]) -> String {
    let out = crispe().args(args).output().expect("spawning crispe");
    assert!(
        out.status.success(),
        "crispe {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_lists_every_flag_with_defaults() {
    let out = crispe().args(["edit", "--help"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--gamma",
        "--curvature",
        "--layers",
        "--lr",
        "--steps",
        "--batch-size",
        "--early-stop",
        "--drift-threshold",
        "--seed",
        "--mc-samples",
        "--empirical-fisher",
        "--refresh-kfac",
        "--joint",
        "--config",
        "--curvature-cache",
    ] {
        assert!(text.contains(flag), "edit --help is missing {flag}");
    }
    let seq = crispe().args(["seq-edit", "--help"]).output().unwrap();
    let seq_text = String::from_utf8_lossy(&seq.stdout);
    assert!(seq_text.contains("--chunk-size"));

    // Documented defaults.
    let config_help = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(config_help.contains("5e-4") || config_help.contains("0.0005"));
    assert!(config_help.contains("25"));
    assert!(config_help.contains("32"));
    assert!(config_help.contains("0.01"));
    assert!(seq_text.contains("100"));
}

#[test]
fn gamma_validation_exit_code_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.crsp");
    run_ok(&[
        "pretrain",
        "--synthetic",
        "--n",
        "120",
        "--dim",
        "8",
        "--classes",
        "3",
        "--epochs",
        "2",
        "--hidden",
        "8",
        "--out",
        model.to_str().unwrap(),
    ]);
    let out = crispe()
        .args([
            "edit",
            "--checkpoint",
            model.to_str().unwrap(),
            "--synthetic",
            "--n",
            "120",
            "--dim",
            "8",
            "--classes",
            "3",
            "--gamma",
            "1.5",
            "--out",
            dir.path().join("x.crsp").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gamma"), "error does not name gamma: {stderr}");
}

#[test]
fn missing_file_is_io_exit() {
    let out = crispe()
        .args([
            "edit",
            "--checkpoint",
            "/nonexistent/model.crsp",
            "--synthetic",
            "--out",
            "/tmp/never.crsp",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn verify_exits_zero_and_reports() {
    let text = run_ok(&["verify", "--seed", "2024"]);
    assert!(text.contains("[PASS]"));
    assert!(text.contains("0 failed"));
}

#[test]
fn cache_amortized_edit_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    let data: &[&str] = &[
        "--synthetic",
        "--n",
        "240",
        "--dim",
        "10",
        "--classes",
        "3",
        "--data-seed",
        "5",
    ];

    let model = path("model.crsp");
    let mut args = vec![
        "pretrain",
        "--epochs",
        "10",
        "--hidden",
        "12",
        "--lr",
        "0.1",
        "--seed",
        "9",
        "--out",
        &model,
    ];
    args.extend_from_slice(data);
    run_ok(&args);

    // The same edit settings, once with an explicit cache, once without.
    for kind in ["kfac", "ekfac", "actcov", "gnh", "hessian"] {
        let cache = path(&format!("{kind}.crvc"));
        let mut cache_args = vec![
            "cache-curvature",
            "--checkpoint",
            &model,
            "--curvature",
            kind,
            "--layers",
            "0,1",
            "--seed",
            "9",
            "--out",
            &cache,
        ];
        cache_args.extend_from_slice(data);
        run_ok(&cache_args);

        let single = path(&format!("{kind}-single.crsp"));
        let amortized = path(&format!("{kind}-amortized.crsp"));
        let common: Vec<String> = [
            "--checkpoint",
            &model,
            "--curvature",
            kind,
            "--gamma",
            "0.9",
            "--layers",
            "0,1",
            "--lr",
            "0.05",
            "--steps",
            "4",
            "--seed",
            "9",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();

        let mut single_args: Vec<String> = vec!["edit".into()];
        single_args.extend(common.iter().cloned());
        single_args.extend(data.iter().map(|s| s.to_string()));
        single_args.extend(["--out".to_string(), single.clone()]);
        run_ok(&single_args.iter().map(|s| s.as_str()).collect::<Vec<_>>());

        let mut amortized_args: Vec<String> = vec!["edit".into()];
        amortized_args.extend(common.iter().cloned());
        amortized_args.extend(data.iter().map(|s| s.to_string()));
        amortized_args.extend([
            "--curvature-cache".to_string(),
            cache.clone(),
            "--out".to_string(),
            amortized.clone(),
        ]);
        run_ok(&amortized_args.iter().map(|s| s.as_str()).collect::<Vec<_>>());

        let a = std::fs::read(Path::new(&single)).unwrap();
        let b = std::fs::read(Path::new(&amortized)).unwrap();
        assert_eq!(a, b, "cache-amortized {kind} edit differs from single-shot");
    }
}

#[test]
fn sweep_csv_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let csv1 = dir.path().join("a.csv");
    let csv2 = dir.path().join("b.csv");
    for out in [&csv1, &csv2] {
        run_ok(&[
            "sweep",
            "--synthetic",
            "--n",
            "180",
            "--dim",
            "8",
            "--classes",
            "3",
            "--data-seed",
            "3",
            "--hidden",
            "10",
            "--pretrain-epochs",
            "6",
            "--curvature",
            "kfac,none",
            "--k-grid",
            "1",
            "--optimizer",
            "sgd",
            "--lr",
            "0.05",
            "--steps",
            "3",
            "--seed",
            "4",
            "--curvature-examples",
            "40",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let a = std::fs::read(&csv1).unwrap();
    let b = std::fs::read(&csv2).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.contains("curvature,gamma,k,cap_acc,edit_acc,retained_energy,rebuilds,wall_ms"));
}

#[test]
fn config_file_respected_and_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.crsp");
    run_ok(&[
        "pretrain",
        "--synthetic",
        "--n",
        "120",
        "--dim",
        "8",
        "--classes",
        "3",
        "--epochs",
        "2",
        "--hidden",
        "8",
        "--out",
        model.to_str().unwrap(),
    ]);
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"gamma": 2.0}"#).unwrap();

    // Invalid value from the file is rejected...
    let out = crispe()
        .args([
            "edit",
            "--checkpoint",
            model.to_str().unwrap(),
            "--synthetic",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.path().join("x.crsp").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // ...unless the command line overrides it.
    run_ok(&[
        "edit",
        "--checkpoint",
        model.to_str().unwrap(),
        "--synthetic",
        "--n",
        "120",
        "--dim",
        "8",
        "--classes",
        "3",
        "--config",
        config.to_str().unwrap(),
        "--gamma",
        "0.9",
        "--steps",
        "2",
        "--out",
        dir.path().join("y.crsp").to_str().unwrap(),
    ]);
}
