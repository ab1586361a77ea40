use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "dataset": "synth:7",
  "splits": { "train": 300, "calibration": 100, "benign_eval": 30, "attack": 4, "exemplar": 30 },
  "train": { "epochs": 2 },
  "noise": { "sr_lo": 0.1, "sr_hi": 0.5, "gamma": 4.0 },
  "attacks": [
    { "kind": "cw_l2", "k": 0.0, "steps": 30, "step_size": 0.05 },
    { "kind": "defense_aware", "beta": 0.1, "steps": 30, "step_size": 0.05 }
  ],
  "simulate_inputs": 3,
  "base_seed": 5
}"#;

fn stochdet(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stochdet"))
        .args(args)
        .env("STOCHDET_OUTPUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stages_run_one_at_a_time_then_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = tmp.path().join("out");
    let c = cfg.to_str().unwrap();
    for stage in ["train", "profile", "attack", "calibrate", "detect", "eval", "simulate", "report"] {
        let o = stochdet(&["--config", c, stage], &out);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
        if stage == "eval" {
            assert!(stdout(&o).contains("set,kind,target_mode"));
        }
        if stage == "simulate" {
            assert!(stdout(&o).contains("speedup"));
        }
    }
    for f in ["metrics.csv", "cycles.csv", "histograms.csv", "k_sweep.csv", "beta_sweep.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let o = stochdet(&["--config", c, "verify"], &out);
    assert!(o.status.success(), "{}", stdout(&o));

    // A different seed is a different config.
    let o = stochdet(&["--config", c, "--base-seed", "6", "verify"], &out);
    assert_eq!(o.status.code(), Some(3));

    std::fs::write(out.join("metrics.csv"), "x").unwrap();
    let o = stochdet(&["verify"], &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("metrics.csv: digest mismatch"));
}

#[test]
fn run_matches_staged_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let c = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(stochdet(&["--config", c, "run"], &a).status.success());
    let o = stochdet(&["--config", c, "--output-dir", b.to_str().unwrap(), "run"], &tmp.path().join("ignored"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!tmp.path().join("ignored").exists());
    for f in ["metrics.csv", "cycles.csv", "histograms.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    // Reuse the trained model with a different accelerator.
    let model = a.join("model.bin");
    let d = tmp.path().join("d");
    let args = ["--config", c, "--model", model.to_str().unwrap(), "--group-size", "2", "--window", "8"];
    for stage in ["train", "profile", "simulate"] {
        let o = stochdet(&[&args[..], &[stage]].concat(), &d);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let cycles: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("cycles.json")).unwrap()).unwrap();
    assert_eq!(cycles["accelerator"]["group_size"], 2);
    assert_eq!(cycles["accelerator"]["lookahead"], 8);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = stochdet(&["--sr-lo", "0.9", "--sr-hi", "0.2", "train"], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("noise"), "{}", stderr(&o));

    let o = stochdet(&["--model", "/nonexistent/model.bin", "profile"], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model"));

    let o = stochdet(&["--noise-mode", "gaussian", "show-config"], &out);
    assert_eq!(o.status.code(), Some(2));

    let o = stochdet(&["--dataset", "csv:foo", "show-config"], &out);
    assert_eq!(o.status.code(), Some(2));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"dataset": "synth:1", "base_seed": 1, "train": {}, "colour": "red"}"#).unwrap();
    let o = stochdet(&["--config", bad.to_str().unwrap(), "show-config"], &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stage_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = stochdet(&["detect"], &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stage"), "{}", stderr(&o));
    let o = stochdet(&["verify"], &out);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn show_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = stochdet(&["--base-seed", "11", "--tiles", "2", "show-config"], tmp.path());
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["base_seed"], 11);
    assert_eq!(v["accelerator"]["tiles"], 2);
    assert_eq!(v["attacks"].as_array().unwrap().len(), 5);
    let path = tmp.path().join("c.json");
    std::fs::write(&path, &o.stdout).unwrap();
    let again = stochdet(&["--config", path.to_str().unwrap(), "show-config"], tmp.path());
    assert_eq!(again.stdout, o.stdout);
}
