use afl_core::{Dims, MaskVolume, Volume3D};
use afl_lab::volio;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use tempfile::tempdir;

fn afl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afl")).args(args).arg("--quiet").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn params_prints_one_line() {
    let dir = tempdir().unwrap();
    let mask = MaskVolume::from_fn(Dims::cube(4), |z, y, x| z < 2 && y < 2 && x < 2).unwrap();
    volio::write_mask(&mask, &dir.path().join("m")).unwrap();
    let out = afl(&["params", s(&dir.path().join("m.vol.json"))]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = text.trim().split(' ').collect();
    assert_eq!(fields.len(), 6);
    assert_eq!(&fields[..4], ["8", "56", "0.875", "0.125"]);
    let msa: f64 = fields[4].parse().unwrap();
    let expected = afl_core::params::mean_smoothness(&mask).unwrap();
    assert!((msa - expected).abs() <= 1e-11 * expected);
    assert!(fields[4].trim_start_matches("0.").len() <= 12);
}

#[test]
fn loss_prints_value_and_writes_gradient() {
    let dir = tempdir().unwrap();
    let d = Dims::cube(4);
    let mask = MaskVolume::from_fn(d, |z, _, _| z == 1).unwrap();
    let pred = Volume3D::filled(d, 0.5).unwrap();
    volio::write_mask(&mask, &dir.path().join("m")).unwrap();
    volio::write_image(&pred, &dir.path().join("p")).unwrap();
    let g = dir.path().join("g");
    let out = afl(&[
        "loss", "--kind", "focal", "--pred", s(&dir.path().join("p")), "--mask", s(&dir.path().join("m")),
        "--grad-out", s(&g),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let value: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    // 16 foreground voxels weighted 0.25 and 48 background voxels weighted 0.75.
    let expected = (16.0 * 0.25 + 48.0 * 0.75) * 0.25 * std::f64::consts::LN_2 / 64.0;
    assert!((value - expected).abs() < 1e-15);
    assert_eq!(volio::read_image(&g).unwrap().dims(), d);

    let none = afl(&["loss", "--kind", "afl", "--ablation", "none", "--pred", s(&dir.path().join("p")), "--mask", s(&dir.path().join("m"))]);
    assert_eq!(String::from_utf8(none.stdout).unwrap().trim().parse::<f64>().unwrap(), value);

    let neg = afl(&["loss", "--kind", "afl", "--gamma-offset", "-0.5", "--pred", s(&dir.path().join("p")), "--mask", s(&dir.path().join("m"))]);
    assert!(neg.status.success());
}

#[test]
fn exit_codes() {
    let dir = tempdir().unwrap();
    assert_eq!(afl(&["params", s(&dir.path().join("missing"))]).status.code(), Some(3));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"seeds": [0], "unknown_key": true}"#).unwrap();
    assert_eq!(afl(&["ablate", "--config", s(&bad), "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(afl(&["gen", "--n", "2", "--dims", "2,2"]).status.code(), Some(2));
    let mask = MaskVolume::zeros(Dims::cube(3)).unwrap();
    volio::write_mask(&mask, &dir.path().join("m")).unwrap();
    let out = afl(&["loss", "--kind", "nonsense", "--pred", s(&dir.path().join("m")), "--mask", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = afl(&["gen", "--out", s(&data), "--n", "4", "--dims", "24,24,24", "--seed", "7", "--mix", "1,1,1,1,1,1,0,0,0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, r#"{"epochs": 2, "loss": {"kind": "afl", "gamma_offset": 1.0}}"#).unwrap();
    let out = afl(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&run), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.echo.json")).unwrap()).unwrap();
    assert_eq!(echo["train"]["seed"], 3);
    assert_eq!(echo["train"]["loss"]["gamma_offset"], 1.0);

    let out = afl(&["eval", "--pred-dir", s(&run.join("predictions")), "--mask-dir", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,iou,dsc,sensitivity,specificity");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean,"));
}
