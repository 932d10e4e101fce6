use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use abcm_core::abcm::ImportanceVector;
use abcm_core::codec::{ChannelConfig, CodecModel};
use abcm_core::container::save_model;
use abcm_core::{GateConfig, RngState, SlotId, Tensor};

fn abcm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abcm"))
        .current_dir(dir)
        .env_remove("ABCM_OUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn comment<'a>(csv: &'a str, key: &str) -> Option<&'a str> {
    let prefix = format!("# {key}: ");
    csv.lines().find_map(|l| l.strip_prefix(prefix.as_str()))
}

fn masked_model(dir: &Path, name: &str, off: &[(SlotId, &[usize])]) {
    let mut model = CodecModel::new(ChannelConfig::desk(), Some(GateConfig::default()), &mut RngState::new(0)).unwrap();
    for &(slot, channels) in off {
        let alpha: Vec<f32> = (0..8).map(|c| if channels.contains(&c) { -0.5 } else { 0.5 }).collect();
        *model.mask_mut(slot).unwrap() = ImportanceVector::from_param(Tensor::param(&[8], alpha).unwrap()).unwrap();
    }
    save_model(&dir.join(name), &model, &[]).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["train", "--steps", "many"],
        &["prune"],
        &["train", "--gate", "sometimes"],
        &["train", "--lr", "-1"],
        &["bench", "--model", "m.abcm", "--size", "big"],
    ] {
        let o = abcm(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = abcm(dir.path(), &["eval", "--model", "missing.abcm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.abcm"));
    fs::write(dir.path().join("junk.abcm"), b"not a model").unwrap();
    assert_eq!(abcm(dir.path(), &["eval", "--model", "junk.abcm"]).status.code(), Some(1));
}

#[test]
fn config_file_rules() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    masked_model(p, "m.abcm", &[(SlotId::all()[0], &[1, 2])]);
    fs::write(p.join("bad.conf"), "colour = blue\n").unwrap();
    let o = abcm(p, &["--config", "bad.conf", "eval", "--model", "m.abcm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key `colour`"));
    fs::write(p.join("twice.conf"), "eval = synthetic:1:1:32\neval = synthetic:2:1:32\n").unwrap();
    assert_eq!(abcm(p, &["--config", "twice.conf", "eval", "--model", "m.abcm"]).status.code(), Some(2));

    // file beats default, flag beats file
    fs::write(p.join("run.conf"), "# eval settings\neval = synthetic:5:2:32\nmodel = m.abcm\n").unwrap();
    let o = abcm(p, &["--config", "run.conf", "--out-dir", "a", "eval"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(p.join("a/eval.csv")).unwrap();
    assert_eq!(comment(&csv, "config.eval"), Some("synthetic:5:2:32"));
    assert_eq!(comment(&csv, "config.model"), Some("m.abcm"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("synthetic:5:")).count(), 2);
    let o = abcm(p, &["--config", "run.conf", "--out-dir", "b", "eval", "--eval", "synthetic:6:3:32"]);
    assert!(o.status.success());
    let csv = fs::read_to_string(p.join("b/eval.csv")).unwrap();
    assert_eq!(comment(&csv, "config.eval"), Some("synthetic:6:3:32"));
    assert!(comment(&csv, "tool").unwrap().starts_with("abcm "));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    masked_model(dir.path(), "m.abcm", &[]);
    let o = Command::new(env!("CARGO_BIN_EXE_abcm"))
        .current_dir(dir.path())
        .env("ABCM_OUT_DIR", "from-env")
        .args(["eval", "--model", "m.abcm", "--eval", "synthetic:0:1:32"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("from-env/eval.csv").exists());
}

#[test]
fn prune_writes_a_slim_model_that_evaluates_the_same() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let slots = SlotId::all();
    let (ga1, gs2) = (slots[0], slots[4]);
    masked_model(p, "m.abcm", &[(ga1, &[0, 3, 4]), (gs2, &[7])]);
    let o = abcm(p, &["--out-dir", "o", "prune", "--model", "m.abcm", "--inputs", "synthetic:3:2:32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let config = fs::read_to_string(p.join("o/prune_config.csv")).unwrap();
    assert!(config.contains("ga1.conv,conv,3,8,3,5"), "{config}");
    assert!(config.contains("gs3.deconv,deconv,8,8,7,8"), "{config}");
    let eq = fs::read_to_string(p.join("o/equivalence.csv")).unwrap();
    assert_eq!(comment(&eq, "pass"), Some("true"));
    assert_eq!(comment(&eq, "max_diff"), Some("0"));

    for (model, out) in [("m.abcm", "e1"), ("o/slim.abcm", "e2")] {
        assert!(abcm(p, &["--out-dir", out, "eval", "--model", model]).status.success());
    }
    let rows = |out: &str| -> Vec<String> {
        fs::read_to_string(p.join(out).join("eval.csv"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(String::from)
            .collect()
    };
    assert_eq!(rows("e1"), rows("e2"));
}

#[test]
fn degenerate_plan_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let gs1 = SlotId::all()[3];
    masked_model(p, "m.abcm", &[(gs1, &[0, 1, 2, 3, 4, 5, 6, 7])]);
    let o = abcm(p, &["--out-dir", "o", "prune", "--model", "m.abcm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gs1"), "{}", stderr(&o));
    assert!(!p.join("o/slim.abcm").exists());
}

#[test]
fn eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    masked_model(p, "m.abcm", &[]);
    for out in ["x", "y"] {
        assert!(abcm(p, &["--out-dir", out, "eval", "--model", "m.abcm"]).status.success());
    }
    let read = |out: &str| fs::read(p.join(out).join("eval.csv")).unwrap();
    assert_eq!(read("x"), read("y"));
}

#[test]
fn train_then_sweep_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = abcm(p, &["--out-dir", "t", "train", "--steps", "3", "--batch", "1", "--patch", "32", "--gate", "none"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = fs::read_to_string(p.join("t/train_curve.csv")).unwrap();
    assert_eq!(curve.lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert_eq!(comment(&curve, "config.gate"), Some("none"));
    assert!(p.join("t/model.abcm").exists());

    // a plain model has nothing to sweep
    let o = abcm(p, &["--out-dir", "s", "sweep", "--gate", "none", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = abcm(p, &["--out-dir", "s", "sweep", "--steps", "2", "--batch", "1", "--patch", "32", "--gammas", "0,0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = fs::read_to_string(p.join("s/sweep.csv")).unwrap();
    let header = sweep.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "gamma,psnr_db,bpp,mean_ratio,kept_ga1,kept_ga2,kept_ga3,kept_gs1,kept_gs2,kept_gs3,diverged_at");
    assert!(p.join("s/sweep.svg").exists());
}
