use std::path::Path;
use std::process::{Command, Output};

fn hiha(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiha"))
        .args(args)
        .current_dir(dir)
        .env_remove("HIHA_CONFIG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

// Small nets so a round trip stays within a few seconds.
const QUICK: &str = r#"{
  "thumb": {"hidden": 1, "width": 16, "omega": 14.0, "max_steps": 300},
  "mim_residual": {"hidden": 1, "width": 8, "omega": 15.0, "max_steps": 100},
  "idm_block": {"hidden": 1, "width": 8, "omega": 22.0, "max_steps": 100},
  "idm_max_depth": 1,
  "trc_thumb": {"hidden": 1, "width": 8, "omega": 15.0, "max_steps": 100},
  "trc_residual": {"hidden": 1, "width": 8, "omega": 16.0, "max_steps": 50},
  "warm_start_steps": 50
}"#;

// The default mix asks for more modes than a 2x12x24 grid holds.
const MIX: &str = r#"{"low": [1, 1.0], "mid": [1, 0.1], "high": [1, 0.005], "spikes": 4, "max_low_mode": 1}"#;

fn setup(frames: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("quick.json"), QUICK).unwrap();
    std::fs::write(dir.path().join("mix.json"), MIX).unwrap();
    let o = hiha(
        &["gen", "--out", "f", "--shape", "2x12x24", "--frames", &frames.to_string(), "--drift", "0.01", "--seed", "3", "--mix", "mix.json"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn gen_writes_frames_and_spec() {
    let dir = setup(2);
    for name in ["f0.grd", "f0.json", "f1.grd", "fspec.json"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
}

#[test]
fn round_trip_through_every_subcommand() {
    let dir = setup(2);
    let d = dir.path();
    let o = hiha(
        &["compress", "--in", "f0.grd,f1.grd", "--out", "a.hiha", "--profile", "desk", "--config", "quick.json", "--eps", "0.05", "--best-effort"],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ratio"));

    let o = hiha(&["decompress", "--in", "a.hiha", "--truth", "f0.grd,f1.grd", "--best-effort"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("f0.out.grd").exists() && d.join("f1.out.grd").exists());

    let o = hiha(&["eval", "--truth", "f1.grd", "--recon", "f1.out.grd", "--archive", "a.hiha", "--frames", "2"], d);
    assert!(o.status.success());
    let text = stdout(&o);
    for key in ["psnr_db", "rmse", "norm_rmse", "ratio"] {
        assert!(text.contains(key), "eval output lacks {key}: {text}");
    }

    let o = hiha(&["inspect", "--in", "a.hiha"], d);
    assert!(o.status.success());
    let text = stdout(&o);
    let total: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("total"))
        .and_then(|r| r.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(total, std::fs::metadata(d.join("a.hiha")).unwrap().len() as usize);
    let shares: usize = text
        .lines()
        .filter(|l| ["Meta", "SSM", "MIM", "IDM", "TRC"].iter().any(|m| l.to_uppercase().starts_with(&m.to_uppercase())))
        .map(|l| l.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(shares, total);
}

#[test]
fn unmet_tolerance_exits_nonzero_without_best_effort() {
    let dir = setup(1);
    let o = hiha(
        &["compress", "--in", "f0.grd", "--out", "a.hiha", "--profile", "desk", "--config", "quick.json", "--eps", "1e-9"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(dir.path().join("a.hiha").exists(), "archive is still written");
}

#[test]
fn env_config_applies_and_flags_override_it() {
    let dir = setup(1);
    let o = Command::new(env!("CARGO_BIN_EXE_hiha"))
        .args(["compress", "--in", "f0.grd", "--out", "a.hiha", "--profile", "desk", "--eps", "0.05", "--best-effort", "--no-idm"])
        .env("HIHA_CONFIG", dir.path().join("quick.json"))
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = hiha(&["inspect", "--in", "a.hiha"], dir.path());
    let text = stdout(&o);
    assert!(text.contains("\"no_idm\":true"), "{text}");
    assert!(text.contains("\"idm_max_depth\":1"), "{text}");
}

#[test]
fn corrupt_archive_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.hiha"), b"HIHA\x01\x00garbage").unwrap();
    let o = hiha(&["inspect", "--in", "bad.hiha"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn bad_profile_and_shape_are_rejected() {
    let dir = setup(1);
    let o = hiha(&["compress", "--in", "f0.grd", "--out", "a.hiha", "--profile", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = hiha(&["gen", "--out", "g", "--shape", "4x4"], dir.path());
    assert!(!o.status.success());
}
