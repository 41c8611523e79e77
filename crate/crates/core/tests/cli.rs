use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sns-mini"))
}

#[test]
fn missing_config_fails_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = bin()
        .args(["simulate", "--config", "/definitely/not/here.cfg", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read"));
    assert!(!out.exists());
}

#[test]
fn unknown_subcommand_fails() {
    let o = bin().arg("integrate").output().unwrap();
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
}

#[test]
fn invalid_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "steps = 0\n").unwrap();
    let out = dir.path().join("out");
    let o = bin()
        .args(["simulate", "--out"])
        .arg(&out)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(!out.exists());
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let o = bin()
        .args(["check", "--out"])
        .arg(&out)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn check_passes_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["check", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("check.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 7);
    assert!(!csv.contains(",false"));
    let m = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    for key in ["config_sha256", "C_zeta", "kappa_estimate", "git"] {
        assert!(m.contains(key), "{key} missing from manifest");
    }
}

#[test]
fn simulate_writes_norms_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.cfg");
    std::fs::write(
        &cfg,
        "level = 2\nsteps = 8\nsnapshot_stride = 4\nkappa_level = 2\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = bin()
        .args(["simulate", "--seed", "5", "--out"])
        .arg(&out)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("norms.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("# dissipation quadrature"));
    assert!(lines.next().unwrap().starts_with("step,t [time],l2_norm"));
    assert_eq!(lines.count(), 9);
    let snaps = std::fs::read_dir(out.join("snapshots")).unwrap().count();
    assert_eq!(snaps, 3);
}
