use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pni(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pni"))
        .args(args)
        .env_remove("PNI_OUT_DIR")
        .current_dir(out)
        .output()
        .expect("binary runs")
}

fn report_value<'a>(report: &'a str, key: &str) -> Option<&'a str> {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
}

#[test]
fn a1_run_writes_csv_and_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = pni(&["run", "A1", "--set", "alpha=1", "--set", "t_end=1", "--out", out.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let csv = fs::read_to_string(out.join("A1.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,x1,x2,residual,u");
    assert_eq!(lines.count(), 1001);
    let report = fs::read_to_string(out.join("A1_report.txt")).unwrap();
    assert_eq!(report_value(&report, "eigenvalues"), Some("-1, -1"));
    assert_eq!(report_value(&report, "invariants"), Some("ok"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str| {
        let out = dir.path().join(name);
        let o = pni(&["run", "A3", "--set", "t_end=2", "--out", out.to_str().unwrap()], dir.path());
        assert!(o.status.success());
        fs::read(out.join("A3.csv")).unwrap()
    };
    assert_eq!(read("first"), read("second"));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# settings\nalpha = 3\nt_end = 0.5\n").unwrap();
    let out = dir.path().join("o");
    let o = pni(
        &["run", "a2", "--config", cfg.to_str().unwrap(), "--set", "alpha=2", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("A2_report.txt")).unwrap();
    assert_eq!(report_value(&report, "param.alpha"), Some("2"));
    assert_eq!(report_value(&report, "param.t_end"), Some("0.5"));
}

#[test]
fn excitation_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    for (signal, verdict) in [("PE", "PE"), ("IE", "IE_ONLY"), ("ZERO", "NEITHER")] {
        let out = dir.path().join(signal);
        let o = pni(&["run", "EXCITATION", "--set", &format!("signal={signal}"), "--out", out.to_str().unwrap()], dir.path());
        assert!(o.status.success());
        let report = fs::read_to_string(out.join("EXCITATION_report.txt")).unwrap();
        assert_eq!(report_value(&report, "verdict"), Some(verdict));
    }
}

#[test]
fn buck_header_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = pni(
        &["run", "BUCK_PNI", "--set", "t_end=0.01", "--sweep", "ki1=30,100", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for tag in ["30", "100"] {
        let csv = fs::read_to_string(out.join(format!("BUCK_PNI_ki1-{tag}.csv"))).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "t,vc,zeta1,il,zeta2,residual,u");
        let report = fs::read_to_string(out.join(format!("BUCK_PNI_ki1-{tag}_report.txt"))).unwrap();
        assert_eq!(report_value(&report, "param.ki1"), Some(tag));
        assert_eq!(report_value(&report, "hurwitz_active_block"), Some("true"));
    }
}

#[test]
fn estimation_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = pni(&["run", "EST_CGE", "--set", "signal=IE", "--set", "t_end=1", "--out", out.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("EST_CGE.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,err_1,err_2,err_3,err_norm");
}

#[test]
fn env_var_sets_default_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_pni"))
        .args(["run", "B1_LINEAR", "--set", "t_end=1"])
        .env("PNI_OUT_DIR", &out)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.join("B1_LINEAR.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();

    assert_eq!(pni(&["run", "NOPE", "--out", o], dir.path()).status.code(), Some(2));
    assert_eq!(pni(&["run", "A1", "--set", "alpah=1", "--out", o], dir.path()).status.code(), Some(2));
    assert_eq!(pni(&["run", "A1", "--set", "alpha=abc", "--out", o], dir.path()).status.code(), Some(2));

    // escapes to infinity before the horizon
    let blow = pni(&["run", "B1_LINEAR", "--set", "a11=50", "--set", "a22=50", "--set", "t_end=5", "--out", o], dir.path());
    assert_eq!(blow.status.code(), Some(3));

    // unstable but bounded over the horizon: runs, then flags the spectrum
    let bad = pni(&["run", "B1_LINEAR", "--set", "a11=1", "--set", "t_end=1", "--out", o], dir.path());
    assert_eq!(bad.status.code(), Some(4));
    let report = fs::read_to_string(out.join("B1_LINEAR_report.txt")).unwrap();
    assert!(report_value(&report, "invariants").unwrap().starts_with("violated"));
}

#[test]
fn list_names_every_study() {
    let dir = tempfile::tempdir().unwrap();
    let o = pni(&["list"], dir.path());
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for s in ["A1", "A2", "A3", "B1_LINEAR", "BUCK_DUAL_PI", "BUCK_PNI", "EST_GE", "EST_MRE", "EST_CGE", "EXCITATION"] {
        assert!(text.lines().any(|l| l.starts_with(s)), "{s}");
    }
}
