use std::path::Path;
use std::process::{Command, Output};

fn mtopt(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtopt"))
        .args(args)
        .env("MTOPT_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

/// Coarse, short configuration so runs finish in well under a second.
fn quick_config(dir: &Path) -> String {
    let path = dir.join("quick.toml");
    std::fs::write(
        &path,
        "[adapt]\ninitial_refines = 0\nmax_level = 1\n\n[stop]\nmax_iterations = 12\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let out = mtopt(
        &["run", "--config", &cfg, "--preset", "cantilever", "--vfrac", "0.3", "--nt", "3", "--out", "runs"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("c_p=1.03") && stdout.contains("beta_max=50"));
    let case = tmp.path().join("runs/cantilever_v0.30_nt3");
    for f in ["history.csv", "final.json", "summary.json", "config.toml"] {
        assert!(case.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(case.join("history.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "I,stage,p,beta,compliance,vol_frac,delta_rho_mean,cells");
    assert_eq!(csv.lines().count(), 13);
    assert!(std::fs::read_dir(&case).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "vtk")));

    let export_dir = tmp.path().join("exp");
    let out = mtopt(
        &[
            "export",
            case.join("final.json").to_str().unwrap(),
            "--nt",
            "3",
            "--out",
            export_dir.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(export_dir.join("level3_3.33mm.svg").exists());
    assert!(export_dir.join("level1_3.33mm.dxf").exists());
    assert!(export_dir.join("stack.stl").exists());

    let out = mtopt(&["export", case.join("final.json").to_str().unwrap(), "--nt", "2"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nt=3"));
}

#[test]
fn free_run_keeps_p_at_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let out = mtopt(
        &["run", "--config", &cfg, "--preset", "mbb", "--vfrac", "0.5", "--nt", "free", "--no-adapt"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("output/mbb_v0.50_ntfree/history.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    for rec in rdr.records() {
        let rec = rec.unwrap();
        assert_eq!(&rec[2], "1.0");
        assert_eq!(&rec[1], "unpenalized");
    }
}

#[test]
fn missing_vfrac_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mtopt(&["run", "--preset", "cantilever", "--nt", "3"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vfrac"));
}

#[test]
fn invalid_constant_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[continuation]\nc_p = 0.9\n").unwrap();
    let out = mtopt(&["run", "--config", path.to_str().unwrap(), "--vfrac", "0.3"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("c_p"));
}

#[test]
fn identical_config_gives_identical_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let mut logs = Vec::new();
    for out_dir in ["a", "b"] {
        let out = mtopt(
            &["run", "--config", &cfg, "--vfrac", "0.4", "--nt", "2", "--out", out_dir],
            tmp.path(),
        );
        assert!(out.status.success());
        logs.push(std::fs::read(tmp.path().join(out_dir).join("cantilever_v0.40_nt2/history.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn study_subset_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let out = mtopt(
        &["study", "--config", &cfg, "--preset", "cantilever", "--vfrac", "0.3", "--nt", "1,free", "--jobs", "2"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("output/study.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().next().unwrap().contains("gap_to_free_pct"));
    let free_row = csv.lines().find(|l| l.contains(",free,")).unwrap();
    assert!(free_row.contains(",0.0,"));
}

#[test]
fn study_failure_is_recorded_and_study_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("tight.toml");
    std::fs::write(
        &path,
        "[adapt]\ninitial_refines = 0\nmax_level = 1\n\n[stop]\nmax_iterations = 3\n\n[optimizer]\nlambda_min = 1e-9\nlambda_max = 1e-8\n",
    )
    .unwrap();
    let out = mtopt(
        &["study", "--config", path.to_str().unwrap(), "--preset", "mbb", "--vfrac", "0.3", "--nt", "1,2"],
        tmp.path(),
    );
    assert!(out.status.success());
    let csv = std::fs::read_to_string(tmp.path().join("output/study.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn verify_passes_with_defaults_and_fails_on_bad_constant() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mtopt(&["verify"], tmp.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("[PASS]")));

    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[continuation]\nc_p = 1.05\n").unwrap();
    let out = mtopt(&["verify", "--config", path.to_str().unwrap()], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL] continuation"));
}
