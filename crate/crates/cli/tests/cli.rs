use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.scn"))
}

fn pwa_mrac(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwa-mrac"))
        .args(args)
        .env("PWA_MRAC_OUT", out_dir)
        .output()
        .unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn simulate_writes_trace_and_events() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("three_region");
    let out = pwa_mrac(&["simulate", s.to_str().unwrap(), "--json", "--t-final", "10"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["status"], "ok");
    assert!(v["metrics"]["final_error_norm"].is_number());
    let csv = std::fs::read_to_string(dir.path().join("three_region.csv")).unwrap();
    assert!(csv.starts_with("t,x1,x2,xhat1,xhat2,xe1,xe2,u,sigma,sigma_hat,V,W,kr"));
    assert!(dir.path().join("three_region.events").exists());
}

#[test]
fn verify_clf_reports_failing_mode() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("bad_modes");
    let out = pwa_mrac(&["verify-clf", s.to_str().unwrap(), "--json"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let v = json(&out);
    assert_eq!(v["status"], "certificate-failure");
    assert_eq!(v["violations"][0]["mode"], 1);
}

#[test]
fn verify_clf_accepts_certified_reference() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("pwa_reference");
    let out = pwa_mrac(&["verify-clf", s.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("margin"));
}

#[test]
fn invalid_input_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.scn");
    std::fs::write(&bad, "name = \"x\"\nn = 2\nt_final = -1.0\n").unwrap();
    let out = pwa_mrac(&["simulate", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let missing = dir.path().join("missing.scn");
    let out = pwa_mrac(&["simulate", missing.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validate_partition_passes_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("three_region");
    let out = pwa_mrac(&["validate-partition", s.to_str().unwrap(), "--json", "--samples", "2000"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["status"], "ok");
}

#[test]
fn compare_emits_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("bimodal_affine");
    let out = pwa_mrac(&["compare", s.to_str().unwrap(), "--json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["verdict"], "extended-better");
    assert!(v["ratio"].as_f64().unwrap() >= 10.0);
    assert!(v["extended_final_error"].as_f64().unwrap() <= 1e-3);
    assert!(dir.path().join("bimodal_affine.extended.csv").exists());
    assert!(dir.path().join("bimodal_affine.ablated.csv").exists());
}

#[test]
fn export_plot_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let s = scenario("sliding");
    for d in [&a, &b] {
        let out = pwa_mrac(&["export-plot", s.to_str().unwrap()], d.path());
        assert_eq!(out.status.code(), Some(0));
    }
    let svg_a = std::fs::read(a.path().join("sliding.svg")).unwrap();
    let svg_b = std::fs::read(b.path().join("sliding.svg")).unwrap();
    assert!(svg_a.starts_with(b"<svg"));
    assert_eq!(svg_a, svg_b);
}

#[test]
fn demo_document_is_simulated() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("constant_input_demo");
    let out = pwa_mrac(&["simulate", s.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("constant_input_demo.csv").exists());
}

#[test]
fn law_variant_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("bimodal_affine");
    let run = |variant: &str| {
        let out = pwa_mrac(&["simulate", s.to_str().unwrap(), "--json", "--law-variant", variant], dir.path());
        assert_eq!(out.status.code(), Some(0));
        json(&out)["metrics"]["final_error_norm"].as_f64().unwrap()
    };
    assert!(run("no-affine-compensation") > 10.0 * run("extended"));
}
