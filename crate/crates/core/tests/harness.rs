mod common;

use common::{fixture, fixture_text, CERTIFIED};
use pwa_mrac::certificate::{lyapunov_value, psi_diagnostics};
use pwa_mrac::scenario::{compare, export_trace, load_scenario, run, save_scenario, trace_header, Verdict};
use pwa_mrac::GainState;

#[test]
fn every_fixture_survives_save_and_load() {
    for name in CERTIFIED {
        let s = fixture(name);
        let again = load_scenario(&save_scenario(&s)).unwrap();
        assert_eq!(s, again, "{name}");
    }
}

#[test]
fn invalid_fixture_fails_certification() {
    let err = load_scenario(&fixture_text("bad_modes")).unwrap_err();
    assert!(err.to_string().contains("mode 1"), "{err}");
}

#[test]
fn matched_metrics_are_zero() {
    let m = run(&fixture("matched")).unwrap().metrics;
    assert_eq!(m.final_error_norm, 0.0);
    assert_eq!(m.sup_v, 0.0);
    assert_eq!(m.dv_violation_count, 0);
    assert_eq!(m.settling_time, Some(0.0));
}

#[test]
fn compare_on_matched_is_inconclusive() {
    let (cmp, _, _) = compare(&fixture("matched")).unwrap();
    assert_eq!(cmp.ratio, 1.0);
    assert_eq!(cmp.verdict, Verdict::Inconclusive);
}

#[test]
fn compare_verdicts_on_fixtures() {
    let (pwl, _, _) = compare(&fixture("pwl")).unwrap();
    assert_eq!(pwl.verdict, Verdict::Inconclusive);
    let (aff, _, _) = compare(&fixture("bimodal_affine")).unwrap();
    assert_eq!(aff.verdict, Verdict::ExtendedBetter);
}

#[test]
fn csv_has_one_row_per_sample() {
    let s = fixture("matched").with_timing(None, Some(0.2)).unwrap();
    let res = run(&s).unwrap().result;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    export_trace(&res, &path).unwrap();

    let mut rd = csv::Reader::from_path(&path).unwrap();
    let header = rd.headers().unwrap().clone();
    assert_eq!(header.len(), trace_header(2, &res.gain_names).len());
    let rows: Vec<_> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.len() == header.len()));
    let ts: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(ts, vec![0.0, 0.1, 0.2]);
}

#[test]
fn empty_trace_exports_header_only() {
    let mut res = run(&fixture("matched").with_timing(None, Some(0.1)).unwrap()).unwrap().result;
    res.trace.clear();
    res.events.clear();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    export_trace(&res, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("t,x1,x2,"));
}

#[test]
fn lyapunov_column_can_be_recomputed_from_csv() {
    let s = fixture("three_region").with_timing(None, Some(20.0)).unwrap();
    let res = run(&s).unwrap().result;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    export_trace(&res, &path).unwrap();

    let mut rd = csv::Reader::from_path(&path).unwrap();
    let header = rd.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (v_col, sigma_col, sigma_hat_col) = (col("V"), col("sigma"), col("sigma_hat"));
    let first_gain = col("kr");
    let b = s.plant.input_gain();
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec.unwrap();
        let num = |k: usize| rec[k].parse::<f64>().unwrap();
        let x = [num(1), num(2)];
        let x_e = [num(5), num(6)];
        let gains_flat: Vec<f64> = (first_gain..rec.len()).map(num).collect();
        let gains = GainState::from_effective_values(
            2,
            s.plant.mode_count(),
            s.reference.mode_count(),
            rec[sigma_col].parse().unwrap(),
            rec[sigma_hat_col].parse().unwrap(),
            &gains_flat,
        );
        let psi = psi_diagnostics(&s.plant, &s.reference, &gains, &x, 0.0, s.spec().psi_convention);
        let v = lyapunov_value(&s.certificate, &s.params, b, &x_e, &psi);
        let expected = num(v_col);
        assert!((v - expected).abs() <= 1e-12 * (1.0 + expected), "{v} vs {expected}");
        rows += 1;
    }
    assert_eq!(rows, res.trace.len());
}
