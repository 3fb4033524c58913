mod common;

use common::fixture;
use pwa_mrac::plot::{panel_frame, render_svg};
use pwa_mrac::scenario::run;

fn polylines(svg: &str) -> Vec<(String, Vec<(f64, f64)>)> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .map(|l| {
            let label = l.split("data-series=\"").nth(1).unwrap().split('"').next().unwrap().to_string();
            let pts = l.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
            let pts = pts
                .split(' ')
                .map(|p| {
                    let (x, y) = p.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect();
            (label, pts)
        })
        .collect()
}

#[test]
fn one_vertex_per_sample() {
    let s = fixture("matched").with_timing(None, Some(0.2)).unwrap();
    let res = run(&s).unwrap().result;
    assert_eq!(res.trace.len(), 3);
    let svg = render_svg(&res);
    let lines = polylines(&svg);
    // x, xhat per state, error norm, V, u and every gain
    assert_eq!(lines.len(), 2 * 2 + 3 + res.gain_names.len());
    assert!(lines.iter().all(|(_, p)| p.len() == 3));
    for id in ["panel-states", "panel-lyapunov", "panel-input", "panel-gains"] {
        assert!(svg.contains(&format!("<g id=\"{id}\">")));
    }
}

#[test]
fn event_markers_sit_at_event_times() {
    let res = run(&fixture("three_region").with_timing(None, Some(10.0)).unwrap()).unwrap().result;
    assert!(!res.events.is_empty());
    let svg = render_svg(&res);
    let frame = panel_frame(2);
    let (t0, t1) = (res.trace[0].t, res.trace.last().unwrap().t);
    let markers: Vec<f64> = svg
        .lines()
        .filter(|l| l.starts_with("<line class=\"event\""))
        .map(|l| l.split("x1=\"").nth(1).unwrap().split('"').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(markers.len(), res.events.len());
    for (m, e) in markers.iter().zip(&res.events) {
        let expected = frame.left + (e.t - t0) / (t1 - t0) * frame.width;
        assert!((m - expected).abs() <= 1e-3, "{m} vs {expected}");
    }
}

#[test]
fn zero_lyapunov_function_is_drawn_flat() {
    let res = run(&fixture("matched")).unwrap().result;
    let lines = polylines(&render_svg(&res));
    let (_, v) = lines.iter().find(|(l, _)| l == "V").unwrap();
    let frame = panel_frame(1);
    assert!(v.iter().all(|p| p.1 == v[0].1));
    assert!(v[0].1 >= frame.top && v[0].1 <= frame.top + frame.height);
}

#[test]
fn rendering_is_deterministic() {
    let res = run(&fixture("sliding")).unwrap().result;
    assert_eq!(render_svg(&res), render_svg(&res.clone()));
}
