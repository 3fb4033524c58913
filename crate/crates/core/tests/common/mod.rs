//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::DMatrix;
use pwa_mrac::scenario::{load_scenario, Scenario};
use pwa_mrac::{GainState, Guard, ModeDynamics, PwaSystem, Region};
use rand::Rng;

pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn fixture_text(name: &str) -> String {
    std::fs::read_to_string(scenario_dir().join(format!("{name}.scn"))).unwrap()
}

pub fn fixture(name: &str) -> Scenario {
    load_scenario(&fixture_text(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Every closed-loop fixture that carries a valid certificate.
pub const CERTIFIED: [&str; 7] = [
    "matched",
    "bimodal_affine",
    "pwa_reference",
    "pwl",
    "sliding",
    "smooth_lti",
    "three_region",
];

/// Monic polynomial coefficients (highest power first, leading 1 dropped)
/// from its roots, given as real roots and complex pairs `(re, im)`.
pub fn poly_from_roots(real: &[f64], pairs: &[(f64, f64)]) -> Vec<f64> {
    let mut c = vec![1.0];
    let mul = |c: &Vec<f64>, f: &[f64]| {
        let mut out = vec![0.0; c.len() + f.len() - 1];
        for (i, a) in c.iter().enumerate() {
            for (j, b) in f.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        out
    };
    for r in real {
        c = mul(&c, &[1.0, -r]);
    }
    for (re, im) in pairs {
        c = mul(&c, &[1.0, -2.0 * re, re * re + im * im]);
    }
    c[1..].to_vec()
}

/// Last companion row for the characteristic polynomial with the given
/// coefficients: `s^n + c_1 s^{n-1} + ... + c_n` gives `(-c_n, ..., -c_1)`.
pub fn companion_row(coeffs: &[f64]) -> Vec<f64> {
    coeffs.iter().rev().map(|c| -c).collect()
}

pub fn random_hurwitz_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut real = Vec::new();
    let mut pairs = Vec::new();
    let mut k = 0;
    while k < n {
        if n - k >= 2 && rng.gen_bool(0.4) {
            pairs.push((rng.gen_range(-3.0..-0.5), rng.gen_range(0.1..2.0)));
            k += 2;
        } else {
            real.push(rng.gen_range(-3.0..-0.5));
            k += 1;
        }
    }
    companion_row(&poly_from_roots(&real, &pairs))
}

/// System with `m` modes split along `x_1` at the given sorted cut points.
pub fn sliced_system<R: Rng>(rng: &mut R, n: usize, cuts: &[f64], b: f64) -> PwaSystem {
    let m = cuts.len() + 1;
    let mut modes = Vec::new();
    let mut regions = Vec::new();
    let mut e1 = vec![0.0; n];
    e1[0] = 1.0;
    let neg: Vec<f64> = e1.iter().map(|v| -v).collect();
    for i in 0..m {
        let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        modes.push(ModeDynamics::new(row, rng.gen_range(-2.0..2.0)));
        let mut guards = Vec::new();
        if i > 0 {
            guards.push(Guard::new(e1.clone(), cuts[i - 1], false).unwrap());
        }
        if i + 1 < m {
            guards.push(Guard::new(neg.clone(), -cuts[i], true).unwrap());
        }
        regions.push(Region::new(guards));
    }
    PwaSystem::new(b, modes, regions).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Right-hand side of the last component of `ẋ_e` written in parameter
/// errors, built here from the raw model data and gains:
///
/// `â_σ̂·x_e + ψ_I·w - bβ y_e wᵀw + ψ̂_σ̂·x + ψ_σ·x + ψ_A0 + ψ_Aσ + ψ̂_Aσ̂`.
///
/// Returns the value and the sum of absolute values of its terms (the
/// scale for relative comparisons).
#[allow(clippy::too_many_arguments)]
pub fn psi_form_last(
    plant: &PwaSystem,
    reference: &PwaSystem,
    gains: &GainState,
    beta: f64,
    c_e: &[f64],
    x: &[f64],
    x_hat: &[f64],
    r: f64,
    sigma: usize,
    sigma_hat: usize,
) -> (f64, f64) {
    let n = x.len();
    let b = plant.input_gain();
    let x_e: Vec<f64> = x_hat.iter().zip(x).map(|(a, b)| a - b).collect();
    let y_e = dot(c_e, &x_e);
    let a0 = &plant.modes()[0];
    let ah0 = &reference.modes()[0];
    let a_s = &plant.modes()[sigma];
    let ah_s = &reference.modes()[sigma_hat];

    let mut w = x.to_vec();
    w.push(r);
    let mut psi_i: Vec<f64> = (0..n).map(|k| ah0.last_row[k] - a0.last_row[k] - b * gains.k0_integral[k]).collect();
    psi_i.push(reference.input_gain() - b * gains.kr_integral);

    let zero = vec![0.0; n];
    let (k_s, ka_s) = match sigma.checked_sub(1) {
        Some(j) => (gains.plant[j].value.k.clone(), gains.plant[j].value.ka),
        None => (zero.clone(), 0.0),
    };
    let (kh_s, kah_s) = match sigma_hat.checked_sub(1) {
        Some(j) => (gains.reference[j].value.k.clone(), gains.reference[j].value.ka),
        None => (zero.clone(), 0.0),
    };
    let psi_s: Vec<f64> = (0..n).map(|k| a0.last_row[k] - a_s.last_row[k] - b * k_s[k]).collect();
    let psih_s: Vec<f64> = (0..n).map(|k| ah_s.last_row[k] - ah0.last_row[k] - b * kh_s[k]).collect();
    let psi_a0 = (ah0.affine - a0.affine) - b * gains.k0a;
    let psi_as = (a0.affine - a_s.affine) - b * ka_s;
    let psih_as = (ah_s.affine - ah0.affine) - b * kah_s;

    let terms = [
        dot(&ah_s.last_row, &x_e),
        dot(&psi_i, &w),
        -b * beta * y_e * dot(&w, &w),
        dot(&psih_s, x),
        dot(&psi_s, x),
        psi_a0,
        psi_as,
        psih_as,
    ];
    (terms.iter().sum(), terms.iter().map(|t| t.abs()).sum())
}

pub fn random_spd<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.5
}
