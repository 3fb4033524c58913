//! Common quadratic Lyapunov certificate and the parameter-error
//! diagnostics used to evaluate the closed-loop Lyapunov function.
//!
//! A certificate is a symmetric positive definite `P` with
//! `P Â_î + Â_îᵀ P = -Q_î`, `Q_î > 0`, for every reference mode. The
//! margin `min_î λ_min(Q_î)` bounds the decrease rate of
//! `V` by `W(x_e) = margin · ‖x_e‖²`.
//!
//! Eigenvalue tolerances are absolute; scenarios are expected to have
//! matrices of order one.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive_law::{AdaptationParams, GainState};
use crate::linalg::dot;
use crate::pwa_model::PwaSystem;

/// Smallest accepted `λ_min(Q_î)`.
pub const MARGIN_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertificateError {
    #[error("matrix is not Hurwitz (max real part of eigenvalues = {max_real_part})")]
    NotHurwitz { max_real_part: f64 },
    #[error("matrix {0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("Lyapunov equation is singular")]
    Singular,
    #[error("{}", describe_violations(.violations, *.heuristic))]
    Violated {
        violations: Vec<ModeViolation>,
        /// Set when `P` came from the single-mode heuristic, in which case the
        /// failure does not rule out a common `P`.
        heuristic: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeViolation {
    pub mode: usize,
    pub lambda_min: f64,
}

fn describe_violations(v: &[ModeViolation], heuristic: bool) -> String {
    let modes: Vec<String> = v
        .iter()
        .map(|m| format!("mode {} (lambda_min(Q) = {:.6e})", m.mode, m.lambda_min))
        .collect();
    let mut s = format!("P A + A^T P is not negative definite for {}", modes.join(", "));
    if heuristic {
        s.push_str("; P was synthesized from mode 0 alone, so a common P may still exist");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub p: DMatrix<f64>,
    pub q_list: Vec<DMatrix<f64>>,
    pub margin: f64,
    /// `e_nᵀ P`.
    pub c_e: Vec<f64>,
}

impl Certificate {
    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    /// `y_e = C_e x_e`.
    pub fn output_error(&self, x_e: &[f64]) -> f64 {
        dot(&self.c_e, x_e)
    }

    /// `x_eᵀ P x_e`.
    pub fn quadratic(&self, x_e: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x_e);
        (v.transpose() * &self.p * &v)[(0, 0)]
    }

    /// Largest eigenvalue of `P Â_î + Â_îᵀ P` over every stored mode.
    pub fn worst_eigenvalue(&self) -> f64 {
        self.q_list
            .iter()
            .map(|q| (-q).symmetric_eigenvalues().max())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn is_hurwitz(a: &DMatrix<f64>) -> Result<(), CertificateError> {
    let max_real_part = a
        .complex_eigenvalues()
        .iter()
        .map(|e| e.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_real_part < 0.0 {
        Ok(())
    } else {
        Err(CertificateError::NotHurwitz { max_real_part })
    }
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    m.is_square() && (m - m.transpose()).amax() <= 1e-12 * scale && m.clone().cholesky().is_some()
}

/// Solves `Aᵀ P + P A = -Q` for symmetric `P`.
///
/// Vectorized Kronecker form with one step of iterative refinement; sized
/// for the small state dimensions this crate targets.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, CertificateError> {
    let n = a.nrows();
    if !a.is_square() {
        return Err(CertificateError::DimensionMismatch { expected: n, got: a.ncols() });
    }
    if q.nrows() != n || q.ncols() != n {
        return Err(CertificateError::DimensionMismatch { expected: n, got: q.nrows() });
    }
    if !is_spd(q) {
        return Err(CertificateError::NotPositiveDefinite("Q"));
    }
    is_hurwitz(a)?;

    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    // vec(Aᵀ P) = (I ⊗ Aᵀ) vec P, vec(P A) = (Aᵀ ⊗ I) vec P (column-major vec)
    let k = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DVector::from_column_slice(q.as_slice());
    let lu = k.clone().lu();
    let mut x = lu.solve(&rhs).ok_or(CertificateError::Singular)?;
    let resid = &rhs - &k * &x;
    if let Some(dx) = lu.solve(&resid) {
        x += dx;
    }
    let p = DMatrix::from_column_slice(n, n, x.as_slice());
    let p = (&p + p.transpose()) * 0.5;
    if !is_spd(&p) {
        return Err(CertificateError::NotPositiveDefinite("P"));
    }
    Ok(p)
}

/// Checks `P Â_î + Â_îᵀ P < 0` for every mode and assembles the certificate.
pub fn verify_clf(p: &DMatrix<f64>, ref_modes: &[DMatrix<f64>]) -> Result<Certificate, CertificateError> {
    let n = p.nrows();
    if !is_spd(p) {
        return Err(CertificateError::NotPositiveDefinite("P"));
    }
    let mut q_list = Vec::with_capacity(ref_modes.len());
    let mut violations = Vec::new();
    let mut margin = f64::INFINITY;
    for (mode, a) in ref_modes.iter().enumerate() {
        if a.nrows() != n || a.ncols() != n {
            return Err(CertificateError::DimensionMismatch { expected: n, got: a.nrows() });
        }
        let q = -(p * a + a.transpose() * p);
        let q = (&q + q.transpose()) * 0.5;
        let lambda_min = q.symmetric_eigenvalues().min();
        if lambda_min <= MARGIN_TOLERANCE {
            violations.push(ModeViolation { mode, lambda_min });
        }
        margin = margin.min(lambda_min);
        q_list.push(q);
    }
    if !violations.is_empty() {
        return Err(CertificateError::Violated {
            violations,
            heuristic: false,
        });
    }
    let c_e = p.row(n - 1).iter().copied().collect();
    Ok(Certificate {
        p: p.clone(),
        q_list,
        margin,
        c_e,
    })
}

/// Candidate common `P`: solve the Lyapunov equation of mode 0 with
/// right-hand side `q`, then verify against every mode. Incomplete: a
/// failure does not prove that no common `P` exists.
pub fn find_common_p(ref_modes: &[DMatrix<f64>], q: &DMatrix<f64>) -> Result<Certificate, CertificateError> {
    let first = ref_modes.first().ok_or(CertificateError::DimensionMismatch { expected: 1, got: 0 })?;
    let p = solve_lyapunov(first, q)?;
    verify_clf(&p, ref_modes).map_err(|e| match e {
        CertificateError::Violated { violations, .. } => CertificateError::Violated {
            violations,
            heuristic: true,
        },
        other => other,
    })
}

/// How the affine parameter errors are formed.
///
/// `Consistent` uses `ψ_A0 = (b̂_0 - b_0) - b K_0A` and
/// `ψ_Ai = (b_0 - b_i) - b K_Ai`, the only choice for which the error
/// dynamics close and `V̇ ≤ -W` holds for `b ≠ 1`. `Printed` keeps
/// `ψ_A0 = (b̂_0 - b_0) - K_0A` and `ψ_Ai = (b_i - b_0) - b K_Ai`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiConvention {
    #[default]
    Consistent,
    Printed,
}

/// Parameter errors of the closed loop at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiDiagnostics {
    /// Length `n + 1`: feedback part then reference-input part.
    pub psi_i: Vec<f64>,
    /// Plant regions `1..M`.
    pub psi_plant: Vec<Vec<f64>>,
    /// Reference regions `1..M̂`.
    pub psi_ref: Vec<Vec<f64>>,
    pub psi_a0: f64,
    pub psi_a_plant: Vec<f64>,
    pub psi_a_ref: Vec<f64>,
    /// Regressor `(xᵀ, r)ᵀ`.
    pub w: Vec<f64>,
}

/// Evaluates every parameter error from the true plant and reference data
/// and the current gains (held values for inactive regions).
pub fn psi_diagnostics(
    plant: &PwaSystem,
    reference: &PwaSystem,
    gains: &GainState,
    x: &[f64],
    r: f64,
    convention: PsiConvention,
) -> PsiDiagnostics {
    let b = plant.input_gain();
    let a0 = &plant.modes()[0];
    let ah0 = &reference.modes()[0];

    let mut psi_i: Vec<f64> = (0..plant.dim())
        .map(|k| ah0.last_row[k] - a0.last_row[k] - b * gains.k0_integral[k])
        .collect();
    psi_i.push(reference.input_gain() - b * gains.kr_integral);

    let mut psi_plant = Vec::new();
    let mut psi_a_plant = Vec::new();
    for (i, m) in plant.modes().iter().enumerate().skip(1) {
        let g = gains.plant_effective(i);
        psi_plant.push((0..plant.dim()).map(|k| a0.last_row[k] - m.last_row[k] - b * g.k[k]).collect());
        let db = match convention {
            PsiConvention::Consistent => a0.affine - m.affine,
            PsiConvention::Printed => m.affine - a0.affine,
        };
        psi_a_plant.push(db - b * g.ka);
    }

    let mut psi_ref = Vec::new();
    let mut psi_a_ref = Vec::new();
    for (i, m) in reference.modes().iter().enumerate().skip(1) {
        let g = gains.ref_effective(i);
        psi_ref.push((0..plant.dim()).map(|k| m.last_row[k] - ah0.last_row[k] - b * g.k[k]).collect());
        psi_a_ref.push((m.affine - ah0.affine) - b * g.ka);
    }

    let k0a_scale = match convention {
        PsiConvention::Consistent => b,
        PsiConvention::Printed => 1.0,
    };
    let psi_a0 = (ah0.affine - a0.affine) - k0a_scale * gains.k0a;

    let mut w = x.to_vec();
    w.push(r);
    PsiDiagnostics {
        psi_i,
        psi_plant,
        psi_ref,
        psi_a0,
        psi_a_plant,
        psi_a_ref,
        w,
    }
}

/// Named nonnegative terms whose sum is `V`.
pub fn lyapunov_terms(
    cert: &Certificate,
    params: &AdaptationParams,
    b: f64,
    x_e: &[f64],
    psi: &PsiDiagnostics,
) -> Vec<(String, f64)> {
    let ia = 1.0 / (params.alpha * b);
    let ir = 1.0 / (params.rho * b);
    let mut terms = vec![
        ("xe".to_string(), cert.quadratic(x_e)),
        ("psi_I".to_string(), ia * dot(&psi.psi_i, &psi.psi_i)),
    ];
    for (i, v) in psi.psi_plant.iter().enumerate() {
        terms.push((format!("psi_{}", i + 1), ir * dot(v, v)));
    }
    for (i, v) in psi.psi_ref.iter().enumerate() {
        terms.push((format!("psi_hat_{}", i + 1), ir * dot(v, v)));
    }
    terms.push(("psi_A0".to_string(), ir * psi.psi_a0 * psi.psi_a0));
    for (i, v) in psi.psi_a_plant.iter().enumerate() {
        terms.push((format!("psi_A{}", i + 1), ir * v * v));
    }
    for (i, v) in psi.psi_a_ref.iter().enumerate() {
        terms.push((format!("psi_hat_A{}", i + 1), ir * v * v));
    }
    terms
}

/// `V = x_eᵀ P x_e + ψ_I ψ_Iᵀ/(αb) + (Σ ψ ψᵀ + Σ ψ_A²)/(ρb)`.
pub fn lyapunov_value(cert: &Certificate, params: &AdaptationParams, b: f64, x_e: &[f64], psi: &PsiDiagnostics) -> f64 {
    lyapunov_terms(cert, params, b, x_e, psi).iter().map(|(_, v)| v).sum()
}

/// `W(x_e) = margin · ‖x_e‖²`.
pub fn w_bound(cert: &Certificate, x_e: &[f64]) -> f64 {
    cert.margin * dot(x_e, x_e)
}
