//! Switching adaptive control law.
//!
//! The control input is `u = K_R r + K_FB x + K_A`, where
//!
//! * `K_R = K_R^I + β y_e r` and `K_0 = K_0^I + β y_e xᵀ` are PI-adapted gains
//!   that are always on,
//! * `K_0A` is an always-on integral compensation of the affine terms,
//! * each plant region `j ≥ 1` owns a pair `(K_j, K_Aj)` and each reference
//!   region `ĵ ≥ 1` owns a pair `(K̂_ĵ, K̂_Aĵ)`; a pair adapts and contributes
//!   only while its region is active.
//!
//! Only integral parts are state; the β terms are recomputed from `y_e`.
//! When a region is left its pair is copied to a stored exit value and the
//! live value drops to zero; on re-entry the stored value is restored, or
//! zero on first activation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::dot;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LawError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid adaptation parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
}

/// Which control law to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LawVariant {
    /// Full law including the affine compensation gains.
    #[default]
    Extended,
    /// Affine compensation gains (`K_0A`, `K_Aj`, `K̂_Aĵ`) and their rates
    /// forced to zero.
    NoAffineCompensation,
}

impl LawVariant {
    pub fn compensates_affine(self) -> bool {
        matches!(self, LawVariant::Extended)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationParams {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub variant: LawVariant,
}

impl AdaptationParams {
    /// `alpha > 0`, `rho > 0`, `beta >= 0`. `beta = 0` is pure integral
    /// adaptation.
    pub fn new(alpha: f64, beta: f64, rho: f64) -> Result<Self, LawError> {
        let check = |name, value: f64, ok: bool, reason| {
            if value.is_finite() && ok {
                Ok(())
            } else {
                Err(LawError::InvalidParameter { name, value, reason })
            }
        };
        check("alpha", alpha, alpha > 0.0, "must be positive")?;
        check("beta", beta, beta >= 0.0, "must be nonnegative")?;
        check("rho", rho, rho > 0.0, "must be positive")?;
        Ok(Self {
            alpha,
            beta,
            rho,
            variant: LawVariant::Extended,
        })
    }

    pub fn with_variant(mut self, variant: LawVariant) -> Self {
        self.variant = variant;
        self
    }
}

/// A switching feedback row and its affine companion.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingGain {
    pub k: Vec<f64>,
    pub ka: f64,
}

impl SwitchingGain {
    pub fn zero(n: usize) -> Self {
        Self { k: vec![0.0; n], ka: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSlot {
    /// Live value; zero while the region is disengaged.
    pub value: SwitchingGain,
    /// Value at the most recent exit, `None` before the first exit.
    pub stored: Option<SwitchingGain>,
    pub engaged: bool,
}

impl GainSlot {
    fn new(n: usize) -> Self {
        Self {
            value: SwitchingGain::zero(n),
            stored: None,
            engaged: false,
        }
    }

    /// Live value when engaged, otherwise the held exit value (zero if the
    /// region was never left).
    pub fn effective(&self) -> SwitchingGain {
        if self.engaged {
            self.value.clone()
        } else {
            self.stored.clone().unwrap_or_else(|| SwitchingGain::zero(self.value.k.len()))
        }
    }

    fn engage(&mut self) {
        if !self.engaged {
            let n = self.value.k.len();
            self.value = self.stored.clone().unwrap_or_else(|| SwitchingGain::zero(n));
            self.engaged = true;
        }
    }

    fn disengage(&mut self) {
        if self.engaged {
            let n = self.value.k.len();
            self.stored = Some(std::mem::replace(&mut self.value, SwitchingGain::zero(n)));
            self.engaged = false;
        }
    }
}

/// All adaptive gains of the law. Slot `j - 1` of `plant` holds the pair of
/// plant region `j`; region 0 has no switching pair (same for `reference`).
#[derive(Debug, Clone, PartialEq)]
pub struct GainState {
    pub kr_integral: f64,
    pub k0_integral: Vec<f64>,
    pub k0a: f64,
    pub plant: Vec<GainSlot>,
    pub reference: Vec<GainSlot>,
    pub active_plant_mode: usize,
    pub active_ref_mode: usize,
}

impl GainState {
    /// Zero gains with the given initial modes engaged.
    pub fn new(n: usize, plant_modes: usize, ref_modes: usize, plant_mode: usize, ref_mode: usize) -> Self {
        let mut g = Self {
            kr_integral: 0.0,
            k0_integral: vec![0.0; n],
            k0a: 0.0,
            plant: (1..plant_modes).map(|_| GainSlot::new(n)).collect(),
            reference: (1..ref_modes).map(|_| GainSlot::new(n)).collect(),
            active_plant_mode: plant_mode,
            active_ref_mode: ref_mode,
        };
        g.engage_plant(plant_mode);
        g.engage_reference(ref_mode);
        g
    }

    pub fn dim(&self) -> usize {
        self.k0_integral.len()
    }

    pub fn plant_slot(&self, mode: usize) -> Option<&GainSlot> {
        mode.checked_sub(1).and_then(|j| self.plant.get(j))
    }

    pub fn ref_slot(&self, mode: usize) -> Option<&GainSlot> {
        mode.checked_sub(1).and_then(|j| self.reference.get(j))
    }

    /// Held-or-live value of plant region `mode`'s pair (zero for mode 0).
    pub fn plant_effective(&self, mode: usize) -> SwitchingGain {
        self.plant_slot(mode)
            .map(GainSlot::effective)
            .unwrap_or_else(|| SwitchingGain::zero(self.dim()))
    }

    pub fn ref_effective(&self, mode: usize) -> SwitchingGain {
        self.ref_slot(mode)
            .map(GainSlot::effective)
            .unwrap_or_else(|| SwitchingGain::zero(self.dim()))
    }

    pub(crate) fn engage_plant(&mut self, mode: usize) {
        if let Some(s) = mode.checked_sub(1).and_then(|j| self.plant.get_mut(j)) {
            s.engage();
        }
    }

    pub(crate) fn disengage_plant(&mut self, mode: usize) {
        if let Some(s) = mode.checked_sub(1).and_then(|j| self.plant.get_mut(j)) {
            s.disengage();
        }
    }

    pub(crate) fn engage_reference(&mut self, mode: usize) {
        if let Some(s) = mode.checked_sub(1).and_then(|j| self.reference.get_mut(j)) {
            s.engage();
        }
    }

    fn disengage_reference(&mut self, mode: usize) {
        if let Some(s) = mode.checked_sub(1).and_then(|j| self.reference.get_mut(j)) {
            s.disengage();
        }
    }

    /// Plant mode change `from -> to`: store the pair of `from`, restore (or
    /// zero-initialise) the pair of `to`.
    pub fn on_plant_switch(&mut self, from: usize, to: usize) {
        debug_assert_ne!(from, to);
        self.disengage_plant(from);
        self.engage_plant(to);
        self.active_plant_mode = to;
    }

    pub fn on_reference_switch(&mut self, from: usize, to: usize) {
        debug_assert_ne!(from, to);
        self.disengage_reference(from);
        self.engage_reference(to);
        self.active_ref_mode = to;
    }

    /// Number of scalars in the flat layout used by the integrator.
    pub fn flat_len(&self) -> usize {
        let n = self.dim();
        n + 2 + (self.plant.len() + self.reference.len()) * (n + 1)
    }

    /// Flat layout: `K_R^I, K_0^I, K_0A`, then every plant slot's `(K_j, K_Aj)`
    /// live value, then every reference slot's.
    pub fn write_flat(&self, out: &mut [f64]) {
        let n = self.dim();
        out[0] = self.kr_integral;
        out[1..=n].copy_from_slice(&self.k0_integral);
        out[n + 1] = self.k0a;
        let mut off = n + 2;
        for s in self.plant.iter().chain(&self.reference) {
            out[off..off + n].copy_from_slice(&s.value.k);
            out[off + n] = s.value.ka;
            off += n + 1;
        }
    }

    /// Inverse of [`GainState::write_flat`]; engagement flags and stored
    /// copies are left untouched.
    pub fn read_flat(&mut self, src: &[f64]) {
        let n = self.dim();
        self.kr_integral = src[0];
        self.k0_integral.copy_from_slice(&src[1..=n]);
        self.k0a = src[n + 1];
        let mut off = n + 2;
        for s in self.plant.iter_mut().chain(self.reference.iter_mut()) {
            s.value.k.copy_from_slice(&src[off..off + n]);
            s.value.ka = src[off + n];
            off += n + 1;
        }
    }

    pub(crate) fn plant_offset(&self, mode: usize) -> Option<usize> {
        let n = self.dim();
        (mode >= 1 && mode <= self.plant.len()).then(|| n + 2 + (mode - 1) * (n + 1))
    }

    pub(crate) fn ref_offset(&self, mode: usize) -> Option<usize> {
        let n = self.dim();
        (mode >= 1 && mode <= self.reference.len()).then(|| n + 2 + (self.plant.len() + mode - 1) * (n + 1))
    }

    /// Column names matching [`GainState::effective_values`].
    pub fn column_names(&self) -> Vec<String> {
        let n = self.dim();
        let mut names = vec!["kr".to_string()];
        names.extend((1..=n).map(|k| format!("k0_{k}")));
        names.push("k0a".into());
        for j in 1..=self.plant.len() {
            names.extend((1..=n).map(|k| format!("k{j}_{k}")));
            names.push(format!("ka{j}"));
        }
        for j in 1..=self.reference.len() {
            names.extend((1..=n).map(|k| format!("khat{j}_{k}")));
            names.push(format!("kahat{j}"));
        }
        names
    }

    /// Rebuilds a state from [`GainState::effective_values`]: the active
    /// slots are engaged with the given values, every other slot holds its
    /// value as a stored exit copy.
    pub fn from_effective_values(
        n: usize,
        plant_modes: usize,
        ref_modes: usize,
        plant_mode: usize,
        ref_mode: usize,
        values: &[f64],
    ) -> Self {
        let mut g = Self::new(n, plant_modes, ref_modes, plant_mode, ref_mode);
        g.read_flat(values);
        for (j, s) in g.plant.iter_mut().chain(g.reference.iter_mut()).enumerate() {
            let active = if j < plant_modes.saturating_sub(1) {
                j + 1 == plant_mode
            } else {
                j + 2 - plant_modes.max(1) == ref_mode
            };
            if !active {
                s.stored = Some(std::mem::replace(&mut s.value, SwitchingGain::zero(n)));
                s.engaged = false;
            }
        }
        g
    }

    /// Every gain in flat order, with held exit values for disengaged slots.
    pub fn effective_values(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        v.push(self.kr_integral);
        v.extend_from_slice(&self.k0_integral);
        v.push(self.k0a);
        for s in self.plant.iter().chain(&self.reference) {
            let e = s.effective();
            v.extend_from_slice(&e.k);
            v.push(e.ka);
        }
        v
    }
}

/// `y_e = e_nᵀ P x_e`.
pub fn output_error(p: &DMatrix<f64>, x_e: &[f64]) -> Result<f64, LawError> {
    let n = x_e.len();
    if p.nrows() != n || p.ncols() != n {
        return Err(LawError::DimensionMismatch {
            expected: p.nrows(),
            got: n,
        });
    }
    Ok((0..n).map(|k| p[(n - 1, k)] * x_e[k]).sum())
}

/// Control input with the modes recorded in `gains`.
pub fn control_input(gains: &GainState, params: &AdaptationParams, x: &[f64], r: f64, y_e: f64) -> Result<f64, LawError> {
    if x.len() != gains.dim() {
        return Err(LawError::DimensionMismatch {
            expected: gains.dim(),
            got: x.len(),
        });
    }
    Ok(control_input_in(
        gains,
        params,
        gains.active_plant_mode,
        gains.active_ref_mode,
        x,
        r,
        y_e,
    ))
}

/// Control input as if plant region `plant_mode` and reference region
/// `ref_mode` were active, using the live slot values.
pub(crate) fn control_input_in(
    gains: &GainState,
    params: &AdaptationParams,
    plant_mode: usize,
    ref_mode: usize,
    x: &[f64],
    r: f64,
    y_e: f64,
) -> f64 {
    let prop = params.beta * y_e;
    let mut u = (gains.kr_integral + prop * r) * r;
    u += dot(&gains.k0_integral, x) + prop * dot(x, x);
    let affine = params.variant.compensates_affine();
    if affine {
        u += gains.k0a;
    }
    for slot in [gains.plant_slot(plant_mode), gains.ref_slot(ref_mode)].into_iter().flatten() {
        u += dot(&slot.value.k, x);
        if affine {
            u += slot.value.ka;
        }
    }
    u
}

/// Time derivatives of the integral gains.
#[derive(Debug, Clone, PartialEq)]
pub struct GainRates {
    pub kr: f64,
    pub k0: Vec<f64>,
    pub k0a: f64,
    /// `(region, rate)` for the active plant pair; `None` in region 0.
    pub plant: Option<(usize, SwitchingGain)>,
    pub reference: Option<(usize, SwitchingGain)>,
}

pub fn gain_rates(params: &AdaptationParams, x: &[f64], r: f64, y_e: f64, plant_mode: usize, ref_mode: usize) -> GainRates {
    let affine = params.variant.compensates_affine();
    let switching = |mode: usize| {
        (mode >= 1).then(|| {
            (
                mode,
                SwitchingGain {
                    k: x.iter().map(|xi| params.rho * y_e * xi).collect(),
                    ka: if affine { params.rho * y_e } else { 0.0 },
                },
            )
        })
    };
    GainRates {
        kr: params.alpha * y_e * r,
        k0: x.iter().map(|xi| params.alpha * y_e * xi).collect(),
        k0a: if affine { params.rho * y_e } else { 0.0 },
        plant: switching(plant_mode),
        reference: switching(ref_mode),
    }
}

/// Writes the flat-layout gain derivative, with the plant pair rate scaled
/// by `plant_weight` (Filippov weight during sliding; 1 otherwise).
/// Accumulates into `out` for the switching slots.
#[allow(clippy::too_many_arguments)]
pub(crate) fn write_gain_rates(
    gains: &GainState,
    params: &AdaptationParams,
    x: &[f64],
    r: f64,
    y_e: f64,
    plant_modes: &[(usize, f64)],
    ref_mode: usize,
    out: &mut [f64],
) {
    let n = gains.dim();
    let affine = params.variant.compensates_affine();
    out.iter_mut().for_each(|v| *v = 0.0);
    out[0] = params.alpha * y_e * r;
    for k in 0..n {
        out[1 + k] = params.alpha * y_e * x[k];
    }
    out[n + 1] = if affine { params.rho * y_e } else { 0.0 };
    let mut add = |off: Option<usize>, w: f64| {
        if let Some(off) = off {
            for k in 0..n {
                out[off + k] += w * params.rho * y_e * x[k];
            }
            if affine {
                out[off + n] += w * params.rho * y_e;
            }
        }
    };
    for &(mode, w) in plant_modes {
        add(gains.plant_offset(mode), w);
    }
    add(gains.ref_offset(ref_mode), 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(alpha: f64, beta: f64, rho: f64) -> AdaptationParams {
        AdaptationParams::new(alpha, beta, rho).unwrap()
    }

    #[test]
    fn output_error_examples() {
        assert_eq!(output_error(&DMatrix::identity(2, 2), &[3.0, 4.0]).unwrap(), 4.0);
        let p = DMatrix::from_row_slice(2, 2, &[1.5, 0.5, 0.5, 1.0]);
        assert_eq!(output_error(&p, &[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(output_error(&p, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(output_error(&p, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn parameter_validation() {
        assert!(AdaptationParams::new(1.0, 0.0, 1.0).is_ok());
        assert!(AdaptationParams::new(1.0, -1.0, 1.0).is_err());
        assert!(AdaptationParams::new(0.0, 1.0, 1.0).is_err());
        assert!(AdaptationParams::new(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn control_input_examples() {
        let p = params(1.0, 0.0, 1.0);
        let g = GainState::new(2, 2, 1, 0, 0);
        assert_eq!(control_input(&g, &p, &[3.0, -1.0], 2.0, 0.7).unwrap(), 0.0);

        let mut g = GainState::new(2, 2, 1, 0, 0);
        g.kr_integral = 2.0;
        assert_eq!(control_input(&g, &p, &[0.0, 0.0], 3.0, 0.0).unwrap(), 6.0);

        let mut g = GainState::new(2, 2, 1, 1, 0);
        g.k0a = 1.0;
        g.plant[0].value.ka = 0.5;
        assert_eq!(control_input(&g, &p, &[0.0, 0.0], 0.0, 0.0).unwrap(), 1.5);
    }

    #[test]
    fn gain_rate_examples() {
        let p = params(2.0, 1.0, 1.0);
        let r = gain_rates(&p, &[1.0, -1.0], 3.0, 0.0, 1, 1);
        assert_eq!(r.kr, 0.0);
        assert!(r.k0.iter().all(|&v| v == 0.0));
        assert_eq!(r.plant.unwrap().1, SwitchingGain::zero(2));

        let r = gain_rates(&p, &[1.0, -1.0], 0.0, 2.0, 1, 0);
        assert_eq!(r.plant, Some((1, SwitchingGain { k: vec![2.0, -2.0], ka: 2.0 })));
        assert_eq!(r.reference, None);

        let r = gain_rates(&p, &[1.0, -1.0], 0.0, 2.0, 0, 0);
        assert_eq!(r.plant, None);
    }

    #[test]
    fn first_entry_zero_and_restore_exact() {
        let mut g = GainState::new(2, 3, 1, 1, 0);
        g.plant[0].value = SwitchingGain { k: vec![4.0, 7.0], ka: 0.25 };
        g.on_plant_switch(1, 2);
        assert_eq!(g.plant[1].value, SwitchingGain::zero(2));
        g.plant[1].value.k[0] = 9.0;
        g.on_plant_switch(2, 0);
        g.on_plant_switch(0, 1);
        assert_eq!(g.plant[0].value, SwitchingGain { k: vec![4.0, 7.0], ka: 0.25 });
        assert_eq!(g.plant[1].stored.as_ref().unwrap().k, vec![9.0, 0.0]);
        assert!(!g.plant[1].engaged);
    }

    #[test]
    fn reference_reset_mirrors_plant() {
        let mut g = GainState::new(2, 1, 2, 0, 0);
        g.on_reference_switch(0, 1);
        assert_eq!(g.reference[0].value, SwitchingGain::zero(2));
        g.reference[0].value = SwitchingGain { k: vec![1.0, 2.0], ka: 3.0 };
        g.on_reference_switch(1, 0);
        assert_eq!(g.reference[0].value, SwitchingGain::zero(2));
        g.on_reference_switch(0, 1);
        assert_eq!(g.reference[0].value, SwitchingGain { k: vec![1.0, 2.0], ka: 3.0 });

        let lti = GainState::new(2, 2, 1, 0, 0);
        assert!(lti.reference.is_empty());
    }

    #[test]
    fn flat_layout_round_trips() {
        let mut g = GainState::new(2, 3, 2, 2, 1);
        let vals: Vec<f64> = (0..g.flat_len()).map(|k| k as f64 + 0.5).collect();
        g.read_flat(&vals);
        let mut out = vec![0.0; g.flat_len()];
        g.write_flat(&mut out);
        assert_eq!(out, vals);
        assert_eq!(g.column_names().len(), g.flat_len());
        assert_eq!(g.plant_offset(2), Some(4 + 3));
        assert_eq!(g.ref_offset(1), Some(4 + 6));
    }

    proptest! {
        #[test]
        fn only_active_pairs_contribute(x in proptest::collection::vec(-3.0..3.0f64, 2), r in -2.0..2.0f64, ye in -1.0..1.0f64, noise in -5.0..5.0f64) {
            let p = params(1.0, 0.5, 1.0);
            let mut g = GainState::new(2, 3, 3, 1, 2);
            g.plant[0].value = SwitchingGain { k: vec![0.3, -0.2], ka: 0.1 };
            g.reference[1].value = SwitchingGain { k: vec![-0.4, 0.6], ka: 0.2 };
            let base = control_input(&g, &p, &x, r, ye).unwrap();
            // inactive slots carry whatever they carry; u must not see it
            g.plant[1].stored = Some(SwitchingGain { k: vec![noise, noise], ka: noise });
            g.reference[0].stored = Some(SwitchingGain { k: vec![noise, -noise], ka: noise });
            prop_assert_eq!(control_input(&g, &p, &x, r, ye).unwrap(), base);
        }

        #[test]
        fn switch_there_and_back_restores(k0 in -10.0..10.0f64, k1 in -10.0..10.0f64, ka in -10.0..10.0f64) {
            let mut g = GainState::new(2, 3, 1, 1, 0);
            let v = SwitchingGain { k: vec![k0, k1], ka };
            g.plant[0].value = v.clone();
            g.on_plant_switch(1, 2);
            g.on_plant_switch(2, 1);
            prop_assert_eq!(&g.plant[0].value, &v);
        }

        #[test]
        fn proportional_path_is_memoryless(x in proptest::collection::vec(-3.0..3.0f64, 2), r in -2.0..2.0f64, ye in -1.0..1.0f64, beta in 0.0..3.0f64) {
            // zero integral parts: u = β y_e r·r + β y_e xᵀx
            let p = params(1.0, beta, 1.0);
            let g = GainState::new(2, 1, 1, 0, 0);
            let u = control_input(&g, &p, &x, r, ye).unwrap();
            let expect = beta * ye * r * r + beta * ye * (x[0] * x[0] + x[1] * x[1]);
            prop_assert!((u - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }
}
