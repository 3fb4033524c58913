//! Event-driven integration of the closed loop.
//!
//! The augmented state is `z = (x, x̂, gains)`. Between events it is advanced
//! by fixed-step RK4 with the plant and reference modes frozen. A step over
//! which the state leaves the closure of its current region is rejected and
//! the boundary crossing is located by bisection on the step fraction.
//!
//! At a plant boundary the two adjacent fields decide the outcome: a
//! transversal crossing switches mode, an attracting pair starts Filippov
//! sliding on the hyperplane. While sliding the field is
//! `(1 - γ) f_minus + γ f_plus` with `γ` chosen for tangency, recomputed at
//! every stage; the switching gains of both adjacent regions adapt with
//! weights `1 - γ` and `γ`. Sliding ends when `γ` reaches 0 or 1.
//!
//! Sliding on intersections of two or more surfaces is not supported, and a
//! sliding reference model is rejected.

use thiserror::Error;

use crate::adaptive_law::{control_input_in, write_gain_rates, AdaptationParams, GainState};
use crate::certificate::{lyapunov_terms, psi_diagnostics, w_bound, Certificate, PsiConvention};
use crate::linalg::{dot, sub};
use crate::pwa_model::{GuardId, ModelError, PwaSystem};
use crate::signal::ReferenceInput;

/// Bisection stops once the crossing is bracketed this tightly.
pub const EVENT_TOLERANCE: f64 = 1e-10;
/// Maximum bisection steps when locating an event.
pub const MAX_BISECTIONS: usize = 200;
/// Allowed per-step increase of `V`, relative to `1 + V`.
pub const DV_TOLERANCE: f64 = 1e-6;
/// Consecutive crossings of one surface (each within a step of the last)
/// after which sliding is forced when the fields are weakly attracting.
pub const CHATTER_LIMIT: u32 = 3;
const MAX_STALLED_EVENTS: usize = 1000;

#[derive(Debug, Error)]
pub enum IntegrationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("state became non-finite at t = {t}")]
    Divergence {
        t: f64,
        partial: Option<Box<SimulationResult>>,
    },
    #[error("reference model must not slide (attracting contact on guard {guard:?} at t = {t})")]
    ReferenceSliding { t: f64, guard: GuardId },
    #[error("sliding reached a second switching surface (guard {guard:?}) at t = {t}; sliding on surface intersections is unsupported")]
    UnsupportedSliding { t: f64, guard: GuardId },
    #[error("degenerate contact: both fields tangent to the switching surface at t = {t}")]
    DegenerateContact { t: f64 },
    #[error("integration stalled: {0} consecutive events without time advancing at t = {1}")]
    Stalled(usize, f64),
    #[error("invalid integration setting: {0}")]
    InvalidConfig(String),
}

/// The closed loop to integrate: models, law, certificate and input.
#[derive(Debug, Clone, Copy)]
pub struct ClosedLoop<'a> {
    pub plant: &'a PwaSystem,
    pub reference: &'a PwaSystem,
    pub params: AdaptationParams,
    pub certificate: &'a Certificate,
    pub input: &'a ReferenceInput,
    pub convention: PsiConvention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopState {
    pub t: f64,
    pub x: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub gains: GainState,
}

impl ClosedLoopState {
    pub fn error(&self) -> Vec<f64> {
        sub(&self.x_hat, &self.x)
    }
}

/// Time derivative of the augmented state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopDerivative {
    pub x: Vec<f64>,
    pub x_hat: Vec<f64>,
    /// Flat gain layout, see [`GainState::write_flat`].
    pub gains: Vec<f64>,
    pub u: f64,
}

/// Codimension-one sliding surface between two plant regions.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingSurface {
    pub minus: usize,
    pub plus: usize,
    pub guard: GuardId,
    /// Unit normal pointing from `minus` into `plus`.
    pub normal: Vec<f64>,
    /// `normal · x = offset` on the surface.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlantPhase {
    Mode(usize),
    Sliding(SlidingSurface),
}

impl PlantPhase {
    /// Mode used for labelling: the entry side while sliding.
    pub fn mode(&self) -> usize {
        match self {
            PlantPhase::Mode(i) => *i,
            PlantPhase::Sliding(s) => s.minus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlidingVerdict {
    /// Attracting contact; `gamma` is the weight of the plus-side field.
    Sliding { gamma: f64 },
    /// Both fields cross the surface in the same direction.
    Crossing,
    /// Both fields point away from the surface.
    Repulsive,
}

/// Filippov weight for a codimension-one surface with `normal` oriented
/// from the minus region to the plus region.
pub fn sliding_gamma(f_minus: &[f64], f_plus: &[f64], normal: &[f64]) -> Result<SlidingVerdict, IntegrationError> {
    let a = dot(normal, f_minus);
    let b = dot(normal, f_plus);
    if a == 0.0 && b == 0.0 {
        return Err(IntegrationError::DegenerateContact { t: f64::NAN });
    }
    Ok(if a > 0.0 && b < 0.0 {
        SlidingVerdict::Sliding { gamma: a / (a - b) }
    } else if a < 0.0 && b > 0.0 {
        SlidingVerdict::Repulsive
    } else {
        SlidingVerdict::Crossing
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    PlantSwitch { from: usize, to: usize, guard: GuardId },
    ReferenceSwitch { from: usize, to: usize, guard: GuardId },
    SlidingEnter { minus: usize, plus: usize, guard: GuardId, gamma: f64, forced: bool },
    SlidingExit { minus: usize, plus: usize, into: usize, gamma: f64 },
    /// Both fields leave the surface; integration continued in `chosen`.
    RepulsiveContact { minus: usize, plus: usize, guard: GuardId, chosen: usize },
}

impl EventKind {
    pub fn label(&self) -> &'static str {
        match self {
            EventKind::PlantSwitch { .. } => "plant-switch",
            EventKind::ReferenceSwitch { .. } => "reference-switch",
            EventKind::SlidingEnter { .. } => "sliding-enter",
            EventKind::SlidingExit { .. } => "sliding-exit",
            EventKind::RepulsiveContact { .. } => "repulsive-contact",
        }
    }

    pub fn detail(&self) -> String {
        match self {
            EventKind::PlantSwitch { from, to, guard } | EventKind::ReferenceSwitch { from, to, guard } => {
                format!("from={from} to={to} guard={}.{}", guard.region, guard.guard)
            }
            EventKind::SlidingEnter {
                minus,
                plus,
                guard,
                gamma,
                forced,
            } => format!(
                "minus={minus} plus={plus} guard={}.{} gamma={gamma:.17e} forced={forced}",
                guard.region, guard.guard
            ),
            EventKind::SlidingExit { minus, plus, into, gamma } => {
                format!("minus={minus} plus={plus} into={into} gamma={gamma:.17e}")
            }
            EventKind::RepulsiveContact {
                minus,
                plus,
                guard,
                chosen,
            } => format!("minus={minus} plus={plus} guard={}.{} chosen={chosen}", guard.region, guard.guard),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub t: f64,
    pub kind: EventKind,
    pub gains_before: GainState,
    pub gains_after: GainState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub x_e: Vec<f64>,
    pub u: f64,
    pub sigma: usize,
    pub sigma_hat: usize,
    pub v: f64,
    pub w: f64,
    /// Individual terms of `V`, named by [`SimulationResult::v_term_names`].
    pub v_terms: Vec<f64>,
    /// Effective gains, named by [`SimulationResult::gain_names`].
    pub gains: Vec<f64>,
    /// Filippov weight while sliding.
    pub gamma: Option<f64>,
    /// Recorded right after an event rather than on the time grid.
    pub at_event: bool,
}

/// Diagnostics at the end of every accepted sliding step.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingSample {
    pub t: f64,
    pub gamma: f64,
    /// `normal · f_F`.
    pub residual: f64,
    pub f_minus_norm: f64,
    pub f_plus_norm: f64,
    /// `|normal · x - offset|`.
    pub surface_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub trace: Vec<TraceRecord>,
    pub events: Vec<EventRecord>,
    /// `(t, ΔV)` for every accepted step with `ΔV > DV_TOLERANCE · (1 + V)`.
    pub violations: Vec<(f64, f64)>,
    pub sliding: Vec<SlidingSample>,
    pub sliding_time: f64,
    /// One entry per accepted step (and per event), starting at `t = 0`.
    pub steps: Vec<StepStat>,
    /// Sup over all steps of `|gain|`, per column of `gain_names`.
    pub gain_sup: Vec<f64>,
    pub gain_names: Vec<String>,
    pub v_term_names: Vec<String>,
    pub final_state: ClosedLoopState,
}

impl SimulationResult {
    /// Plant switching sequence `(mode, activation time)`, starting with the
    /// initial mode at the first trace time.
    pub fn plant_sequence(&self) -> Vec<(usize, f64)> {
        let mut seq = vec![(self.trace.first().map_or(0, |r| r.sigma), self.trace.first().map_or(0.0, |r| r.t))];
        for e in &self.events {
            let next = match e.kind {
                EventKind::PlantSwitch { to, .. } => Some(to),
                EventKind::SlidingExit { into, .. } => Some(into),
                EventKind::RepulsiveContact { chosen, .. } => Some(chosen),
                _ => None,
            };
            if let Some(m) = next {
                if seq.last().map(|s| s.0) != Some(m) {
                    seq.push((m, e.t));
                }
            }
        }
        seq
    }

    pub fn reference_sequence(&self) -> Vec<(usize, f64)> {
        let mut seq = vec![(
            self.trace.first().map_or(0, |r| r.sigma_hat),
            self.trace.first().map_or(0.0, |r| r.t),
        )];
        for e in &self.events {
            if let EventKind::ReferenceSwitch { to, .. } = e.kind {
                seq.push((to, e.t));
            }
        }
        seq
    }
}

/// Initial values of `K_R^I`, `K_0^I` and `K_0A`; switching gains always
/// start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialGains {
    pub kr: f64,
    pub k0: Vec<f64>,
    pub k0a: f64,
}

impl InitialGains {
    pub fn zero(n: usize) -> Self {
        Self {
            kr: 0.0,
            k0: vec![0.0; n],
            k0a: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStat {
    pub t: f64,
    pub error_norm: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationConfig {
    pub t_final: f64,
    pub dt: f64,
    pub sample_stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Watch {
    PlantGuard(GuardId),
    RefGuard(GuardId),
    SecondSurface(GuardId),
    ExitToMinus,
    ExitToPlus,
}

struct FieldInfo {
    u: f64,
    gamma: Option<f64>,
    a: f64,
    b: f64,
    f_minus_norm: f64,
    f_plus_norm: f64,
}

struct Hit {
    watch: Watch,
    theta_lo: f64,
    theta_hi: f64,
    z_lo: Vec<f64>,
    z_hi: Vec<f64>,
}

/// Outcome of [`Integrator::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub t: f64,
    pub event: Option<EventRecord>,
    /// Filippov diagnostics at the end of an event-free sliding step.
    pub sliding_sample: Option<SlidingSample>,
    /// True when the accepted interval was spent sliding.
    pub sliding: bool,
}

/// Steppable closed-loop integrator.
pub struct Integrator<'a> {
    sys: ClosedLoop<'a>,
    n: usize,
    t: f64,
    z: Vec<f64>,
    phase: PlantPhase,
    ref_mode: usize,
    gains: GainState,
    scratch: GainState,
    chatter: Option<((usize, usize), f64, u32)>,
    last_h: f64,
}

impl<'a> Integrator<'a> {
    pub fn new(sys: ClosedLoop<'a>, x0: &[f64], x_hat0: &[f64]) -> Result<Self, IntegrationError> {
        let n = sys.plant.dim();
        if x0.len() != n || x_hat0.len() != n || sys.reference.dim() != n || sys.certificate.dim() != n {
            return Err(IntegrationError::InvalidConfig(format!(
                "dimension mismatch: plant n = {n}, reference n = {}, certificate n = {}, x0 {}, x_hat0 {}",
                sys.reference.dim(),
                sys.certificate.dim(),
                x0.len(),
                x_hat0.len()
            )));
        }
        let mode = sys.plant.active_region(x0)?;
        let ref_mode = sys.reference.active_region(x_hat0)?;
        let gains = GainState::new(n, sys.plant.mode_count(), sys.reference.mode_count(), mode, ref_mode);
        let mut z = vec![0.0; 2 * n + gains.flat_len()];
        z[..n].copy_from_slice(x0);
        z[n..2 * n].copy_from_slice(x_hat0);
        gains.write_flat(&mut z[2 * n..]);
        Ok(Self {
            sys,
            n,
            t: 0.0,
            z,
            phase: PlantPhase::Mode(mode),
            ref_mode,
            scratch: gains.clone(),
            gains,
            chatter: None,
            last_h: 0.0,
        })
    }

    /// Overrides the initial always-on integral gains.
    pub fn set_integral_gains(&mut self, init: &InitialGains) -> Result<(), IntegrationError> {
        let n = self.n;
        if init.k0.len() != n || !init.kr.is_finite() || !init.k0a.is_finite() || init.k0.iter().any(|v| !v.is_finite()) {
            return Err(IntegrationError::InvalidConfig(format!(
                "initial gains need finite kr, k0a and {n} finite k0 entries"
            )));
        }
        self.z[2 * n] = init.kr;
        self.z[2 * n + 1..3 * n + 1].copy_from_slice(&init.k0);
        self.z[3 * n + 1] = init.k0a;
        self.sync_gains_from(&self.z.clone());
        Ok(())
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn phase(&self) -> &PlantPhase {
        &self.phase
    }

    pub fn ref_mode(&self) -> usize {
        self.ref_mode
    }

    pub fn state(&self) -> ClosedLoopState {
        let n = self.n;
        let mut gains = self.gains.clone();
        gains.read_flat(&self.z[2 * n..]);
        ClosedLoopState {
            t: self.t,
            x: self.z[..n].to_vec(),
            x_hat: self.z[n..2 * n].to_vec(),
            gains,
        }
    }

    /// Lyapunov value, decrease bound and individual terms at the current state.
    pub fn lyapunov(&self) -> (f64, f64, Vec<(String, f64)>) {
        let s = self.state();
        let x_e = s.error();
        let psi = psi_diagnostics(
            self.sys.plant,
            self.sys.reference,
            &s.gains,
            &s.x,
            self.sys.input.value(self.t),
            self.sys.convention,
        );
        let terms = lyapunov_terms(self.sys.certificate, &self.sys.params, self.sys.plant.input_gain(), &x_e, &psi);
        let v = terms.iter().map(|(_, v)| v).sum();
        (v, w_bound(self.sys.certificate, &x_e), terms)
    }

    /// Closed-loop field at `z` for the given phase; writes `out`.
    #[allow(clippy::too_many_arguments)]
    fn field(&mut self, z: &[f64], t_stage: f64, t0: f64, t1: f64, phase: &PlantPhase, ref_mode: usize, out: &mut [f64]) -> FieldInfo {
        let n = self.n;
        let sys = self.sys;
        let (x, rest) = z.split_at(n);
        let x_hat = &rest[..n];
        self.scratch.read_flat(&rest[n..]);
        let y_e: f64 = (0..n).map(|k| sys.certificate.c_e[k] * (x_hat[k] - x[k])).sum();
        let r = sys.input.value_on_step(t0, t1, t_stage);

        sys.reference
            .mode_derivative_into(&sys.reference.modes()[ref_mode], x_hat, r, &mut out[n..2 * n]);

        let b_in = sys.plant.input_gain();
        let last = |mode: usize, u: f64| {
            let m = &sys.plant.modes()[mode];
            dot(&m.last_row, x) + b_in * u + m.affine
        };
        let (info, weights): (FieldInfo, [(usize, f64); 2]) = match phase {
            PlantPhase::Mode(i) => {
                let u = control_input_in(&self.scratch, &sys.params, *i, ref_mode, x, r, y_e);
                out[..n - 1].copy_from_slice(&x[1..]);
                out[n - 1] = last(*i, u);
                (
                    FieldInfo {
                        u,
                        gamma: None,
                        a: 0.0,
                        b: 0.0,
                        f_minus_norm: 0.0,
                        f_plus_norm: 0.0,
                    },
                    [(*i, 1.0), (usize::MAX, 0.0)],
                )
            }
            PlantPhase::Sliding(s) => {
                let u_m = control_input_in(&self.scratch, &sys.params, s.minus, ref_mode, x, r, y_e);
                let u_p = control_input_in(&self.scratch, &sys.params, s.plus, ref_mode, x, r, y_e);
                let fm = last(s.minus, u_m);
                let fp = last(s.plus, u_p);
                let shared: f64 = (0..n - 1).map(|k| s.normal[k] * x[k + 1]).sum();
                let shared_sq: f64 = x[1..].iter().map(|v| v * v).sum();
                let a = shared + s.normal[n - 1] * fm;
                let b = shared + s.normal[n - 1] * fp;
                let denom = a - b;
                let gamma = if denom > 0.0 {
                    (a / denom).clamp(0.0, 1.0)
                } else if a > 0.0 {
                    1.0
                } else {
                    0.0
                };
                out[..n - 1].copy_from_slice(&x[1..]);
                out[n - 1] = (1.0 - gamma) * fm + gamma * fp;
                (
                    FieldInfo {
                        u: (1.0 - gamma) * u_m + gamma * u_p,
                        gamma: Some(gamma),
                        a,
                        b,
                        f_minus_norm: (shared_sq + fm * fm).sqrt(),
                        f_plus_norm: (shared_sq + fp * fp).sqrt(),
                    },
                    [(s.minus, 1.0 - gamma), (s.plus, gamma)],
                )
            }
        };
        let plant_weights: Vec<(usize, f64)> = weights.into_iter().filter(|w| w.0 != usize::MAX).collect();
        write_gain_rates(&self.scratch, &sys.params, x, r, y_e, &plant_weights, ref_mode, &mut out[2 * n..]);
        info
    }

    fn project(&self, z: &mut [f64], phase: &PlantPhase) {
        if let PlantPhase::Sliding(s) = phase {
            let d = dot(&s.normal, &z[..self.n]) - s.offset;
            for k in 0..self.n {
                z[k] -= d * s.normal[k];
            }
        }
    }

    fn rk4(&mut self, z0: &[f64], t0: f64, h: f64, t_end: f64, phase: &PlantPhase, ref_mode: usize) -> Vec<f64> {
        let len = z0.len();
        let mut k1 = vec![0.0; len];
        let mut k2 = vec![0.0; len];
        let mut k3 = vec![0.0; len];
        let mut k4 = vec![0.0; len];
        let mut tmp = vec![0.0; len];
        let te = t0 + h;
        let _ = t_end;
        self.field(z0, t0, t0, te, phase, ref_mode, &mut k1);
        for i in 0..len {
            tmp[i] = z0[i] + 0.5 * h * k1[i];
        }
        self.field(&tmp.clone(), t0 + 0.5 * h, t0, te, phase, ref_mode, &mut k2);
        for i in 0..len {
            tmp[i] = z0[i] + 0.5 * h * k2[i];
        }
        self.field(&tmp.clone(), t0 + 0.5 * h, t0, te, phase, ref_mode, &mut k3);
        for i in 0..len {
            tmp[i] = z0[i] + h * k3[i];
        }
        self.field(&tmp.clone(), te, t0, te, phase, ref_mode, &mut k4);
        let mut z1: Vec<f64> = (0..len)
            .map(|i| z0[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        self.project(&mut z1, phase);
        z1
    }

    /// Watch functions at `z`, evaluated with the input of the step
    /// `[t0, t1]` so that a jump of `r` at `t1` is not seen early.
    #[allow(clippy::too_many_arguments)]
    fn watches(&mut self, z: &[f64], t: f64, t0: f64, t1: f64, phase: &PlantPhase, ref_mode: usize) -> Vec<(Watch, f64)> {
        let n = self.n;
        let x = &z[..n];
        let x_hat = &z[n..2 * n];
        let mut out = Vec::new();
        let plant = self.sys.plant;
        match phase {
            PlantPhase::Mode(i) => {
                for (gi, g) in plant.regions()[*i].guards().iter().enumerate() {
                    out.push((Watch::PlantGuard(GuardId { region: *i, guard: gi }), g.signed_distance(x)));
                }
            }
            PlantPhase::Sliding(s) => {
                for region in [s.minus, s.plus] {
                    for (gi, g) in plant.regions()[region].guards().iter().enumerate() {
                        if dot(g.normal(), &s.normal).abs() < 1.0 - 1e-12 {
                            out.push((Watch::SecondSurface(GuardId { region, guard: gi }), g.signed_distance(x)));
                        }
                    }
                }
                let mut scratch = vec![0.0; z.len()];
                let info = self.field(z, t, t0, t1, phase, ref_mode, &mut scratch);
                let scale = (info.f_minus_norm + info.f_plus_norm).max(f64::MIN_POSITIVE);
                out.push((Watch::ExitToMinus, info.a / scale));
                out.push((Watch::ExitToPlus, -info.b / scale));
            }
        }
        for (gi, g) in self.sys.reference.regions()[ref_mode].guards().iter().enumerate() {
            out.push((
                Watch::RefGuard(GuardId {
                    region: ref_mode,
                    guard: gi,
                }),
                g.signed_distance(x_hat),
            ));
        }
        out
    }

    /// Advances by at most `h` (clipped at discontinuities of `r`). If the
    /// state would leave its region or sliding would end, the step stops at
    /// the located event instead and the event is processed.
    pub fn step(&mut self, h: f64) -> Result<StepOutcome, IntegrationError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(IntegrationError::InvalidConfig(format!("step size must be positive, got {h}")));
        }
        let t0 = self.t;
        let mut h = h;
        if let Some(bp) = self.sys.input.next_breakpoint(t0) {
            if bp < t0 + h {
                h = bp - t0;
            }
        }
        self.last_h = h;
        let phase = self.phase.clone();
        let ref_mode = self.ref_mode;
        let z0 = self.z.clone();
        let sliding = matches!(phase, PlantPhase::Sliding(_));

        let w0 = self.watches(&z0, t0, t0, t0 + h, &phase, ref_mode);
        // a jump of r can break the sliding condition at the step start
        if let Some((watch, _)) = w0
            .iter()
            .find(|(w, v)| matches!(w, Watch::ExitToMinus | Watch::ExitToPlus) && *v < 0.0)
        {
            let hit = Hit {
                watch: *watch,
                theta_lo: 0.0,
                theta_hi: 0.0,
                z_lo: z0.clone(),
                z_hi: z0,
            };
            let event = self.handle(hit, t0, h)?;
            return Ok(StepOutcome {
                t: self.t,
                event: Some(event),
                sliding_sample: None,
                sliding,
            });
        }
        let thresholds: Vec<f64> = w0.iter().map(|(_, v)| v.min(0.0)).collect();
        let z1 = self.rk4(&z0, t0, h, t0 + h, &phase, ref_mode);
        if z1.iter().any(|v| !v.is_finite()) {
            return Err(IntegrationError::Divergence { t: t0, partial: None });
        }
        let triggered = |vals: &[(Watch, f64)]| -> Option<(usize, f64)> {
            vals.iter()
                .enumerate()
                .filter(|(k, (_, v))| *v < thresholds[*k])
                .map(|(k, (_, v))| (k, thresholds[k] - v))
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                })
        };
        let w1 = self.watches(&z1, t0 + h, t0, t0 + h, &phase, ref_mode);
        if triggered(&w1).is_none() {
            self.z = z1;
            self.t = t0 + h;
            return Ok(StepOutcome {
                t: self.t,
                event: None,
                sliding_sample: self.sliding_sample(t0, t0 + h),
                sliding,
            });
        }

        // bracket the earliest crossing
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let (mut z_lo, mut z_hi) = (z0.clone(), z1);
        let mut w_hi = w1;
        for _ in 0..MAX_BISECTIONS {
            let (k, over) = triggered(&w_hi).expect("hi end stays triggered");
            let tol = match w_hi[k].0 {
                Watch::ExitToMinus | Watch::ExitToPlus => EVENT_TOLERANCE * 1e-2,
                _ => EVENT_TOLERANCE,
            };
            if over <= tol || (hi - lo) * h <= 4.0 * f64::EPSILON * (1.0 + t0.abs()) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let z_mid = self.rk4(&z0, t0, mid * h, t0 + mid * h, &phase, ref_mode);
            let w_mid = self.watches(&z_mid, t0 + mid * h, t0, t0 + h, &phase, ref_mode);
            if triggered(&w_mid).is_some() {
                hi = mid;
                z_hi = z_mid;
                w_hi = w_mid;
            } else {
                lo = mid;
                z_lo = z_mid;
            }
        }
        let (k, _) = triggered(&w_hi).expect("hi end stays triggered");
        let hit = Hit {
            watch: w_hi[k].0,
            theta_lo: lo,
            theta_hi: hi,
            z_lo,
            z_hi,
        };
        let event = self.handle(hit, t0, h)?;
        Ok(StepOutcome {
            t: self.t,
            event: Some(event),
            sliding_sample: None,
            sliding,
        })
    }

    fn sync_gains_from(&mut self, z: &[f64]) {
        let n = self.n;
        self.gains.read_flat(&z[2 * n..]);
    }

    fn commit(&mut self, mut z: Vec<f64>, t: f64) {
        let n = self.n;
        self.gains.write_flat(&mut z[2 * n..]);
        self.z = z;
        self.t = t;
    }

    fn plant_x_field(&mut self, z: &[f64], mode: usize, t: f64, t0: f64, t1: f64) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.field(z, t, t0, t1, &PlantPhase::Mode(mode), self.ref_mode, &mut out);
        out.truncate(self.n);
        out
    }

    fn handle(&mut self, hit: Hit, t0: f64, h: f64) -> Result<EventRecord, IntegrationError> {
        let n = self.n;
        let plant = self.sys.plant;
        match hit.watch {
            Watch::RefGuard(guard) => {
                let t = t0 + hit.theta_hi * h;
                let z = hit.z_hi;
                self.sync_gains_from(&z);
                let before = self.gains.clone();
                let from = self.ref_mode;
                let x_hat = &z[n..2 * n];
                let to = self.sys.reference.active_region(x_hat)?;
                let r = self.sys.input.value_on_step(t0, t0 + h, t);
                let normal: Vec<f64> = self.sys.reference.guard(guard).normal().iter().map(|v| -v).collect();
                let f_old = self.sys.reference.mode_derivative(from, x_hat, r)?;
                let f_new = self.sys.reference.mode_derivative(to, x_hat, r)?;
                if let Ok(SlidingVerdict::Sliding { .. }) = sliding_gamma(&f_old, &f_new, &normal) {
                    return Err(IntegrationError::ReferenceSliding { t, guard });
                }
                if to != from {
                    self.gains.on_reference_switch(from, to);
                    self.ref_mode = to;
                }
                self.commit(z, t);
                Ok(EventRecord {
                    t,
                    kind: EventKind::ReferenceSwitch { from, to, guard },
                    gains_before: before,
                    gains_after: self.gains.clone(),
                })
            }
            Watch::PlantGuard(guard) => {
                let t = t0 + hit.theta_hi * h;
                let mut z = hit.z_hi;
                self.sync_gains_from(&z);
                let before = self.gains.clone();
                let from = self.phase.mode();
                let to = plant.active_region(&z[..n])?;
                let normal: Vec<f64> = plant.guard(guard).normal().iter().map(|v| -v).collect();
                let offset = -plant.guard(guard).offset();

                // field on the far side uses the far region's restored gains
                let mut probe = self.gains.clone();
                probe.engage_plant(to);
                let mut zp = z.clone();
                probe.write_flat(&mut zp[2 * n..]);
                let f_minus = self.plant_x_field(&zp, from, t, t0, t0 + h);
                let f_plus = self.plant_x_field(&zp, to, t, t0, t0 + h);
                let a = dot(&normal, &f_minus);
                let b = dot(&normal, &f_plus);
                let verdict = sliding_gamma(&f_minus, &f_plus, &normal).map_err(|_| IntegrationError::DegenerateContact { t })?;

                let surface = (from.min(to), from.max(to));
                let count = match self.chatter {
                    Some((s, last, c)) if s == surface && t - last <= 1.5 * self.last_h.max(h) => c + 1,
                    _ => 1,
                };
                let forced = count >= CHATTER_LIMIT && a >= 0.0 && b <= 0.0 && a > b;

                let kind = match verdict {
                    SlidingVerdict::Sliding { gamma } => Some((gamma, false)),
                    _ if forced => Some((a / (a - b), true)),
                    _ => None,
                };
                if let Some((gamma, forced)) = kind {
                    self.chatter = None;
                    self.gains.engage_plant(to);
                    let s = SlidingSurface {
                        minus: from,
                        plus: to,
                        guard,
                        normal,
                        offset,
                    };
                    let phase = PlantPhase::Sliding(s);
                    self.project(&mut z, &phase);
                    self.phase = phase;
                    self.commit(z, t);
                    return Ok(EventRecord {
                        t,
                        kind: EventKind::SlidingEnter {
                            minus: from,
                            plus: to,
                            guard,
                            gamma,
                            forced,
                        },
                        gains_before: before,
                        gains_after: self.gains.clone(),
                    });
                }
                match verdict {
                    SlidingVerdict::Crossing if a > 0.0 => {
                        self.chatter = Some((surface, t, count));
                        self.gains.on_plant_switch(from, to);
                        self.phase = PlantPhase::Mode(to);
                        self.commit(z, t);
                        Ok(EventRecord {
                            t,
                            kind: EventKind::PlantSwitch { from, to, guard },
                            gains_before: before,
                            gains_after: self.gains.clone(),
                        })
                    }
                    // staying put would not advance time: take the side
                    // whose field leaves the surface
                    SlidingVerdict::Repulsive | SlidingVerdict::Crossing if hit.theta_lo == 0.0 && b > 0.0 => {
                        self.chatter = None;
                        self.gains.on_plant_switch(from, to);
                        self.phase = PlantPhase::Mode(to);
                        self.commit(z, t);
                        Ok(EventRecord {
                            t,
                            kind: EventKind::RepulsiveContact {
                                minus: from,
                                plus: to,
                                guard,
                                chosen: to,
                            },
                            gains_before: before,
                            gains_after: self.gains.clone(),
                        })
                    }
                    _ if hit.theta_lo == 0.0 => Err(IntegrationError::DegenerateContact { t }),
                    SlidingVerdict::Repulsive => {
                        let chosen = from.min(to);
                        if chosen == to {
                            self.gains.on_plant_switch(from, to);
                            self.phase = PlantPhase::Mode(to);
                            self.commit(z, t);
                        } else {
                            let t_lo = t0 + hit.theta_lo * h;
                            self.sync_gains_from(&hit.z_lo);
                            self.commit(hit.z_lo, t_lo);
                        }
                        Ok(EventRecord {
                            t: self.t,
                            kind: EventKind::RepulsiveContact {
                                minus: from,
                                plus: to,
                                guard,
                                chosen,
                            },
                            gains_before: before,
                            gains_after: self.gains.clone(),
                        })
                    }
                    // grazing contact: both fields point back into `from`
                    _ => {
                        let t_lo = t0 + hit.theta_lo * h;
                        self.sync_gains_from(&hit.z_lo);
                        self.commit(hit.z_lo, t_lo);
                        Ok(EventRecord {
                            t: self.t,
                            kind: EventKind::RepulsiveContact {
                                minus: from,
                                plus: to,
                                guard,
                                chosen: from,
                            },
                            gains_before: before.clone(),
                            gains_after: before,
                        })
                    }
                }
            }
            Watch::ExitToMinus | Watch::ExitToPlus => {
                let PlantPhase::Sliding(s) = self.phase.clone() else {
                    unreachable!("exit watches exist only while sliding")
                };
                let t = t0 + hit.theta_lo * h;
                let z = hit.z_lo;
                let mut scratch = vec![0.0; z.len()];
                let info = self.field(&z, t, t0, t0 + h, &self.phase.clone(), self.ref_mode, &mut scratch);
                self.sync_gains_from(&z);
                let before = self.gains.clone();
                let (into, left) = if hit.watch == Watch::ExitToMinus {
                    (s.minus, s.plus)
                } else {
                    (s.plus, s.minus)
                };
                self.gains.disengage_plant(left);
                self.gains.active_plant_mode = into;
                self.phase = PlantPhase::Mode(into);
                self.commit(z, t);
                Ok(EventRecord {
                    t,
                    kind: EventKind::SlidingExit {
                        minus: s.minus,
                        plus: s.plus,
                        into,
                        gamma: info.gamma.unwrap_or(f64::NAN),
                    },
                    gains_before: before,
                    gains_after: self.gains.clone(),
                })
            }
            Watch::SecondSurface(guard) => Err(IntegrationError::UnsupportedSliding {
                t: t0 + hit.theta_hi * h,
                guard,
            }),
        }
    }

    /// Field information at the current state (control input and, while
    /// sliding, the Filippov diagnostics).
    fn current_info(&mut self) -> (FieldInfo, Vec<f64>) {
        let z = self.z.clone();
        let mut out = vec![0.0; z.len()];
        let phase = self.phase.clone();
        let info = self.field(&z, self.t, self.t, self.t, &phase, self.ref_mode, &mut out);
        (info, out)
    }

    /// Sliding diagnostics at the current state, with the input of the
    /// step `[t0, t1]` that just ended.
    fn sliding_sample(&mut self, t0: f64, t1: f64) -> Option<SlidingSample> {
        let PlantPhase::Sliding(s) = self.phase.clone() else {
            return None;
        };
        let z = self.z.clone();
        let mut out = vec![0.0; z.len()];
        let info = self.field(&z, self.t, t0, t1, &self.phase.clone(), self.ref_mode, &mut out);
        let residual = dot(&s.normal, &out[..self.n]);
        Some(SlidingSample {
            t: self.t,
            gamma: info.gamma.unwrap_or(f64::NAN),
            residual,
            f_minus_norm: info.f_minus_norm,
            f_plus_norm: info.f_plus_norm,
            surface_distance: (dot(&s.normal, &self.z[..self.n]) - s.offset).abs(),
        })
    }

    fn record(&mut self, at_event: bool) -> TraceRecord {
        let (info, _) = self.current_info();
        let s = self.state();
        let (v, w, terms) = self.lyapunov();
        let x_e = s.error();
        // the control input is evaluated with the right-continuous r(t)
        let u = if self.sys.input.is_piecewise_constant() {
            let y_e = self.sys.certificate.output_error(&x_e);
            let r = self.sys.input.value(self.t);
            match &self.phase {
                PlantPhase::Mode(i) => control_input_in(&s.gains, &self.sys.params, *i, self.ref_mode, &s.x, r, y_e),
                PlantPhase::Sliding(_) => info.u,
            }
        } else {
            info.u
        };
        TraceRecord {
            t: self.t,
            x: s.x,
            x_hat: s.x_hat,
            x_e,
            u,
            sigma: self.phase.mode(),
            sigma_hat: self.ref_mode,
            v,
            w,
            v_terms: terms.into_iter().map(|(_, v)| v).collect(),
            gains: s.gains.effective_values(),
            gamma: info.gamma,
            at_event,
        }
    }
}

/// Closed-loop field at `state`, with modes taken from the regions that
/// contain `x` and `x̂`.
pub fn closed_loop_derivative(sys: ClosedLoop<'_>, state: &ClosedLoopState) -> Result<ClosedLoopDerivative, IntegrationError> {
    let mut it = Integrator::new(sys, &state.x, &state.x_hat)?;
    let mode = sys.plant.active_region(&state.x)?;
    let ref_mode = sys.reference.active_region(&state.x_hat)?;
    let n = it.n;
    let mut gains = state.gains.clone();
    if gains.active_plant_mode != mode {
        gains.on_plant_switch(gains.active_plant_mode, mode);
    }
    if gains.active_ref_mode != ref_mode {
        gains.on_reference_switch(gains.active_ref_mode, ref_mode);
    }
    gains.write_flat(&mut it.z[2 * n..]);
    it.gains = gains.clone();
    it.scratch = gains;
    it.t = state.t;
    let z = it.z.clone();
    let mut out = vec![0.0; z.len()];
    let info = it.field(&z, state.t, state.t, state.t, &PlantPhase::Mode(mode), ref_mode, &mut out);
    Ok(ClosedLoopDerivative {
        x: out[..n].to_vec(),
        x_hat: out[n..2 * n].to_vec(),
        gains: out[2 * n..].to_vec(),
        u: info.u,
    })
}

/// Runs the closed loop from `(x0, x̂0)` to `cfg.t_final`.
///
/// The trace holds the initial state, every `sample_stride`-th grid point,
/// the final state and a record right after every event.
pub fn integrate(sys: ClosedLoop<'_>, x0: &[f64], x_hat0: &[f64], cfg: &IntegrationConfig) -> Result<SimulationResult, IntegrationError> {
    integrate_from(sys, x0, x_hat0, &InitialGains::zero(x0.len()), cfg)
}

/// [`integrate`] with nonzero initial integral gains.
pub fn integrate_from(
    sys: ClosedLoop<'_>,
    x0: &[f64],
    x_hat0: &[f64],
    init: &InitialGains,
    cfg: &IntegrationConfig,
) -> Result<SimulationResult, IntegrationError> {
    if !(cfg.dt > 0.0 && cfg.dt.is_finite()) || !(cfg.t_final > 0.0 && cfg.t_final.is_finite()) || cfg.sample_stride == 0 {
        return Err(IntegrationError::InvalidConfig(format!(
            "need dt > 0, t_final > 0, sample_stride >= 1 (got {cfg:?})"
        )));
    }
    let mut it = Integrator::new(sys, x0, x_hat0)?;
    it.set_integral_gains(init)?;
    let steps = ((cfg.t_final / cfg.dt) - 1e-9).ceil().max(1.0) as u64;
    let grid = |k: u64| if k >= steps { cfg.t_final } else { k as f64 * cfg.dt };

    let first = it.record(false);
    let mut v_prev = first.v;
    let mut result = SimulationResult {
        steps: vec![StepStat {
            t: 0.0,
            error_norm: dot(&first.x_e, &first.x_e).sqrt(),
            v: first.v,
        }],
        gain_sup: first.gains.iter().map(|g| g.abs()).collect(),
        trace: vec![first],
        events: Vec::new(),
        violations: Vec::new(),
        sliding: Vec::new(),
        sliding_time: 0.0,
        gain_names: it.gains.column_names(),
        v_term_names: it.lyapunov().2.into_iter().map(|(name, _)| name).collect(),
        final_state: it.state(),
    };

    let mut k = 1u64;
    let mut stalled = 0usize;
    while k <= steps {
        let target = grid(k);
        let t_before = it.time();
        let outcome = match it.step(target - t_before) {
            Ok(o) => o,
            Err(IntegrationError::Divergence { t, .. }) => {
                result.final_state = it.state();
                return Err(IntegrationError::Divergence {
                    t,
                    partial: Some(Box::new(result)),
                });
            }
            Err(e) => return Err(e),
        };
        if outcome.sliding {
            result.sliding_time += outcome.t - t_before;
        }
        if outcome.t > t_before {
            stalled = 0;
        } else {
            stalled += 1;
            if stalled > MAX_STALLED_EVENTS {
                return Err(IntegrationError::Stalled(stalled, outcome.t));
            }
        }
        let (v, _, _) = it.lyapunov();
        let dv = v - v_prev;
        if dv > DV_TOLERANCE * (1.0 + v_prev) {
            result.violations.push((outcome.t, dv));
        }
        v_prev = v;
        let state = it.state();
        let x_e = state.error();
        result.steps.push(StepStat {
            t: outcome.t,
            error_norm: dot(&x_e, &x_e).sqrt(),
            v,
        });
        for (sup, g) in result.gain_sup.iter_mut().zip(state.gains.effective_values()) {
            *sup = sup.max(g.abs());
        }
        if let Some(s) = outcome.sliding_sample.clone() {
            result.sliding.push(s);
        }
        if let Some(e) = outcome.event {
            result.events.push(e);
            let rec = it.record(true);
            result.trace.push(rec);
            continue;
        }
        if outcome.t >= target {
            if k.is_multiple_of(cfg.sample_stride as u64) || k == steps {
                let rec = it.record(false);
                result.trace.push(rec);
            }
            k += 1;
        }
    }
    result.final_state = it.state();
    Ok(result)
}
