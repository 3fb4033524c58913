//! Scenario files, experiment runs, metrics and trace export.
//!
//! A scenario is a TOML document with explicit dimensions. See
//! `docs/scenario-format.md` for the grammar.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive_law::{AdaptationParams, LawError, LawVariant};
use crate::certificate::{find_common_p, verify_clf, Certificate, CertificateError, PsiConvention};
use crate::hybrid_integrator::{
    integrate_from, ClosedLoop, EventKind, InitialGains, IntegrationConfig, IntegrationError, SimulationResult,
};
use crate::linalg::dot;
use crate::pwa_model::{companion, Guard, ModeDynamics, ModelError, PartitionReport, PwaSystem, Region, SampleBox};
use crate::signal::ReferenceInput;

pub const DEFAULT_SETTLE_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid adaptation parameters: {0}")]
    Params(#[from] LawError),
    #[error("certificate: {0}")]
    Certificate(#[from] CertificateError),
    #[error("{system} partition check failed: {} cover defect(s), {} overlap defect(s) in {} samples", report.cover_defects.len(), report.overlap_defects.len(), report.samples)]
    Partition { system: &'static str, report: PartitionReport },
    #[error("diverged at t = {t}")]
    Divergence {
        t: f64,
        result: Box<SimulationResult>,
        metrics: Box<Metrics>,
    },
    #[error(transparent)]
    Integration(IntegrationError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardSpec {
    pub normal: Vec<f64>,
    pub offset: f64,
    #[serde(default)]
    pub strict: bool,
}

/// One mode: last companion row, affine term and the region guards
/// (`normal · x >= offset`, or `>` when strict). No guards means the whole
/// space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub a: Vec<f64>,
    #[serde(default)]
    pub affine: f64,
    #[serde(default)]
    pub region: Vec<GuardSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub b: f64,
    pub modes: Vec<ModeSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSpec {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CertificateSpec {
    /// Solve the Lyapunov equation of reference mode 0 with `q` (identity
    /// when absent) and check it against every mode.
    Synthesize {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q: Option<Vec<Vec<f64>>>,
    },
    Pinned { p: Vec<Vec<f64>> },
}

impl Default for CertificateSpec {
    fn default() -> Self {
        CertificateSpec::Synthesize { q: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    #[serde(default = "default_partition_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// `[lo, hi]` per axis; a single range applies to every axis.
    #[serde(default = "default_partition_bounds")]
    pub bounds: Vec<[f64; 2]>,
}

fn default_partition_samples() -> usize {
    10_000
}

fn default_partition_bounds() -> Vec<[f64; 2]> {
    vec![[-10.0, 10.0]]
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            samples: default_partition_samples(),
            seed: 0,
            bounds: default_partition_bounds(),
        }
    }
}

fn default_stride() -> usize {
    1
}

fn default_settle() -> f64 {
    DEFAULT_SETTLE_THRESHOLD
}

/// Raw scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub n: usize,
    pub t_final: f64,
    pub dt: f64,
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
    #[serde(default)]
    pub law_variant: LawVariant,
    #[serde(default)]
    pub psi_convention: PsiConvention,
    #[serde(default = "default_settle")]
    pub settle_threshold: f64,
    pub x0: Vec<f64>,
    pub x_hat0: Vec<f64>,
    pub params: ParamsSpec,
    pub input: ReferenceInput,
    pub plant: SystemSpec,
    pub reference: SystemSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_gains: Option<InitialGainsSpec>,
    #[serde(default)]
    pub certificate: CertificateSpec,
    #[serde(default)]
    pub partition: PartitionSpec,
}

/// Initial always-on integral gains; omitted entries are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialGainsSpec {
    #[serde(default)]
    pub kr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<Vec<f64>>,
    #[serde(default)]
    pub k0a: f64,
}

/// Validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    spec: ScenarioSpec,
    pub plant: PwaSystem,
    pub reference: PwaSystem,
    pub params: AdaptationParams,
    pub certificate: Certificate,
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl SystemSpec {
    /// Builds the system, checking every dimension against `n`.
    pub fn build(&self, n: usize, what: &str) -> Result<PwaSystem, ScenarioError> {
        build_system(self, n, what)
    }
}

fn build_system(spec: &SystemSpec, n: usize, what: &str) -> Result<PwaSystem, ScenarioError> {
    let mut modes = Vec::with_capacity(spec.modes.len());
    let mut regions = Vec::with_capacity(spec.modes.len());
    for (i, m) in spec.modes.iter().enumerate() {
        if m.a.len() != n {
            return Err(ScenarioError::Validation(format!(
                "{what} mode {i}: `a` has {} entries, expected n = {n}",
                m.a.len()
            )));
        }
        let guards = m
            .region
            .iter()
            .enumerate()
            .map(|(k, g)| {
                if g.normal.len() != n {
                    return Err(ScenarioError::Validation(format!(
                        "{what} mode {i} guard {k}: normal has {} entries, expected n = {n}",
                        g.normal.len()
                    )));
                }
                Guard::new(g.normal.clone(), g.offset, g.strict).map_err(|e| {
                    ScenarioError::Validation(format!("{what} mode {i} guard {k}: {e}"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        modes.push(ModeDynamics::new(m.a.clone(), m.affine));
        regions.push(Region::new(guards));
    }
    Ok(PwaSystem::new(spec.b, modes, regions)?)
}

fn matrix(rows: &[Vec<f64>], n: usize, what: &str) -> Result<DMatrix<f64>, ScenarioError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) || !rows.iter().all(|r| finite(r)) {
        return Err(ScenarioError::Validation(format!("{what} must be a finite {n}x{n} matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn check_partition(system: &PwaSystem, spec: &PartitionSpec, what: &'static str) -> Result<(), ScenarioError> {
    if system.mode_count() == 1 && system.regions()[0].guards().is_empty() || spec.samples == 0 {
        return Ok(());
    }
    let report = system.validate_partition(spec.samples, &partition_box(spec), spec.seed);
    if report.passed() {
        Ok(())
    } else {
        Err(ScenarioError::Partition { system: what, report })
    }
}

fn partition_box(spec: &PartitionSpec) -> SampleBox {
    SampleBox::new(spec.bounds.iter().map(|r| (r[0], r[1])).collect())
}

/// Certificate for the scenario's reference modes: the pinned `P` checked
/// with `verify_clf`, or a synthesized one.
pub fn scenario_certificate(spec: &ScenarioSpec, reference: &PwaSystem) -> Result<Certificate, ScenarioError> {
    let n = spec.n;
    let mats: Vec<DMatrix<f64>> = reference.modes().iter().map(|m| companion(&m.last_row)).collect();
    Ok(match &spec.certificate {
        CertificateSpec::Pinned { p } => verify_clf(&matrix(p, n, "pinned P")?, &mats)?,
        CertificateSpec::Synthesize { q } => {
            let q = match q {
                Some(q) => matrix(q, n, "certificate q")?,
                None => DMatrix::identity(n, n),
            };
            find_common_p(&mats, &q)?
        }
    })
}

impl Scenario {
    /// Validates `spec`: dimensions and settings, both partitions (Monte
    /// Carlo) and the certificate.
    pub fn from_spec(spec: ScenarioSpec) -> Result<Self, ScenarioError> {
        let n = spec.n;
        let bad = |msg: String| Err(ScenarioError::Validation(msg));
        if n == 0 {
            return bad("n must be at least 1".into());
        }
        if !(spec.dt > 0.0 && spec.dt.is_finite()) {
            return bad(format!("dt must be positive and finite, got {}", spec.dt));
        }
        if !(spec.t_final > 0.0 && spec.t_final.is_finite()) {
            return bad(format!("t_final must be positive and finite, got {}", spec.t_final));
        }
        if spec.sample_stride == 0 {
            return bad("sample_stride must be at least 1".into());
        }
        if !(spec.settle_threshold > 0.0 && spec.settle_threshold.is_finite()) {
            return bad(format!("settle_threshold must be positive, got {}", spec.settle_threshold));
        }
        if spec.x0.len() != n || spec.x_hat0.len() != n || !finite(&spec.x0) || !finite(&spec.x_hat0) {
            return bad(format!("x0 and x_hat0 must hold {n} finite values"));
        }
        if spec.partition.bounds.is_empty() || spec.partition.bounds.iter().any(|r| !finite(r) || r[0] > r[1]) {
            return bad("partition bounds must be finite [lo, hi] pairs with lo <= hi".into());
        }
        spec.input.validate().map_err(ScenarioError::Validation)?;
        if let Some(g) = &spec.initial_gains {
            if g.k0.as_ref().is_some_and(|k| k.len() != n || !finite(k)) || !g.kr.is_finite() || !g.k0a.is_finite() {
                return bad(format!("initial_gains need finite kr, k0a and {n} finite k0 entries"));
            }
        }
        let params = AdaptationParams::new(spec.params.alpha, spec.params.beta, spec.params.rho)?.with_variant(spec.law_variant);
        let plant = build_system(&spec.plant, n, "plant")?;
        let reference = build_system(&spec.reference, n, "reference")?;
        check_partition(&plant, &spec.partition, "plant")?;
        check_partition(&reference, &spec.partition, "reference")?;
        let certificate = scenario_certificate(&spec, &reference)?;
        Ok(Self {
            spec,
            plant,
            reference,
            params,
            certificate,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn input(&self) -> &ReferenceInput {
        &self.spec.input
    }

    pub fn settle_threshold(&self) -> f64 {
        self.spec.settle_threshold
    }

    pub fn with_variant(&self, variant: LawVariant) -> Self {
        let mut s = self.clone();
        s.spec.law_variant = variant;
        s.params = s.params.with_variant(variant);
        s
    }

    pub fn with_convention(&self, convention: PsiConvention) -> Self {
        let mut s = self.clone();
        s.spec.psi_convention = convention;
        s
    }

    /// Overrides the step size and/or horizon.
    pub fn with_timing(&self, dt: Option<f64>, t_final: Option<f64>) -> Result<Self, ScenarioError> {
        let mut spec = self.spec.clone();
        if let Some(dt) = dt {
            spec.dt = dt;
        }
        if let Some(t) = t_final {
            spec.t_final = t;
        }
        if !(spec.dt > 0.0 && spec.dt.is_finite() && spec.t_final > 0.0 && spec.t_final.is_finite()) {
            return Err(ScenarioError::Validation(format!(
                "dt and t_final must be positive and finite (dt = {}, t_final = {})",
                spec.dt, spec.t_final
            )));
        }
        Ok(Self { spec, ..self.clone() })
    }

    pub fn with_stride(&self, stride: usize) -> Self {
        let mut s = self.clone();
        s.spec.sample_stride = stride.max(1);
        s
    }

    pub fn closed_loop(&self) -> ClosedLoop<'_> {
        ClosedLoop {
            plant: &self.plant,
            reference: &self.reference,
            params: self.params,
            certificate: &self.certificate,
            input: &self.spec.input,
            convention: self.spec.psi_convention,
        }
    }

    pub fn initial_gains(&self) -> InitialGains {
        let n = self.spec.n;
        match &self.spec.initial_gains {
            None => InitialGains::zero(n),
            Some(g) => InitialGains {
                kr: g.kr,
                k0: g.k0.clone().unwrap_or_else(|| vec![0.0; n]),
                k0a: g.k0a,
            },
        }
    }

    pub fn config(&self) -> IntegrationConfig {
        IntegrationConfig {
            t_final: self.spec.t_final,
            dt: self.spec.dt,
            sample_stride: self.spec.sample_stride,
        }
    }

    /// Monte-Carlo partition reports for plant and reference.
    pub fn partition_reports(&self, samples: usize, seed: u64) -> (PartitionReport, PartitionReport) {
        let bounds = partition_box(&self.spec.partition);
        (
            self.plant.validate_partition(samples, &bounds, seed),
            self.reference.validate_partition(samples, &bounds, seed),
        )
    }
}

fn parse_error(text: &str, e: toml::de::Error) -> ScenarioError {
    let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    ScenarioError::Parse {
        line,
        message: e.message().trim().to_string(),
    }
}

/// Parses a scenario without semantic validation.
pub fn parse_scenario_spec(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    toml::from_str(text).map_err(|e| parse_error(text, e))
}

pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    Scenario::from_spec(parse_scenario_spec(text)?)
}

pub fn save_scenario(scenario: &Scenario) -> String {
    toml::to_string(&scenario.spec).expect("scenario spec always serializes")
}

/// Open-loop demo of the two-state system
/// `ẋ₁ = -x₁ x₂ cos x₂`, `ẋ₂ = x₁² cos x₂ - x₂ + u` with constant `u`
/// (π by default), whose unforced part has a quadratic Lyapunov function
/// that the constant input destroys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoSpec {
    pub name: String,
    pub x0: [f64; 2],
    pub t_final: f64,
    pub dt: f64,
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
    #[serde(default = "default_demo_input")]
    pub input: f64,
}

fn default_demo_input() -> f64 {
    std::f64::consts::PI
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoDocument {
    demo: DemoSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoTrace {
    /// `(t, x₁, x₂, V)` with `V = (x₁² + x₂²)/2`.
    pub samples: Vec<[f64; 4]>,
}

impl DemoSpec {
    fn field(&self, x: [f64; 2]) -> [f64; 2] {
        let c = x[1].cos();
        [-x[0] * x[1] * c, x[0] * x[0] * c - x[1] + self.input]
    }

    pub fn run(&self) -> Result<DemoTrace, ScenarioError> {
        if !(self.dt > 0.0 && self.t_final > 0.0 && self.sample_stride > 0) || !finite(&self.x0) || !self.input.is_finite() {
            return Err(ScenarioError::Validation("demo needs dt > 0, t_final > 0, finite x0 and input".into()));
        }
        let steps = ((self.t_final / self.dt) - 1e-9).ceil().max(1.0) as u64;
        let mut x = self.x0;
        let sample = |t: f64, x: [f64; 2]| [t, x[0], x[1], 0.5 * (x[0] * x[0] + x[1] * x[1])];
        let mut samples = vec![sample(0.0, x)];
        let mut t = 0.0;
        for k in 1..=steps {
            let t1 = if k == steps { self.t_final } else { k as f64 * self.dt };
            let h = t1 - t;
            let add = |x: [f64; 2], d: [f64; 2], s: f64| [x[0] + s * d[0], x[1] + s * d[1]];
            let k1 = self.field(x);
            let k2 = self.field(add(x, k1, 0.5 * h));
            let k3 = self.field(add(x, k2, 0.5 * h));
            let k4 = self.field(add(x, k3, h));
            for i in 0..2 {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            t = t1;
            if !finite(&x) {
                return Err(ScenarioError::Validation(format!("demo state became non-finite at t = {t}")));
            }
            if k % self.sample_stride as u64 == 0 || k == steps {
                samples.push(sample(t, x));
            }
        }
        Ok(DemoTrace { samples })
    }
}

impl DemoTrace {
    pub fn write_csv(&self, path: &Path) -> Result<(), ScenarioError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "x1", "x2", "V"])?;
        for s in &self.samples {
            w.write_record(s.iter().map(|v| fmt_num(*v)))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Either kind of document accepted by the tools.
#[derive(Debug, Clone, PartialEq)]
pub enum Document {
    Mrac(Box<Scenario>),
    Demo(DemoSpec),
}

pub fn load_document(text: &str) -> Result<Document, ScenarioError> {
    let table: toml::Table = text.parse().map_err(|e| parse_error(text, e))?;
    if table.contains_key("demo") {
        let doc: DemoDocument = toml::from_str(text).map_err(|e| parse_error(text, e))?;
        Ok(Document::Demo(doc.demo))
    } else {
        Ok(Document::Mrac(Box::new(load_scenario(text)?)))
    }
}

pub fn load_document_file(path: &Path) -> Result<Document, ScenarioError> {
    load_document(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainSup {
    pub name: String,
    pub sup: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EventCounts {
    pub plant_switch: usize,
    pub reference_switch: usize,
    pub sliding_enter: usize,
    pub sliding_exit: usize,
    pub repulsive_contact: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub final_error_norm: f64,
    pub settle_threshold: f64,
    /// First time after which `‖x_e‖` stays at or below the threshold;
    /// `None` when unsettled at `t_final`.
    pub settling_time: Option<f64>,
    pub sup_v: f64,
    pub dv_violation_count: usize,
    /// Largest per-step increase of `V` (0 when `V` never increased).
    pub worst_dv: f64,
    pub gain_sup_norms: Vec<GainSup>,
    pub event_counts: EventCounts,
    pub sliding_time_fraction: f64,
    pub t_end: f64,
}

/// Metrics over every accepted step of `result`.
pub fn compute_metrics(result: &SimulationResult, settle_threshold: f64) -> Metrics {
    let steps = &result.steps;
    let final_error_norm = steps.last().map_or(0.0, |s| s.error_norm);
    let t_end = steps.last().map_or(0.0, |s| s.t);
    let t_start = steps.first().map_or(0.0, |s| s.t);
    let settling_time = match steps.iter().rposition(|s| s.error_norm > settle_threshold) {
        None => Some(t_start),
        Some(k) if k + 1 < steps.len() => Some(steps[k + 1].t),
        Some(_) => None,
    };
    let sup_v = steps.iter().map(|s| s.v).fold(0.0, f64::max);
    let worst_dv = steps.windows(2).map(|w| w[1].v - w[0].v).fold(0.0, f64::max);
    let mut counts = EventCounts::default();
    for e in &result.events {
        match e.kind {
            EventKind::PlantSwitch { .. } => counts.plant_switch += 1,
            EventKind::ReferenceSwitch { .. } => counts.reference_switch += 1,
            EventKind::SlidingEnter { .. } => counts.sliding_enter += 1,
            EventKind::SlidingExit { .. } => counts.sliding_exit += 1,
            EventKind::RepulsiveContact { .. } => counts.repulsive_contact += 1,
        }
    }
    let span = t_end - t_start;
    Metrics {
        final_error_norm,
        settle_threshold,
        settling_time,
        sup_v,
        dv_violation_count: result.violations.len(),
        worst_dv,
        gain_sup_norms: result
            .gain_names
            .iter()
            .zip(&result.gain_sup)
            .map(|(name, sup)| GainSup {
                name: name.clone(),
                sup: *sup,
            })
            .collect(),
        event_counts: counts,
        sliding_time_fraction: if span > 0.0 { result.sliding_time / span } else { 0.0 },
        t_end,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub result: SimulationResult,
    pub metrics: Metrics,
}

pub fn run(scenario: &Scenario) -> Result<RunOutput, ScenarioError> {
    let spec = scenario.spec();
    match integrate_from(scenario.closed_loop(), &spec.x0, &spec.x_hat0, &scenario.initial_gains(), &scenario.config()) {
        Ok(result) => {
            let metrics = compute_metrics(&result, spec.settle_threshold);
            Ok(RunOutput { result, metrics })
        }
        Err(IntegrationError::Divergence { t, partial: Some(result) }) => {
            let metrics = Box::new(compute_metrics(&result, spec.settle_threshold));
            Err(ScenarioError::Divergence { t, result, metrics })
        }
        Err(e) => Err(ScenarioError::Integration(e)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    ExtendedBetter,
    Inconclusive,
}

/// Ratio `ablated / extended` of final error norms at which the extended
/// law is declared better.
pub const VERDICT_RATIO: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantReport {
    pub variant: LawVariant,
    pub metrics: Metrics,
    /// `(t, ‖x_e‖)` at the trace samples.
    pub error_norm: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub scenario: String,
    pub extended: VariantReport,
    pub ablated: VariantReport,
    /// `ablated / extended` final error; infinite if only the extended
    /// error is zero, 1 when both are.
    pub ratio: f64,
    pub verdict: Verdict,
}

fn variant_report(out: &RunOutput, variant: LawVariant) -> VariantReport {
    VariantReport {
        variant,
        metrics: out.metrics.clone(),
        error_norm: out.result.trace.iter().map(|r| (r.t, dot(&r.x_e, &r.x_e).sqrt())).collect(),
    }
}

/// Runs the extended and ablated laws side by side.
pub fn compare(scenario: &Scenario) -> Result<(Comparison, RunOutput, RunOutput), ScenarioError> {
    let ext = scenario.with_variant(LawVariant::Extended);
    let abl = scenario.with_variant(LawVariant::NoAffineCompensation);
    let (e, a) = std::thread::scope(|s| {
        let h = s.spawn(|| run(&abl));
        (run(&ext), h.join().expect("ablated run panicked"))
    });
    let (e, a) = (e?, a?);
    let (fe, fa) = (e.metrics.final_error_norm, a.metrics.final_error_norm);
    let ratio = if fe > 0.0 {
        fa / fe
    } else if fa > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    let verdict = if ratio >= VERDICT_RATIO && fa > scenario.settle_threshold() {
        Verdict::ExtendedBetter
    } else {
        Verdict::Inconclusive
    };
    let cmp = Comparison {
        scenario: scenario.name().to_string(),
        extended: variant_report(&e, LawVariant::Extended),
        ablated: variant_report(&a, LawVariant::NoAffineCompensation),
        ratio,
        verdict,
    };
    Ok((cmp, e, a))
}

/// 17 significant digits, round-trip exact.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Header of the trace CSV for a result with state dimension `n`.
pub fn trace_header(n: usize, gain_names: &[String]) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|k| format!("x{k}")));
    h.extend((1..=n).map(|k| format!("xhat{k}")));
    h.extend((1..=n).map(|k| format!("xe{k}")));
    for c in ["u", "sigma", "sigma_hat", "V", "W"] {
        h.push(c.into());
    }
    h.extend(gain_names.iter().cloned());
    h
}

/// `trace.csv` -> `trace.events`.
pub fn events_path(path: &Path) -> PathBuf {
    path.with_extension("events")
}

/// Writes the trace CSV at `path` and the event log next to it.
pub fn export_trace(result: &SimulationResult, path: &Path) -> Result<(), ScenarioError> {
    let n = result.final_state.x.len();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trace_header(n, &result.gain_names))?;
    for r in &result.trace {
        let mut row = vec![fmt_num(r.t)];
        row.extend(r.x.iter().chain(&r.x_hat).chain(&r.x_e).map(|v| fmt_num(*v)));
        row.push(fmt_num(r.u));
        row.push(r.sigma.to_string());
        row.push(r.sigma_hat.to_string());
        row.push(fmt_num(r.v));
        row.push(fmt_num(r.w));
        row.extend(r.gains.iter().map(|v| fmt_num(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut ev = csv::Writer::from_path(events_path(path))?;
    ev.write_record(["t", "kind", "detail"])?;
    for e in &result.events {
        ev.write_record([fmt_num(e.t), e.kind.label().to_string(), e.kind.detail()])?;
    }
    ev.flush()?;
    Ok(())
}

/// Human-readable metrics summary.
pub fn describe_metrics(m: &Metrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "final |x_e|      {:.6e}", m.final_error_norm);
    match m.settling_time {
        Some(t) => {
            let _ = writeln!(s, "settling time    {t:.6} (threshold {:.1e})", m.settle_threshold);
        }
        None => {
            let _ = writeln!(s, "settling time    unsettled (threshold {:.1e})", m.settle_threshold);
        }
    }
    let _ = writeln!(s, "sup V            {:.6e}", m.sup_v);
    let _ = writeln!(s, "dV violations    {} (worst {:.3e})", m.dv_violation_count, m.worst_dv);
    let c = &m.event_counts;
    let _ = writeln!(
        s,
        "events           {} plant, {} reference, {} sliding",
        c.plant_switch, c.reference_switch, c.sliding_enter
    );
    let _ = writeln!(s, "sliding fraction {:.4}", m.sliding_time_fraction);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MATCHED: &str = r#"
name = "matched"
n = 2
t_final = 1.0
dt = 0.01
x0 = [0.5, 0.0]
x_hat0 = [0.5, 0.0]

[params]
alpha = 1.0
beta = 0.5
rho = 1.0

[input]
kind = "constant"
value = 0.0

[plant]
b = 1.0
[[plant.modes]]
a = [-1.0, -2.0]
region = [{ normal = [1.0, 0.0], offset = 0.0, strict = true }]
[[plant.modes]]
a = [-1.0, -2.0]
region = [{ normal = [-1.0, 0.0], offset = 0.0 }]

[reference]
b = 1.0
[[reference.modes]]
a = [-1.0, -2.0]
"#;

    #[test]
    fn load_save_round_trip() {
        let s = load_scenario(MATCHED).unwrap();
        assert_eq!(s.plant.mode_count(), 2);
        let text = save_scenario(&s);
        assert_eq!(load_scenario(&text).unwrap(), s);
    }

    #[test]
    fn negative_beta_is_rejected() {
        let text = MATCHED.replace("beta = 0.5", "beta = -1.0");
        assert!(matches!(load_scenario(&text), Err(ScenarioError::Params(_))));
    }

    #[test]
    fn parse_errors_carry_line_and_field() {
        let text = MATCHED.replace("dt = 0.01", "dt = \"fast\"");
        let err = load_scenario(&text).unwrap_err();
        match &err {
            ScenarioError::Parse { line, .. } => assert_eq!(*line, Some(5)),
            other => panic!("unexpected {other:?}"),
        }
        let missing = MATCHED.replace("t_final = 1.0\n", "");
        assert!(err.to_string().contains("line 5"));
        assert!(load_scenario(&missing).unwrap_err().to_string().contains("t_final"));
    }

    #[test]
    fn pinned_certificate_failure_names_mode() {
        let text = MATCHED.replace(
            "[plant]",
            "[certificate]\nkind = \"pinned\"\np = [[1.0, 0.0], [0.0, -1.0]]\n\n[plant]",
        );
        let err = load_scenario(&text).unwrap_err();
        assert!(matches!(err, ScenarioError::Certificate(_)), "{err}");
        let text = MATCHED.replace(
            "[plant]",
            "[certificate]\nkind = \"pinned\"\np = [[1.0, 0.0], [0.0, 1.0]]\n\n[plant]",
        );
        // A_0 = [[0, 1], [-1, -2]]: P = I gives PA + AᵀP = diag(0, -4), singular
        let err = load_scenario(&text).unwrap_err();
        assert!(err.to_string().contains("mode 0"), "{err}");
    }

    #[test]
    fn partition_defect_is_reported() {
        let text = MATCHED.replace("normal = [-1.0, 0.0], offset = 0.0", "normal = [-1.0, 0.0], offset = 1.0");
        assert!(matches!(load_scenario(&text), Err(ScenarioError::Partition { system: "plant", .. })));
    }

    #[test]
    fn matched_run_is_exactly_zero() {
        let s = load_scenario(MATCHED).unwrap();
        let out = run(&s).unwrap();
        assert_eq!(out.metrics.final_error_norm, 0.0);
        assert_eq!(out.metrics.dv_violation_count, 0);
        assert!(out.result.trace.iter().all(|r| r.v == 0.0 || r.v == out.result.trace[0].v));
    }

    #[test]
    fn demo_document_runs() {
        let doc = load_document("[demo]\nname = \"d\"\nx0 = [1.0, 0.0]\nt_final = 1.0\ndt = 0.01\n").unwrap();
        let Document::Demo(d) = doc else { panic!() };
        assert_eq!(d.input, std::f64::consts::PI);
        let tr = d.run().unwrap();
        assert_eq!(tr.samples.len(), 101);
        assert_eq!(tr.samples[0], [0.0, 1.0, 0.0, 0.5]);
    }

    #[test]
    fn settling_time_is_last_exceedance() {
        use crate::hybrid_integrator::StepStat;
        let mut r = run(&load_scenario(MATCHED).unwrap()).unwrap().result;
        r.steps = [(0.0, 1.0), (1.0, 1e-4), (2.0, 2e-3), (3.0, 1e-4), (4.0, 0.0)]
            .iter()
            .map(|&(t, e)| StepStat { t, error_norm: e, v: 0.0 })
            .collect();
        let m = compute_metrics(&r, 1e-3);
        assert_eq!(m.settling_time, Some(3.0));
        r.steps.push(StepStat { t: 5.0, error_norm: 1.0, v: 0.0 });
        assert_eq!(compute_metrics(&r, 1e-3).settling_time, None);
    }
}
