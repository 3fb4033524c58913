//! Model reference adaptive control of piecewise-affine systems with
//! switching gains, affine-term compensation and Filippov sliding.

pub mod adaptive_law;
pub mod certificate;
pub mod hybrid_integrator;
mod linalg;
pub mod plot;
pub mod pwa_model;
pub mod scenario;
pub mod signal;

pub use adaptive_law::{AdaptationParams, GainSlot, GainState, LawError, LawVariant, SwitchingGain};
pub use certificate::{Certificate, CertificateError, PsiConvention, PsiDiagnostics};
pub use hybrid_integrator::{
    ClosedLoop, ClosedLoopState, EventKind, EventRecord, IntegrationConfig, IntegrationError, Integrator, PlantPhase,
    SimulationResult, StepStat, TraceRecord,
};
pub use pwa_model::{Guard, GuardId, ModeDynamics, ModelError, PartitionReport, PwaSystem, Region, SampleBox};
pub use signal::ReferenceInput;
pub use scenario::{compare, export_trace, load_scenario, run, save_scenario, Metrics, Scenario, ScenarioError};
