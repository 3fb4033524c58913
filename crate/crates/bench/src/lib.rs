//! Shared setup for the benchmarks in `benches/`.

use std::path::PathBuf;

use pwa_mrac::scenario::{load_scenario, Scenario};

/// Loads one of the shipped scenarios by file stem.
pub fn fixture(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.scn"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    load_scenario(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}
