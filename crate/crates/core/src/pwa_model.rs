//! Piecewise affine systems in companion form.
//!
//! A [`PwaSystem`] is a family of affine modes
//! `ẋ = A_i x + B u + B_i`, each attached to a convex polyhedral region of
//! the state space. Only the last row of `A_i`, the shared input gain `b`
//! and the scalar affine term `b_i` are stored; the shift structure of the
//! companion matrix is implied.
//!
//! Boundary points are owned by the lowest-index region whose closure
//! contains them.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::dot;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("no region contains state {x:?} (partition defect)")]
    PartitionDefect { x: Vec<f64> },
    #[error("mode index {index} out of range (system has {count} modes)")]
    ModeOutOfRange { index: usize, count: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("guard normal must be nonzero and finite")]
    DegenerateGuard,
    #[error("input gain must be positive and finite, got {0}")]
    NonPositiveInputGain(f64),
    #[error("system needs at least one mode, and one region per mode (got {modes} modes, {regions} regions)")]
    ModeRegionCount { modes: usize, regions: usize },
    #[error("state dimension must be at least 1")]
    EmptyState,
    #[error("non-finite coefficient in mode {0}")]
    NonFinite(usize),
}

/// One affine mode: last row of the companion matrix plus the affine offset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeDynamics {
    pub last_row: Vec<f64>,
    pub affine: f64,
}

impl ModeDynamics {
    pub fn new(last_row: Vec<f64>, affine: f64) -> Self {
        Self { last_row, affine }
    }

    pub fn dim(&self) -> usize {
        self.last_row.len()
    }

    /// Dense companion matrix with ones on the superdiagonal.
    pub fn state_matrix(&self) -> DMatrix<f64> {
        companion(&self.last_row)
    }
}

/// Companion matrix whose last row is `last_row`.
pub fn companion(last_row: &[f64]) -> DMatrix<f64> {
    let n = last_row.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        a[(i, i + 1)] = 1.0;
    }
    for (j, &v) in last_row.iter().enumerate() {
        a[(n - 1, j)] = v;
    }
    a
}

/// Affine half-space `normal · x >= offset` (or `>` when strict).
///
/// The normal is scaled to unit length at construction, so
/// [`Guard::signed_distance`] is a metric distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Guard {
    normal: Vec<f64>,
    offset: f64,
    strict: bool,
}

impl Guard {
    pub fn new(normal: Vec<f64>, offset: f64, strict: bool) -> Result<Self, ModelError> {
        let norm = dot(&normal, &normal).sqrt();
        if !(norm.is_finite() && norm > 0.0) || !offset.is_finite() {
            return Err(ModelError::DegenerateGuard);
        }
        Ok(Self {
            normal: normal.iter().map(|v| v / norm).collect(),
            offset: offset / norm,
            strict,
        })
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    /// `normal · x - offset`; positive where the inequality holds.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        dot(&self.normal, x) - self.offset
    }

    fn holds(&self, x: &[f64]) -> bool {
        let d = self.signed_distance(x);
        if self.strict {
            d > 0.0
        } else {
            d >= 0.0
        }
    }
}

/// Convex polyhedral region: conjunction of guards. An empty guard list is
/// the whole space.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Region {
    guards: Vec<Guard>,
}

impl Region {
    pub fn new(guards: Vec<Guard>) -> Self {
        Self { guards }
    }

    pub fn whole_space() -> Self {
        Self::default()
    }

    pub fn guards(&self) -> &[Guard] {
        &self.guards
    }

    /// Membership with every guard read as written.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.guards.iter().all(|g| g.holds(x))
    }

    /// Membership in the topological closure.
    pub fn closure_contains(&self, x: &[f64]) -> bool {
        self.guards.iter().all(|g| g.signed_distance(x) >= 0.0)
    }

    /// Membership in the open interior.
    pub fn interior_contains(&self, x: &[f64]) -> bool {
        self.guards.iter().all(|g| g.signed_distance(x) > 0.0)
    }
}

/// Identifies guard `guard` of region `region`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GuardId {
    pub region: usize,
    pub guard: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PwaSystem {
    dim: usize,
    input_gain: f64,
    modes: Vec<ModeDynamics>,
    regions: Vec<Region>,
}

impl PwaSystem {
    pub fn new(input_gain: f64, modes: Vec<ModeDynamics>, regions: Vec<Region>) -> Result<Self, ModelError> {
        if modes.is_empty() || modes.len() != regions.len() {
            return Err(ModelError::ModeRegionCount {
                modes: modes.len(),
                regions: regions.len(),
            });
        }
        if !(input_gain.is_finite() && input_gain > 0.0) {
            return Err(ModelError::NonPositiveInputGain(input_gain));
        }
        let dim = modes[0].dim();
        if dim == 0 {
            return Err(ModelError::EmptyState);
        }
        for (i, m) in modes.iter().enumerate() {
            if m.dim() != dim {
                return Err(ModelError::DimensionMismatch { expected: dim, got: m.dim() });
            }
            if !m.affine.is_finite() || m.last_row.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(i));
            }
        }
        for g in regions.iter().flat_map(|r| r.guards()) {
            if g.normal().len() != dim {
                return Err(ModelError::DimensionMismatch { expected: dim, got: g.normal().len() });
            }
        }
        Ok(Self { dim, input_gain, modes, regions })
    }

    /// Single-mode system over the whole state space.
    pub fn lti(input_gain: f64, mode: ModeDynamics) -> Result<Self, ModelError> {
        Self::new(input_gain, vec![mode], vec![Region::whole_space()])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_gain(&self) -> f64 {
        self.input_gain
    }

    pub fn mode_count(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[ModeDynamics] {
        &self.modes
    }

    pub fn mode(&self, index: usize) -> Result<&ModeDynamics, ModelError> {
        self.modes.get(index).ok_or(ModelError::ModeOutOfRange {
            index,
            count: self.modes.len(),
        })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn guard(&self, id: GuardId) -> &Guard {
        &self.regions[id.region].guards()[id.guard]
    }

    /// True when every affine term is zero.
    pub fn is_piecewise_linear(&self) -> bool {
        self.modes.iter().all(|m| m.affine == 0.0)
    }

    /// Index of the region owning `x`: the lowest index whose closure
    /// contains it.
    pub fn active_region(&self, x: &[f64]) -> Result<usize, ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        self.regions
            .iter()
            .position(|r| r.closure_contains(x))
            .ok_or_else(|| ModelError::PartitionDefect { x: x.to_vec() })
    }

    /// One-hot indicator vector of the active region.
    pub fn indicators(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let i = self.active_region(x)?;
        let mut v = vec![0.0; self.modes.len()];
        v[i] = 1.0;
        Ok(v)
    }

    /// `A_mode x + B input + B_mode`.
    pub fn mode_derivative(&self, mode: usize, x: &[f64], input: f64) -> Result<Vec<f64>, ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let m = self.mode(mode)?;
        let mut dx = vec![0.0; self.dim];
        self.mode_derivative_into(m, x, input, &mut dx);
        Ok(dx)
    }

    pub(crate) fn mode_derivative_into(&self, m: &ModeDynamics, x: &[f64], input: f64, out: &mut [f64]) {
        let n = self.dim;
        out[..n - 1].copy_from_slice(&x[1..]);
        out[n - 1] = dot(&m.last_row, x) + self.input_gain * input + m.affine;
    }

    /// Signed distance of `x` to every guard hyperplane, in region order.
    pub fn boundary_distance(&self, x: &[f64]) -> Vec<(GuardId, f64)> {
        self.regions
            .iter()
            .enumerate()
            .flat_map(|(region, r)| {
                r.guards()
                    .iter()
                    .enumerate()
                    .map(move |(guard, g)| (GuardId { region, guard }, g.signed_distance(x)))
            })
            .collect()
    }

    /// Monte-Carlo check of the partition property over an axis-aligned box.
    ///
    /// Cover defects are samples outside every region's closure; overlap
    /// defects are samples inside the open interior of two or more regions.
    pub fn validate_partition(&self, sample_count: usize, bounds: &SampleBox, seed: u64) -> PartitionReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut report = PartitionReport {
            samples: sample_count,
            ..Default::default()
        };
        let mut x = vec![0.0; self.dim];
        for _ in 0..sample_count {
            for (k, xi) in x.iter_mut().enumerate() {
                let (lo, hi) = bounds.range(k);
                *xi = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            }
            let claimed_closed = self.regions.iter().filter(|r| r.closure_contains(&x)).count();
            if claimed_closed == 0 {
                report.cover_defects.push(x.clone());
            }
            let claimed_open: Vec<usize> = self
                .regions
                .iter()
                .enumerate()
                .filter(|(_, r)| r.interior_contains(&x))
                .map(|(i, _)| i)
                .collect();
            if claimed_open.len() >= 2 {
                report.overlap_defects.push((x.clone(), claimed_open));
            }
        }
        report
    }
}

/// Axis-aligned sampling box; a single range is broadcast to every axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBox {
    ranges: Vec<(f64, f64)>,
}

impl SampleBox {
    pub fn new(ranges: Vec<(f64, f64)>) -> Self {
        assert!(!ranges.is_empty(), "sample box needs at least one range");
        Self { ranges }
    }

    pub fn cube(lo: f64, hi: f64) -> Self {
        Self { ranges: vec![(lo, hi)] }
    }

    fn range(&self, axis: usize) -> (f64, f64) {
        self.ranges[axis.min(self.ranges.len() - 1)]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartitionReport {
    pub samples: usize,
    pub cover_defects: Vec<Vec<f64>>,
    pub overlap_defects: Vec<(Vec<f64>, Vec<usize>)>,
}

impl PartitionReport {
    pub fn passed(&self) -> bool {
        self.cover_defects.is_empty() && self.overlap_defects.is_empty()
    }
}
