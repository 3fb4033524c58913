//! Reference-model input signals `r(t)`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferenceInput {
    Constant {
        value: f64,
    },
    Step {
        time: f64,
        before: f64,
        after: f64,
    },
    /// `offset + amplitude` on the first half of each period, `offset -
    /// amplitude` on the second.
    Square {
        amplitude: f64,
        period: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `offset + amplitude · sin(2π frequency t + phase)`.
    Sine {
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Zero-order hold: `values[k]` on `[times[k], times[k+1])`, `values[0]`
    /// before `times[0]`.
    Table {
        times: Vec<f64>,
        values: Vec<f64>,
    },
}

impl ReferenceInput {
    pub fn validate(&self) -> Result<(), String> {
        let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
        match self {
            Self::Constant { value } if finite(&[*value]) => Ok(()),
            Self::Step { time, before, after } if finite(&[*time, *before, *after]) => Ok(()),
            Self::Square { amplitude, period, offset } if finite(&[*amplitude, *period, *offset]) && *period > 0.0 => Ok(()),
            Self::Sine {
                amplitude,
                frequency,
                phase,
                offset,
            } if finite(&[*amplitude, *frequency, *phase, *offset]) => Ok(()),
            Self::Table { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    Err("table needs matching, nonempty `times` and `values`".into())
                } else if !finite(times) || !finite(values) || times.windows(2).any(|w| w[1] <= w[0]) {
                    Err("table times must be finite and strictly increasing, values finite".into())
                } else {
                    Ok(())
                }
            }
            _ => Err(format!("reference input has non-finite or invalid parameters: {self:?}")),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Step { time, before, after } => {
                if t < *time {
                    *before
                } else {
                    *after
                }
            }
            Self::Square { amplitude, period, offset } => {
                let phase = (t / period).rem_euclid(1.0);
                if phase < 0.5 {
                    offset + amplitude
                } else {
                    offset - amplitude
                }
            }
            Self::Sine {
                amplitude,
                frequency,
                phase,
                offset,
            } => offset + amplitude * (2.0 * PI * frequency * t + phase).sin(),
            Self::Table { times, values } => {
                let k = times.partition_point(|&s| s <= t);
                values[k.saturating_sub(1)]
            }
        }
    }

    pub fn is_piecewise_constant(&self) -> bool {
        !matches!(self, Self::Sine { .. })
    }

    /// Value used at stage time `t_stage` of a step over `[t0, t1]` that
    /// contains no breakpoint in its interior. Piecewise-constant signals
    /// are sampled at the step midpoint so a jump at either end is never
    /// seen from the wrong side.
    pub fn value_on_step(&self, t0: f64, t1: f64, t_stage: f64) -> f64 {
        if self.is_piecewise_constant() {
            self.value(0.5 * (t0 + t1))
        } else {
            self.value(t_stage)
        }
    }

    /// First discontinuity strictly after `t`.
    pub fn next_breakpoint(&self, t: f64) -> Option<f64> {
        let eps = 1e-12 * (1.0 + t.abs());
        match self {
            Self::Constant { .. } | Self::Sine { .. } => None,
            Self::Step { time, .. } => (*time > t + eps).then_some(*time),
            Self::Square { period, .. } => {
                let half = 0.5 * period;
                let mut k = (t / half).floor() + 1.0;
                while k * half <= t + eps {
                    k += 1.0;
                }
                Some(k * half)
            }
            Self::Table { times, .. } => times.iter().copied().find(|&s| s > t + eps),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_wave_values_and_breakpoints() {
        let s = ReferenceInput::Square {
            amplitude: 1.0,
            period: 4.0,
            offset: 0.5,
        };
        assert_eq!(s.value(0.0), 1.5);
        assert_eq!(s.value(1.999), 1.5);
        assert_eq!(s.value(2.0), -0.5);
        assert_eq!(s.value(4.0), 1.5);
        assert_eq!(s.next_breakpoint(0.0), Some(2.0));
        assert_eq!(s.next_breakpoint(2.0), Some(4.0));
        assert_eq!(s.next_breakpoint(3.5), Some(4.0));
        assert_eq!(s.value_on_step(1.5, 2.0, 2.0), 1.5);
    }

    #[test]
    fn table_and_step() {
        let t = ReferenceInput::Table {
            times: vec![1.0, 2.0],
            values: vec![3.0, -1.0],
        };
        assert_eq!(t.value(0.0), 3.0);
        assert_eq!(t.value(1.5), 3.0);
        assert_eq!(t.value(2.0), -1.0);
        assert_eq!(t.next_breakpoint(0.0), Some(1.0));
        assert_eq!(t.next_breakpoint(2.0), None);
        assert!(t.validate().is_ok());
        let bad = ReferenceInput::Table {
            times: vec![1.0, 1.0],
            values: vec![0.0, 0.0],
        };
        assert!(bad.validate().is_err());

        let s = ReferenceInput::Step {
            time: 1.0,
            before: 0.0,
            after: 2.0,
        };
        assert_eq!(s.value(0.999), 0.0);
        assert_eq!(s.value(1.0), 2.0);
        assert_eq!(s.next_breakpoint(1.0), None);
    }

    #[test]
    fn sine_is_smooth() {
        let s = ReferenceInput::Sine {
            amplitude: 2.0,
            frequency: 0.25,
            phase: 0.0,
            offset: 0.0,
        };
        assert!((s.value(1.0) - 2.0).abs() < 1e-15);
        assert_eq!(s.next_breakpoint(0.0), None);
        assert!(!s.is_piecewise_constant());
    }
}
