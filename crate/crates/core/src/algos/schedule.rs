use serde::{Deserialize, Serialize};

/// Lower bound of the polynomial schedule, never above the initial rate.
pub const POLY_FLOOR: f64 = 1e-6;
/// Remaining fraction of the exponential schedule at the horizon.
pub const EXP_END_FACTOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrKind {
    Constant,
    Polynomial { power: f64 },
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    #[serde(flatten)]
    pub kind: LrKind,
    pub initial: f64,
    /// Steps over which the schedule decays; 0 means "the run's step budget".
    pub horizon: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { kind: LrKind::Polynomial { power: 1.0 }, initial: 3e-4, horizon: 0 }
    }
}

impl LrSchedule {
    pub fn with_horizon(self, horizon: u64) -> Self {
        if self.horizon == 0 {
            Self { horizon, ..self }
        } else {
            self
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        lr_schedule(self.kind, self.initial, step, self.horizon)
    }

    /// Fraction of the horizon elapsed, in [0, 1].
    pub fn progress(&self, step: u64) -> f64 {
        if self.horizon == 0 {
            0.0
        } else {
            (step as f64 / self.horizon as f64).min(1.0)
        }
    }
}

pub fn lr_schedule(kind: LrKind, initial: f64, step: u64, horizon: u64) -> f64 {
    let frac = if horizon == 0 { 0.0 } else { (step as f64 / horizon as f64).min(1.0) };
    match kind {
        LrKind::Constant => initial,
        LrKind::Polynomial { power } => (initial * (1.0 - frac).powf(power)).max(POLY_FLOOR.min(initial)),
        LrKind::Exponential => initial * EXP_END_FACTOR.powf(frac),
    }
}

/// Entropy coefficient decaying linearly at half the speed of a linear learning-rate decay.
pub fn beta_at(initial: f64, progress: f64) -> f64 {
    initial * (1.0 - 0.5 * progress.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    const POLY: LrKind = LrKind::Polynomial { power: 1.0 };

    #[test]
    fn endpoints() {
        assert_eq!(lr_schedule(POLY, 1e-3, 0, 100), 1e-3);
        assert_eq!(lr_schedule(LrKind::Exponential, 1e-3, 0, 100), 1e-3);
        assert_eq!(lr_schedule(POLY, 1e-3, 100, 100), 1e-6);
        assert!((lr_schedule(LrKind::Exponential, 1e-3, 100, 100) - 1e-5).abs() < 1e-18);
        assert!((lr_schedule(POLY, 1e-3, 50, 100) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn beta_halves_by_the_end() {
        assert_eq!(beta_at(0.01, 0.0), 0.01);
        assert!((beta_at(0.01, 1.0) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn serde_shape() {
        let s: LrSchedule = toml::from_str("kind = \"exponential\"\ninitial = 0.001\n").unwrap();
        assert_eq!(s.kind, LrKind::Exponential);
        let s: LrSchedule = toml::from_str("kind = \"polynomial\"\npower = 2.0\n").unwrap();
        assert_eq!(s.kind, LrKind::Polynomial { power: 2.0 });
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn non_increasing(a in 0u64..2000, b in 0u64..2000, init in 1e-5f64..1e-2, p in 0.5f64..3.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                for kind in [LrKind::Polynomial { power: p }, LrKind::Exponential, LrKind::Constant] {
                    prop_assert!(lr_schedule(kind, init, hi, 1000) <= lr_schedule(kind, init, lo, 1000));
                }
            }
        }
    }
}
