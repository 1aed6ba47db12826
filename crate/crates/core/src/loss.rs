//! Margin-based surrogate losses φ(z), where `z = y · f(x)`.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Surrogate {
    /// `log(1 + e^{-z})`
    #[default]
    Logistic,
    /// `max(0, 1 - z)`
    Hinge,
    /// `min(log(1 + e^{-z}), bound)`: a bounded logistic loss.
    ClippedLogistic { bound: f64 },
}

impl Surrogate {
    pub fn value(self, z: f64) -> f64 {
        match self {
            Surrogate::Logistic => softplus(-z),
            Surrogate::Hinge => (1.0 - z).max(0.0),
            Surrogate::ClippedLogistic { bound } => softplus(-z).min(bound),
        }
    }

    /// dφ/dz. Hinge uses the subgradient 0 at the kink.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Surrogate::Logistic => -sigmoid(-z),
            Surrogate::Hinge => {
                if z < 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Surrogate::ClippedLogistic { bound } => {
                if softplus(-z) >= bound {
                    0.0
                } else {
                    -sigmoid(-z)
                }
            }
        }
    }
}

impl fmt::Display for Surrogate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Surrogate::Logistic => f.write_str("logistic"),
            Surrogate::Hinge => f.write_str("hinge"),
            Surrogate::ClippedLogistic { .. } => f.write_str("clipped_logistic"),
        }
    }
}

impl FromStr for Surrogate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logistic" => Ok(Surrogate::Logistic),
            "hinge" => Ok(Surrogate::Hinge),
            "clipped_logistic" => Ok(Surrogate::ClippedLogistic { bound: 10.0 }),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_at_zero_is_log2() {
        assert!((Surrogate::Logistic.value(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logistic_vanishes_for_confident_margin() {
        assert!(Surrogate::Logistic.value(50.0) < 1e-20);
        assert_eq!(Surrogate::Logistic.value(1e4), 0.0);
        assert!(Surrogate::Logistic.value(-1e4).is_finite());
    }

    #[test]
    fn hinge_values() {
        assert!((Surrogate::Hinge.value(0.4) - 0.6).abs() < 1e-15);
        assert_eq!(Surrogate::Hinge.value(2.0), 0.0);
    }

    #[test]
    fn clipped_is_bounded() {
        let s = Surrogate::ClippedLogistic { bound: 2.0 };
        assert_eq!(s.value(-100.0), 2.0);
        assert_eq!(s.derivative(-100.0), 0.0);
        assert_eq!(s.value(0.0), Surrogate::Logistic.value(0.0));
    }

    #[test]
    fn derivative_matches_central_difference() {
        for &z in &[-3.0, -0.2, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (Surrogate::Logistic.value(z + h) - Surrogate::Logistic.value(z - h)) / (2.0 * h);
            assert!((fd - Surrogate::Logistic.derivative(z)).abs() < 1e-8);
        }
    }
}
