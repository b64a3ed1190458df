//! Penalty derivatives and their local quadratic approximation.
//!
//! Every penalized solve in the crate only needs the first derivative
//! `p'_λ(γ)` of the penalty: the estimating equations subtract `n·p'_λ(β)`
//! from the summed efficient score, and the Newton iterations replace
//! `p'_λ(β_j)` by the linear surrogate `{p'_λ(|β_j⁰|)/|β_j⁰|}·β_j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default SCAD shape parameter.
pub const DEFAULT_SCAD_A: f64 = 3.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyFamily {
    Scad,
    L1,
}

impl std::str::FromStr for PenaltyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scad" => Ok(PenaltyFamily::Scad),
            "l1" | "lasso" => Ok(PenaltyFamily::L1),
            other => Err(Error::InvalidPenalty(format!(
                "unknown penalty family `{other}` (expected scad or l1)"
            ))),
        }
    }
}

/// A validated penalty: family, regularization `lambda` and SCAD shape `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    family: PenaltyFamily,
    lambda: f64,
    a: f64,
}

impl PenaltySpec {
    pub fn new(family: PenaltyFamily, lambda: f64, a: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidPenalty(format!(
                "lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        if family == PenaltyFamily::Scad && !(a > 2.0 && a.is_finite()) {
            return Err(Error::InvalidPenalty(format!("SCAD shape a must exceed 2, got {a}")));
        }
        Ok(Self { family, lambda, a })
    }

    pub fn scad(lambda: f64) -> Result<Self> {
        Self::new(PenaltyFamily::Scad, lambda, DEFAULT_SCAD_A)
    }

    pub fn l1(lambda: f64) -> Result<Self> {
        Self::new(PenaltyFamily::L1, lambda, DEFAULT_SCAD_A)
    }

    pub fn family(&self) -> PenaltyFamily {
        self.family
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    /// Same family and shape, different `lambda`.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.family, lambda, self.a)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// First derivative `p'_λ(γ)` of the penalty; odd in `γ`.
pub fn penalty_prime(gamma: f64, spec: &PenaltySpec) -> f64 {
    let lambda = spec.lambda;
    if lambda == 0.0 {
        return 0.0;
    }
    let abs = gamma.abs();
    let magnitude = match spec.family {
        PenaltyFamily::L1 => lambda,
        PenaltyFamily::Scad => {
            if abs <= lambda {
                lambda
            } else {
                (spec.a * lambda - abs).max(0.0) / (spec.a - 1.0)
            }
        }
    };
    magnitude * sign(gamma)
}

/// Componentwise `p'_λ(β_j)`; indices in `unpenalized` get exactly zero.
pub fn penalty_gradient(beta: &[f64], spec: &PenaltySpec, unpenalized: &[usize]) -> Vec<f64> {
    beta.iter()
        .enumerate()
        .map(|(j, &b)| {
            if unpenalized.contains(&j) {
                0.0
            } else {
                penalty_prime(b, spec)
            }
        })
        .collect()
}

/// Outcome of the local quadratic approximation for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LqaWeight {
    /// Diagonal weight `p'_λ(|β_j|)/|β_j|`.
    Weight(f64),
    /// The coefficient is numerically zero: set it to 0 and drop it from the working set.
    ZeroLock,
}

impl LqaWeight {
    pub fn weight(self) -> Option<f64> {
        match self {
            LqaWeight::Weight(w) => Some(w),
            LqaWeight::ZeroLock => None,
        }
    }
}

pub fn lqa_weight(beta_j: f64, spec: &PenaltySpec, zero_threshold: f64) -> LqaWeight {
    debug_assert!(zero_threshold > 0.0);
    let abs = beta_j.abs();
    if abs < zero_threshold {
        return LqaWeight::ZeroLock;
    }
    LqaWeight::Weight(penalty_prime(abs, spec) / abs)
}

/// Zero-lock threshold relative to the starting estimate: `1e-6·max(1, ‖β⁰‖∞)`.
pub fn default_zero_threshold(beta_init: &[f64]) -> f64 {
    let sup = beta_init.iter().fold(0.0_f64, |m, b| m.max(b.abs()));
    1e-6 * sup.max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scad_branches() {
        let p = PenaltySpec::scad(1.0).unwrap();
        assert_eq!(penalty_prime(0.5, &p), 1.0);
        assert_eq!(penalty_prime(0.0, &p), 0.0);
        assert!((penalty_prime(2.0, &p) - 1.7 / 2.7).abs() < 1e-15);
        assert!((penalty_prime(2.0, &p) - 0.629630).abs() < 1e-6);
        assert_eq!(penalty_prime(5.0, &p), 0.0);
        assert_eq!(penalty_prime(-0.5, &p), -1.0);
    }

    #[test]
    fn l1_is_constant_magnitude() {
        let p = PenaltySpec::l1(0.3).unwrap();
        assert_eq!(penalty_prime(10.0, &p), 0.3);
        assert_eq!(penalty_prime(-1e-4, &p), -0.3);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(PenaltySpec::new(PenaltyFamily::Scad, 1.0, 2.0).is_err());
        assert!(PenaltySpec::new(PenaltyFamily::Scad, -0.1, 3.7).is_err());
        assert!(PenaltySpec::new(PenaltyFamily::L1, f64::NAN, 3.7).is_err());
        // shape is irrelevant for L1
        assert!(PenaltySpec::new(PenaltyFamily::L1, 1.0, 1.0).is_ok());
    }

    #[test]
    fn gradient_examples() {
        let p = PenaltySpec::scad(1.0).unwrap();
        let g = penalty_gradient(&[0.5, 2.0], &p, &[]);
        assert_eq!(g[0], 1.0);
        assert!((g[1] - 0.629630).abs() < 1e-6);
        let zero = PenaltySpec::scad(0.0).unwrap();
        assert!(penalty_gradient(&[0.1, -3.0, 7.0], &zero, &[])
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(penalty_gradient(&[0.5], &p, &[0]), vec![0.0]);
    }

    #[test]
    fn lqa_examples() {
        let p = PenaltySpec::scad(1.0).unwrap();
        assert_eq!(lqa_weight(0.5, &p, 1e-6), LqaWeight::Weight(2.0));
        assert_eq!(lqa_weight(4.0, &p, 1e-6), LqaWeight::Weight(0.0));
        assert_eq!(lqa_weight(1e-9, &p, 1e-6), LqaWeight::ZeroLock);
    }

    #[test]
    fn zero_threshold_scales() {
        assert_eq!(default_zero_threshold(&[0.1, -0.5]), 1e-6);
        assert!((default_zero_threshold(&[3.0, -20.0]) - 2e-5).abs() < 1e-18);
    }

    #[test]
    fn scad_continuous_at_lambda() {
        let p = PenaltySpec::scad(0.7).unwrap();
        let mut eps = 1e-2;
        let mut last = f64::INFINITY;
        while eps > 1e-12 {
            let jump = (penalty_prime(0.7 + eps, &p) - penalty_prime(0.7 - eps, &p)).abs();
            assert!(jump <= last + 1e-15);
            last = jump;
            eps /= 10.0;
        }
        assert!(last < 1e-11);
    }

    proptest! {
        #[test]
        fn odd_and_bounded(gamma in -50.0..50.0f64, lambda in 0.0..5.0f64, a in 2.01..10.0f64) {
            for family in [PenaltyFamily::Scad, PenaltyFamily::L1] {
                let p = PenaltySpec::new(family, lambda, a).unwrap();
                prop_assert_eq!(penalty_prime(-gamma, &p), -penalty_prime(gamma, &p));
                prop_assert!(penalty_prime(gamma, &p).abs() <= lambda);
            }
        }

        #[test]
        fn scad_flat_region(beta in -50.0..50.0f64, lambda in 0.01..5.0f64, a in 2.01..10.0f64) {
            let p = PenaltySpec::new(PenaltyFamily::Scad, lambda, a).unwrap();
            if let LqaWeight::Weight(w) = lqa_weight(beta, &p, 1e-9) {
                prop_assert_eq!(w == 0.0, beta.abs() >= a * lambda);
            }
        }
    }
}
