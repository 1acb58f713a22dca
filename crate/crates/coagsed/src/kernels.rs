//! Coagulation kernels and their structural assumptions.
//!
//! Two families are supported: sum kernels `v^γ + w^γ` and the differential
//! sedimentation ("rain") kernel `|v^α − w^α| (v^{1/3} + w^{1/3})²`. Both can
//! be multiplied by a constant or truncated in `v + w`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Sum { gamma: f64 },
    Rain { alpha: f64 },
    Scaled { factor: f64, inner: Box<Variant> },
    Truncated { n: f64, inner: Box<Variant> },
}

/// A kernel together with the constants of its upper bound
/// `K(v,w) <= k0 (v^gamma + w^gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub variant: Variant,
    pub k0: f64,
    pub gamma: f64,
}

impl KernelSpec {
    pub fn sum(gamma: f64) -> Self {
        KernelSpec {
            variant: Variant::Sum { gamma },
            k0: 1.0,
            gamma,
        }
    }

    /// Rain kernel. Its homogeneity `gamma` and bound constant `k0` are
    /// supplied by the caller and can be checked with
    /// [`check_structural_assumptions`] or fitted with [`fit_k0`].
    pub fn rain(alpha: f64, gamma: f64, k0: f64) -> Self {
        KernelSpec {
            variant: Variant::Rain { alpha },
            k0,
            gamma,
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        KernelSpec {
            variant: Variant::Scaled {
                factor,
                inner: Box::new(self.variant),
            },
            k0: self.k0 * factor.abs(),
            gamma: self.gamma,
        }
    }

    pub fn eval(&self, v: f64, w: f64) -> Result<f64> {
        if !(v > 0.0 && w > 0.0) {
            return Err(Error::domain(format!(
                "kernel arguments must be positive, got v={v}, w={w}"
            )));
        }
        Ok(eval_variant(&self.variant, v, w))
    }

    /// Evaluation without the positivity check, for hot loops over grid nodes.
    #[inline]
    pub fn eval_unchecked(&self, v: f64, w: f64) -> f64 {
        eval_variant(&self.variant, v, w)
    }

    /// The truncation volume if the outermost layer is a truncation.
    pub fn truncation(&self) -> Option<f64> {
        match &self.variant {
            Variant::Truncated { n, .. } => Some(*n),
            _ => None,
        }
    }
}

fn eval_variant(variant: &Variant, v: f64, w: f64) -> f64 {
    match variant {
        Variant::Sum { gamma } => v.powf(*gamma) + w.powf(*gamma),
        Variant::Rain { alpha } => {
            let s = v.cbrt() + w.cbrt();
            (v.powf(*alpha) - w.powf(*alpha)).abs() * s * s
        }
        Variant::Scaled { factor, inner } => factor * eval_variant(inner, v, w),
        Variant::Truncated { n, inner } => {
            let chi = cutoff(v + w, *n);
            if chi == 0.0 {
                0.0
            } else {
                chi * eval_variant(inner, v, w)
            }
        }
    }
}

pub fn eval_kernel(spec: &KernelSpec, v: f64, w: f64) -> Result<f64> {
    spec.eval(v, w)
}

/// Linear ramp: 1 on `[0, n/2]`, 0 on `[n, ∞)`.
pub fn cutoff(x: f64, n: f64) -> f64 {
    if x <= 0.5 * n {
        1.0
    } else if x >= n {
        0.0
    } else {
        2.0 * (n - x) / n
    }
}

pub fn truncate(spec: &KernelSpec, n: f64) -> Result<KernelSpec> {
    if !(n > 0.0) {
        return Err(Error::domain(format!("truncation volume must be positive, got {n}")));
    }
    Ok(KernelSpec {
        variant: Variant::Truncated {
            n,
            inner: Box::new(spec.variant.clone()),
        },
        k0: spec.k0,
        gamma: spec.gamma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Assumption {
    /// `K(v−w, w) <= K(v, w)` for `w <= v/2`.
    MonotoneDifference,
    /// `K(v, w) <= K0 (v^γ + w^γ)`.
    UpperBound,
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub assumption: Assumption,
    pub v: f64,
    pub w: f64,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AssumptionReport {
    pub samples: usize,
    pub violations: Vec<Violation>,
}

/// Volumes are drawn log-uniformly from this range.
pub const SAMPLE_RANGE: (f64, f64) = (1e-3, 1e3);

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

pub fn check_structural_assumptions(spec: &KernelSpec, sample_count: usize, seed: u64) -> AssumptionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = SAMPLE_RANGE;
    let mut report = AssumptionReport {
        samples: sample_count,
        violations: Vec::new(),
    };
    for _ in 0..sample_count {
        let v = log_uniform(&mut rng, lo, hi);
        let w = 0.5 * v * rng.gen_range(f64::EPSILON..=1.0);
        let lhs = spec.eval_unchecked(v - w, w);
        let rhs = spec.eval_unchecked(v, w);
        if lhs > rhs {
            report.violations.push(Violation {
                assumption: Assumption::MonotoneDifference,
                v,
                w,
                lhs,
                rhs,
            });
        }

        let v = log_uniform(&mut rng, lo, hi);
        let w = log_uniform(&mut rng, lo, hi);
        let lhs = spec.eval_unchecked(v, w);
        let rhs = spec.k0 * (v.powf(spec.gamma) + w.powf(spec.gamma));
        if lhs > rhs {
            report.violations.push(Violation {
                assumption: Assumption::UpperBound,
                v,
                w,
                lhs,
                rhs,
            });
        }
    }
    report
}

/// Smallest `K0` such that `K(v,w) <= K0 (v^γ + w^γ)` on the sampled pairs.
pub fn fit_k0(spec: &KernelSpec, sample_count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = SAMPLE_RANGE;
    let mut k0: f64 = 0.0;
    for _ in 0..sample_count {
        let v = log_uniform(&mut rng, lo, hi);
        let w = log_uniform(&mut rng, lo, hi);
        let ratio = spec.eval_unchecked(v, w) / (v.powf(spec.gamma) + w.powf(spec.gamma));
        k0 = k0.max(ratio);
    }
    k0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn sum_kernel_at_unit_volumes() {
        assert_eq!(KernelSpec::sum(2.0).eval(1.0, 1.0).unwrap(), 2.0);
    }

    #[test]
    fn rain_kernel_vanishes_on_diagonal() {
        let k = KernelSpec::rain(0.5, 0.5 + 2.0 / 3.0, 2.0);
        for v0 in [1e-3, 0.7, 1.0, 42.0] {
            assert_eq!(k.eval(v0, v0).unwrap(), 0.0);
        }
    }

    #[test]
    fn rain_kernel_hand_value() {
        let k = KernelSpec::rain(0.5, 0.5 + 2.0 / 3.0, 2.0);
        assert_relative_eq!(k.eval(4.0, 1.0).unwrap(), 6.694_644_203_726_145, max_relative = 1e-12);
    }

    #[test]
    fn nonpositive_arguments_rejected() {
        let k = KernelSpec::sum(1.2);
        assert!(k.eval(0.0, 1.0).is_err());
        assert!(k.eval(1.0, -2.0).is_err());
    }

    #[test]
    fn truncation_plateaus_and_ramp() {
        let k = truncate(&KernelSpec::sum(2.0), 4.0).unwrap();
        assert_eq!(k.eval(1.0, 1.0).unwrap(), 2.0);
        assert_eq!(k.eval(3.0, 2.0).unwrap(), 0.0);
        assert_relative_eq!(k.eval(2.0, 1.0).unwrap(), 2.5, max_relative = 1e-15);
        assert!(truncate(&KernelSpec::sum(2.0), 0.0).is_err());
    }

    #[test]
    fn sum_kernel_satisfies_assumptions() {
        let report = check_structural_assumptions(&KernelSpec::sum(1.2), 100_000, 7);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn zero_samples_is_vacuous() {
        let k = KernelSpec::rain(0.5, 1.0, 1e-9);
        assert!(check_structural_assumptions(&k, 0, 1).violations.is_empty());
    }

    #[test]
    fn rain_kernel_k0_fit_is_admissible() {
        let gamma = 0.5 + 2.0 / 3.0;
        let probe = KernelSpec::rain(0.5, gamma, 1.0);
        let k0 = fit_k0(&probe, 20_000, 3);
        assert!(k0 > 0.0 && k0 <= 4.0);
        let fitted = KernelSpec::rain(0.5, gamma, k0);
        let report = check_structural_assumptions(&fitted, 20_000, 3);
        assert!(report.violations.iter().all(|v| v.assumption != Assumption::MonotoneDifference));
        let too_small = KernelSpec::rain(0.5, gamma, 0.5 * k0);
        assert!(!check_structural_assumptions(&too_small, 20_000, 3).violations.is_empty());
    }

    fn any_kernel() -> impl Strategy<Value = KernelSpec> {
        prop_oneof![
            (1.0f64..2.0).prop_map(KernelSpec::sum),
            (0.1f64..0.9).prop_map(|a| KernelSpec::rain(a, a + 2.0 / 3.0, 2.0)),
            (1.0f64..2.0, 0.1f64..5.0).prop_map(|(g, f)| KernelSpec::sum(g).scaled(f)),
            (1.0f64..2.0, 0.5f64..50.0).prop_map(|(g, n)| truncate(&KernelSpec::sum(g), n).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn symmetric_and_nonnegative(k in any_kernel(), v in 1e-3f64..1e3, w in 1e-3f64..1e3) {
            let a = k.eval(v, w).unwrap();
            let b = k.eval(w, v).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn truncation_sandwich(g in 1.0f64..2.0, n in 0.5f64..50.0, v in 1e-3f64..60.0, w in 1e-3f64..60.0) {
            let k = KernelSpec::sum(g);
            let kn = truncate(&k, n).unwrap();
            let full = k.eval(v, w).unwrap();
            let cut = kn.eval(v, w).unwrap();
            prop_assert!(cut >= 0.0 && cut <= full);
            if v + w <= 0.5 * n {
                prop_assert_eq!(cut, full);
            }
        }
    }
}
