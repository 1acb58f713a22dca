//! The exact transport semigroup
//!
//! ```text
//! S_ε(s) H (y, v) = e^{s/ε} H(e^{s/ε}(y − v^α) + v^α, v)
//! ```
//!
//! and the time-integrated action of `S_ε` on `ψ(y − v^α)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::grid_fields::{Field2D, Params};

/// Largest exponent for which `exp` stays finite.
const EXP_LIMIT: f64 = 700.0;

/// Applies `S_ε(s)` with linear interpolation in `y` and zero outside the grid.
pub fn semigroup_apply(field: &Field2D, s: f64, params: &Params) -> Field2D {
    assert!(s >= 0.0, "semigroup time must be nonnegative");
    if s == 0.0 {
        return field.clone();
    }
    let g = field.grid.clone();
    let k = s / params.epsilon;
    let nv = g.nv();
    let curves: Vec<f64> = g.v.iter().map(|&v| params.curve(v)).collect();
    let (y_lo, y_hi) = (g.y_min(), g.y_max());
    let mut out = Field2D::zeros(g.clone(), field.t + s);
    out.values
        .par_chunks_mut(nv)
        .enumerate()
        .for_each(|(i, row)| {
            let y = g.y[i];
            for j in 0..nv {
                let c = curves[j];
                let d = y - c;
                let src = if d == 0.0 {
                    c
                } else {
                    let reach = (y_hi - c).abs().max((y_lo - c).abs());
                    if d.abs().ln() + k > reach.ln() {
                        row[j] = 0.0;
                        continue;
                    }
                    if k < EXP_LIMIT {
                        c + d * k.exp()
                    } else {
                        c + d.signum() * (k + d.abs().ln()).exp()
                    }
                };
                let h = field.interp_y(src, j);
                row[j] = if h > 0.0 {
                    if k < EXP_LIMIT {
                        k.exp() * h
                    } else {
                        (k + h.ln()).exp()
                    }
                } else {
                    0.0
                };
            }
        });
    out
}

/// `∫_a^b du / (1 + u^m)` split at `u = 1`, with `u ↦ 1/u` on the outer part.
fn psi_antiderivative_span(a: f64, b: f64, m: i32) -> f64 {
    debug_assert!(0.0 <= a && a <= b);
    let mut total = 0.0;
    let inner_hi = b.min(1.0);
    if a < inner_hi {
        let f = |u: f64| 1.0 / (1.0 + u.powi(m));
        total += quadrature::integrate(f, a, inner_hi, 1e-15).integral;
    }
    let outer_lo = a.max(1.0);
    if outer_lo < b {
        let f = |s: f64| s.powi(m - 2) / (1.0 + s.powi(m));
        let lo = if b.is_finite() { 1.0 / b } else { 0.0 };
        total += quadrature::integrate(f, lo, 1.0 / outer_lo, 1e-15).integral;
    }
    total
}

/// `∫_0^t S_ε(t−s) ψ(y − v^α) ds`, via `z = e^{s/ε}|y − v^α|`.
pub fn semigroup_psi_integral(y: f64, v: f64, t: f64, params: &Params) -> f64 {
    assert!(t >= 0.0 && v > 0.0);
    let eps = params.epsilon;
    let d = (y - params.curve(v)).abs();
    if t == 0.0 {
        return 0.0;
    }
    if d == 0.0 {
        return eps * (t / eps).exp_m1();
    }
    let upper = if t / eps < EXP_LIMIT { d * (t / eps).exp() } else { f64::INFINITY };
    eps / d * psi_antiderivative_span(d, upper, params.m as i32)
}

/// Right-hand side of the decay estimate without its constant:
/// `ε/|y−v^α| · min{1, e^{t/ε}|y−v^α|} / (1 + |y−v^α|^{m−1})`.
pub fn psi_integral_bound(y: f64, v: f64, t: f64, params: &Params) -> f64 {
    let eps = params.epsilon;
    let d = (y - params.curve(v)).abs();
    let stretched = if t / eps < EXP_LIMIT { (t / eps).exp() * d } else { f64::INFINITY };
    eps / d * stretched.min(1.0) / (1.0 + d.powi(params.m as i32 - 1))
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderViolation {
    pub i: usize,
    pub j: usize,
    pub excess: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MonotoneReport {
    pub checked: usize,
    pub violations: Vec<OrderViolation>,
}

/// Checks `S(s)f ≥ S(s)g` on `{y ≥ y1}` for columns with `v^α ≤ y1`, and
/// `S(s)f ≤ S(s)g` on `{y ≤ y2}` for columns with `v^α ≥ y2`.
pub fn monotone_semigroup_check(
    f: &Field2D,
    g: &Field2D,
    y1: f64,
    y2: f64,
    s: f64,
    params: &Params,
    tol: f64,
) -> MonotoneReport {
    let sf = semigroup_apply(f, s, params);
    let sg = semigroup_apply(g, s, params);
    let grid = &f.grid;
    let mut report = MonotoneReport::default();
    for (j, &v) in grid.v.iter().enumerate() {
        let c = params.curve(v);
        for (i, &y) in grid.y.iter().enumerate() {
            let diff = sf.at(i, j) - sg.at(i, j);
            let excess = if y >= y1 && c <= y1 {
                report.checked += 1;
                -diff
            } else if y <= y2 && c >= y2 {
                report.checked += 1;
                diff
            } else {
                continue;
            };
            if excess > tol {
                report.violations.push(OrderViolation { i, j, excess });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_fields::{derived_constants, init_field, Grid2D, ModelInputs, ParamMode};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn params(epsilon: f64) -> Params {
        derived_constants(
            ModelInputs {
                epsilon,
                alpha: 0.5,
                gamma: 1.2,
                b: 4.0,
                m: 6,
                a: 1.0,
                m1: 16.0,
                m2: 4.0,
            },
            ParamMode::Relaxed,
        )
        .unwrap()
    }

    fn grid(ny: usize) -> Arc<Grid2D> {
        Arc::new(Grid2D::default_box(0.5, ny, 2f64.powi(-4), 8, 65).unwrap())
    }

    #[test]
    fn zero_time_is_identity() {
        let p = params(0.05);
        let f = init_field(grid(101), &p);
        assert_eq!(semigroup_apply(&f, 0.0, &p).values, f.values);
    }

    #[test]
    fn row_mass_preserved() {
        let p = params(0.1);
        let g = grid(2001);
        let f = init_field(g.clone(), &p);
        let sf = semigroup_apply(&f, 0.05, &p);
        let m0 = f.y_marginal();
        let m1 = sf.y_marginal();
        for j in 0..g.nv() {
            assert_relative_eq!(m1[j], m0[j], max_relative = 1e-3);
        }
    }

    #[test]
    fn initial_profile_maps_to_stretched_profile() {
        let p = params(0.05);
        let g = grid(401);
        let f = init_field(g.clone(), &p);
        let t = 0.04;
        let sf = semigroup_apply(&f, t, &p);
        let e = (t / p.epsilon).exp();
        let mut worst: f64 = 0.0;
        for (i, &y) in g.y.iter().enumerate() {
            for (j, &v) in g.v.iter().enumerate() {
                let exact = p.a * e * p.psi(e * (y - p.curve(v))) / (1.0 + v.powf(p.b));
                worst = worst.max((sf.at(i, j) - exact).abs());
            }
        }
        assert!(worst < 2e-2, "max deviation {worst}");
    }

    #[test]
    fn huge_stretch_is_finite_off_curve() {
        let p = params(0.01);
        let f = init_field(grid(64), &p);
        let sf = semigroup_apply(&f, 10.0, &p);
        assert!(sf.values.iter().all(|h| h.is_finite() && *h >= 0.0));
    }

    #[test]
    fn psi_integral_trivial_cases() {
        let p = params(0.05);
        assert_eq!(semigroup_psi_integral(0.3, 1.0, 0.0, &p), 0.0);
        let t = 0.5;
        assert_relative_eq!(
            semigroup_psi_integral(1.0, 1.0, t, &p),
            p.epsilon * ((t / p.epsilon).exp() - 1.0),
            max_relative = 1e-14
        );
    }

    #[test]
    fn psi_integral_matches_direct_quadrature() {
        // Direct s-quadrature of e^{(t−s)/ε} ψ(e^{(t−s)/ε}(y − v^α)).
        let p = params(0.1);
        for &(y, t) in &[(1.5, 0.1), (0.2, 0.3), (3.0, 1.0), (1.0 + 1e-3, 0.5)] {
            let d = y - 1.0;
            let direct = quadrature::integrate(
                |s: f64| {
                    let e = ((t - s) / p.epsilon).exp();
                    e * p.psi(e * d)
                },
                0.0,
                t,
                1e-13,
            )
            .integral;
            assert_relative_eq!(semigroup_psi_integral(y, 1.0, t, &p), direct, max_relative = 1e-8);
        }
    }

    #[test]
    fn monotonicity_on_constructed_pairs() {
        let p = params(0.05);
        let g = grid(161);
        let base = init_field(g.clone(), &p);
        assert!(monotone_semigroup_check(&base, &base, 1.0, 0.5, 0.03, &p, 0.0)
            .violations
            .is_empty());
        let y1 = p.curve(g.v_max()) + 1.0;
        let mut bumped = base.clone();
        for (i, &y) in g.y.iter().enumerate() {
            for j in 0..g.nv() {
                if y >= y1 {
                    bumped.values[g.idx(i, j)] += (-(y - y1 - 1.0).powi(2)).exp();
                }
            }
        }
        for s in [0.0, 0.01, 0.05] {
            let r = monotone_semigroup_check(&bumped, &base, y1, -1e9, s, &p, 1e-14);
            assert!(r.checked > 0 && r.violations.is_empty());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn semigroup_law(s1 in 0.0f64..0.03, s2 in 0.0f64..0.03) {
            let p = params(0.1);
            let g = grid(801);
            let f = init_field(g.clone(), &p);
            let composed = semigroup_apply(&semigroup_apply(&f, s1, &p), s2, &p);
            let direct = semigroup_apply(&f, s1 + s2, &p);
            prop_assert!(composed.sup_diff(&direct) < 5e-3);
        }

        #[test]
        fn fixed_curve_scales_by_exponential(s in 0.0f64..2.0) {
            let p = params(0.1);
            let g = Arc::new(Grid2D::new(-4.0, 4.0, 9, 1.0, 1, 3).unwrap());
            let f = init_field(g.clone(), &p);
            let sf = semigroup_apply(&f, s, &p);
            // v_0 = 1 has curve y = 1, which is node 5.
            prop_assert!((sf.at(5, 0) - (s / p.epsilon).exp() * f.at(5, 0)).abs() <= 1e-12 * sf.at(5, 0));
        }
    }
}
