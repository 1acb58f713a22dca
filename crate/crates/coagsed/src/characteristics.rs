//! Characteristics of the supersolution equation
//!
//! ```text
//! Y' = (Y − V^α)/ε,    V' = −L V^γ ξ(V) / (1 + |Y|^d)
//! ```
//!
//! together with the variational pair `(∂_vY, ∂_vV)`. The stiff affine part
//! is removed exactly: the integrated state is
//! `(Ũ, V, q̃, r) = (e^{−t/ε}(Y − V^α), V, e^{−t/ε}(∂_vY − αV^{α−1}∂_vV), ∂_vV)`,
//! whose right-hand side carries no `1/ε` growth. With `L = 0` the scaled
//! components are constant and the solution is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::grid_fields::Params;
use crate::{Error, Result};

/// Cubic smoothstep: 0 on `[0, ½]`, 1 on `[1, ∞)`.
pub fn xi(v: f64) -> f64 {
    let s = (2.0 * v - 1.0).clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

pub fn xi_prime(v: f64) -> f64 {
    let s = 2.0 * v - 1.0;
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        12.0 * s * (1.0 - s)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CharParams {
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub l: f64,
    pub d: u32,
}

impl From<&Params> for CharParams {
    fn from(p: &Params) -> Self {
        CharParams {
            epsilon: p.epsilon,
            alpha: p.alpha,
            gamma: p.gamma,
            l: p.l,
            d: p.d,
        }
    }
}

/// `1 / (1 + |Y|^d)` and `d/dY` of it, without overflow for large `|Y|`.
fn damping_and_slope(y: f64, d: u32) -> (f64, f64) {
    let d_i = d as i32;
    let ay = y.abs();
    if d == 0 {
        return (0.5, 0.0);
    }
    if ay <= 1.0 {
        let p = ay.powi(d_i);
        let den = 1.0 + p;
        let slope = if d_i >= 1 { -(d as f64) * y.signum() * ay.powi(d_i - 1) / (den * den) } else { 0.0 };
        (1.0 / den, slope)
    } else {
        let inv = ay.powi(-d_i);
        let den = 1.0 + inv;
        (inv / den, -(d as f64) * y.signum() * ay.powi(-d_i - 1) / (den * den))
    }
}

#[derive(Debug, Clone, Copy)]
struct System {
    p: CharParams,
}

const DIM: usize = 4;

impl System {
    fn big_y(&self, t: f64, s: &[f64; DIM]) -> f64 {
        let e = (t / self.p.epsilon).exp();
        if s[0] == 0.0 {
            s[1].powf(self.p.alpha)
        } else {
            s[1].powf(self.p.alpha) + e * s[0]
        }
    }

    fn rhs(&self, t: f64, s: &[f64; DIM]) -> [f64; DIM] {
        let CharParams { epsilon, alpha, gamma, l, d } = self.p;
        let (v, q, r) = (s[1], s[2], s[3]);
        let e = (t / epsilon).exp();
        let em = (-t / epsilon).exp();
        let y = self.big_y(t, s);
        let (damp, slope) = damping_and_slope(y, d);
        let vg = v.powf(gamma);
        let x = xi(v);
        let f = -l * vg * x * damp;
        let f_v = -l * (gamma * v.powf(gamma - 1.0) * x + vg * xi_prime(v)) * damp;
        let f_y = -l * vg * x * slope;
        let va1 = alpha * v.powf(alpha - 1.0);
        // ∂_vY = αV^{α−1} r + e^{t/ε} q̃; f_Y ∂_vY is finite even when e^{t/ε} q̃ is huge.
        let fy_p = if f_y == 0.0 { 0.0 } else { f_y * va1 * r + f_y * e * q };
        let r_dot = f_v * r + fy_p;
        let u_dot = -em * va1 * f;
        let q_dot = -em * (alpha * (alpha - 1.0) * v.powf(alpha - 2.0) * f * r + va1 * r_dot);
        [u_dot, f, q_dot, r_dot]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CharPath {
    pub y0: f64,
    pub v0: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub times: Vec<f64>,
    /// `Y(t)`; may be `±∞` once `e^{t/ε}` overflows.
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub dvy: Vec<f64>,
    pub dvv: Vec<f64>,
    /// `e^{−t/ε}(Y − V^α)`.
    pub u_scaled: Vec<f64>,
    /// `e^{−t/ε}(∂_vY − αV^{α−1}∂_vV)`.
    pub q_scaled: Vec<f64>,
}

impl CharPath {
    fn push(&mut self, sys: &System, t: f64, s: &[f64; DIM]) {
        let e = (t / self.epsilon).exp();
        let va1 = self.alpha * s[1].powf(self.alpha - 1.0);
        self.times.push(t);
        self.y.push(sys.big_y(t, s));
        self.v.push(s[1]);
        self.dvy.push(va1 * s[3] + if s[2] == 0.0 { 0.0 } else { e * s[2] });
        self.dvv.push(s[3]);
        self.u_scaled.push(s[0]);
        self.q_scaled.push(s[2]);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { rtol: 1e-10, atol: 1e-12 }
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn dp45_step(sys: &System, t: f64, s: &[f64; DIM], h: f64) -> ([f64; DIM], [f64; DIM]) {
    let mut k = [[0.0; DIM]; 7];
    k[0] = sys.rhs(t, s);
    for i in 1..7 {
        let mut st = *s;
        for (j, kj) in k.iter().enumerate().take(i) {
            for n in 0..DIM {
                st[n] += h * A[i][j] * kj[n];
            }
        }
        k[i] = sys.rhs(t + C[i] * h, &st);
    }
    let mut y5 = *s;
    let mut err = [0.0; DIM];
    for n in 0..DIM {
        for i in 0..7 {
            y5[n] += h * B5[i] * k[i][n];
            err[n] += h * (B5[i] - B4[i]) * k[i][n];
        }
    }
    (y5, err)
}

/// Adaptive integration from `(y0, v0)` at `t = 0` to `t_end`.
pub fn integrate_char(y0: f64, v0: f64, t_end: f64, p: CharParams, tol: Tolerance) -> Result<CharPath> {
    if !(v0 > 0.0) {
        return Err(Error::domain(format!("initial volume must be positive, got {v0}")));
    }
    if !(t_end >= 0.0) {
        return Err(Error::domain("t_end must be nonnegative"));
    }
    let sys = System { p };
    let mut s = [y0 - v0.powf(p.alpha), v0, -p.alpha * v0.powf(p.alpha - 1.0), 1.0];
    let mut path = CharPath {
        y0,
        v0,
        epsilon: p.epsilon,
        alpha: p.alpha,
        times: Vec::new(),
        y: Vec::new(),
        v: Vec::new(),
        dvy: Vec::new(),
        dvv: Vec::new(),
        u_scaled: Vec::new(),
        q_scaled: Vec::new(),
    };
    let mut t = 0.0;
    path.push(&sys, t, &s);
    let mut h = (1e-3 * p.epsilon).min(t_end);
    while t < t_end {
        h = h.min(t_end - t);
        if h <= 1e-15 * t_end.max(1.0) {
            return Err(Error::Stiffness { t0: t, t1: t + h });
        }
        let (next, err_vec) = dp45_step(&sys, t, &s, h);
        let err = (0..DIM)
            .map(|n| err_vec[n].abs() / (tol.atol + tol.rtol * s[n].abs().max(next[n].abs())))
            .fold(0.0_f64, f64::max);
        if err <= 1.0 && next.iter().all(|x| x.is_finite()) {
            t = if t_end - (t + h) < 1e-15 * t_end { t_end } else { t + h };
            s = next;
            path.push(&sys, t, &s);
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h *= if next.iter().all(|x| x.is_finite()) { factor } else { 0.2 };
    }
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Hash, PartialOrd, Ord)]
pub enum Bound {
    /// `0.9 v0 ≤ V ≤ v0`.
    VolumeWindow,
    /// `Y ≤ (v0/3)^α`.
    BelowThird,
    /// `e^{t/ε}(y0 − v0^α) ≤ Y − V^α ≤ e^{t/ε}(y0 − 0.9^α v0^α)`.
    CurveGap,
    /// `Y − V^α ≤ (0.9^α − 3^{−α}) e^{t/ε}(y0 − v0^α)`.
    CombinedGap,
    /// `½ ≤ ∂_vV ≤ 1`.
    DvV,
    /// `(10/9)^{1−α} α v0^{α−1}(1 − e^{t/ε}) ≤ ∂_vY ≤ ½ α v0^{α−1}(1 − e^{t/ε})`.
    DvY,
    /// `½ α v0^{α−1} e^{t/ε} ≤ αV^{α−1}∂_vV − ∂_vY ≤ (10/9)^{1−α} α v0^{α−1} e^{t/ε}`.
    DvGap,
}

pub const ALL_BOUNDS: [Bound; 7] = [
    Bound::VolumeWindow,
    Bound::BelowThird,
    Bound::CurveGap,
    Bound::CombinedGap,
    Bound::DvV,
    Bound::DvY,
    Bound::DvGap,
];

#[derive(Debug, Clone, Serialize)]
pub struct BoundViolation {
    pub bound: Bound,
    pub t: f64,
    /// Relative excess beyond the bound.
    pub excess: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Prop44Report {
    pub checked_times: usize,
    pub violations: Vec<BoundViolation>,
    /// Largest relative excess per bound (negative when strictly satisfied).
    pub worst: Vec<(Bound, f64)>,
}

fn excess(lo: f64, x: f64, hi: f64) -> f64 {
    let scale = lo.abs().max(hi.abs()).max(x.abs()).max(1e-300);
    ((lo - x).max(x - hi)) / scale
}

/// Checks the characteristic bounds and derivative sandwiches at every stored
/// time. Every comparison is made on the `e^{−t/ε}`-scaled quantities, so the
/// check is meaningful after `e^{t/ε}` overflows.
pub fn check_prop44(path: &CharPath, tol: f64) -> Prop44Report {
    let (a, v0, y0) = (path.alpha, path.v0, path.y0);
    let c9 = 0.9f64.powf(a);
    let c3 = 3f64.powf(-a);
    let k = (10.0f64 / 9.0).powf(1.0 - a);
    let va = v0.powf(a);
    let va1 = a * v0.powf(a - 1.0);
    let mut worst = std::collections::BTreeMap::new();
    let mut report = Prop44Report::default();
    for n in 0..path.len() {
        let t = path.times[n];
        let em = (-t / path.epsilon).exp();
        let (u, v, q, r) = (path.u_scaled[n], path.v[n], path.q_scaled[n], path.dvv[n]);
        let y = path.y[n];
        let dvy_scaled = em * a * v.powf(a - 1.0) * r + q;
        let gap = y0 - va;
        let checks = [
            (Bound::VolumeWindow, excess(0.9 * v0, v, v0)),
            (Bound::BelowThird, excess(f64::NEG_INFINITY, y, (v0 / 3.0).powf(a)).max(if y.is_finite() { f64::NEG_INFINITY } else if y > 0.0 { 1.0 } else { -1.0 })),
            (Bound::CurveGap, excess(gap, u, y0 - c9 * va)),
            (Bound::CombinedGap, excess(f64::NEG_INFINITY, u, (c9 - c3) * gap)),
            (Bound::DvV, excess(0.5, r, 1.0)),
            (Bound::DvY, excess(k * va1 * (em - 1.0), dvy_scaled, 0.5 * va1 * (em - 1.0))),
            (Bound::DvGap, excess(0.5 * va1, -q, k * va1)),
        ];
        for (b, x) in checks {
            let x = if x.is_nan() { f64::INFINITY } else { x };
            let w = worst.entry(b).or_insert(f64::NEG_INFINITY);
            *w = f64::max(*w, x);
            if x > tol {
                report.violations.push(BoundViolation { bound: b, t, excess: x });
            }
        }
        report.checked_times += 1;
    }
    report.worst = worst.into_iter().collect();
    report
}

/// Central-difference check of the variational pair at `t_end`: returns the
/// largest relative mismatch of `∂_vV` and of `∂_v Ũ = q̃`.
pub fn variational_fd_error(y0: f64, v0: f64, t_end: f64, p: CharParams, tol: Tolerance, h: f64) -> Result<f64> {
    let mid = integrate_char(y0, v0, t_end, p, tol)?;
    let plus = integrate_char(y0, v0 + h, t_end, p, tol)?;
    let minus = integrate_char(y0, v0 - h, t_end, p, tol)?;
    let last = |c: &CharPath, f: fn(&CharPath) -> &Vec<f64>| *f(c).last().expect("nonempty path");
    let fd_r = (last(&plus, |c| &c.v) - last(&minus, |c| &c.v)) / (2.0 * h);
    let fd_q = (last(&plus, |c| &c.u_scaled) - last(&minus, |c| &c.u_scaled)) / (2.0 * h);
    let r = last(&mid, |c| &c.dvv);
    let q = last(&mid, |c| &c.q_scaled);
    let rel = |fd: f64, exact: f64| (fd - exact).abs() / exact.abs().max(1e-12);
    Ok(rel(fd_r, r).max(rel(fd_q, q)))
}

/// `G = e^{K3 L t} A e^{t/ε} / ((1 + V^b)(1 + |Y − V^α|^m))`, in log form.
pub fn supersolution_g(y: f64, v: f64, t: f64, params: &Params, k3: f64) -> Result<f64> {
    let path = integrate_char(y, v, t, params.into(), Tolerance::default())?;
    let u = *path.u_scaled.last().unwrap();
    let vt = *path.v.last().unwrap();
    let te = t / params.epsilon;
    let m = params.m as f64;
    let log_gap = if u == 0.0 { f64::NEG_INFINITY } else { m * (te + u.abs().ln()) };
    let softplus = |x: f64| if x > 30.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    let ln_g = k3 * params.l * t + params.a.ln() + te - (vt.powf(params.b)).ln_1p() - softplus(log_gap);
    Ok(ln_g.exp())
}

/// `M2`-free part of the far-field envelope: `A e^{t/ε} ψ(e^{t/ε}(y − v^α)) / (1 + v^b)`.
pub fn far_envelope(y: f64, v: f64, t: f64, params: &Params) -> f64 {
    let te = t / params.epsilon;
    let d = (y - params.curve(v)).abs();
    let m = params.m as f64;
    let log_gap = if d == 0.0 { f64::NEG_INFINITY } else { m * (te + d.ln()) };
    let softplus = |x: f64| if x > 30.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    (params.a.ln() + te - (v.powf(params.b)).ln_1p() - softplus(log_gap)).exp()
}

#[derive(Debug, Clone, Serialize)]
pub struct DominationReport {
    pub k3: f64,
    pub window: f64,
    pub max_ratio: f64,
    pub passes: bool,
}

/// Largest `G / far_envelope` over sample starts and times in `[0, 1/(K3 L)]`,
/// compared with `M2`.
pub fn t3_domination(params: &Params, k3: f64, starts: &[(f64, f64)], time_samples: usize) -> Result<DominationReport> {
    let window = if params.l == 0.0 { 1.0 } else { 1.0 / (k3 * params.l) };
    let ratios: Vec<f64> = starts
        .par_iter()
        .map(|&(y, v)| {
            let mut worst: f64 = 0.0;
            for k in 1..=time_samples {
                let t = window * k as f64 / time_samples as f64;
                let g = supersolution_g(y, v, t, params, k3)?;
                worst = worst.max(g / far_envelope(y, v, t, params));
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    let max_ratio = ratios.into_iter().fold(0.0, f64::max);
    Ok(DominationReport {
        k3,
        window,
        max_ratio,
        passes: max_ratio <= params.m2,
    })
}

/// Smallest `K3` on the ladder for which `t3_domination` passes.
pub fn fit_k3(params: &Params, ladder: &[f64], starts: &[(f64, f64)], time_samples: usize) -> Result<Option<DominationReport>> {
    let mut sorted = ladder.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    for k3 in sorted {
        let rep = t3_domination(params, k3, starts, time_samples)?;
        if rep.passes {
            return Ok(Some(rep));
        }
    }
    Ok(None)
}

/// Random starts with `v0` log-uniform in `[v_lo, v_hi]` and
/// `y0` uniform in `[(v0/3)^α − depth, (v0/3)^α]`.
pub fn random_starts(count: usize, v_lo: f64, v_hi: f64, depth: f64, alpha: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v0 = rng.gen_range(v_lo.ln()..=v_hi.ln()).exp();
            let top = (v0 / 3.0).powf(alpha);
            (top - depth * rng.gen_range(0.0..=1.0), v0)
        })
        .collect()
}

/// Worst relative excess of each bound, in [`ALL_BOUNDS`] order, for one start.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub y0: f64,
    pub v0: f64,
    pub worst: [f64; 7],
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub starts: usize,
    pub t_end: f64,
    pub epsilon: f64,
    pub violations: usize,
    /// Largest relative excess per bound over the sweep.
    pub worst: Vec<(Bound, f64)>,
    pub max_fd_error: f64,
    pub rows: Vec<SweepRow>,
}

/// Integrates every start, checks all bounds and, on every `fd_every`-th
/// start, the variational derivatives against finite differences.
pub fn prop44_sweep(
    p: CharParams,
    starts: &[(f64, f64)],
    t_end: f64,
    tol: Tolerance,
    bound_tol: f64,
    fd_every: usize,
) -> Result<SweepReport> {
    let per: Vec<(Prop44Report, f64)> = starts
        .par_iter()
        .enumerate()
        .map(|(n, &(y0, v0))| {
            let path = integrate_char(y0, v0, t_end, p, tol)?;
            let rep = check_prop44(&path, bound_tol);
            let fd = if fd_every > 0 && n % fd_every == 0 {
                variational_fd_error(y0, v0, t_end, p, tol, 1e-4 * v0)?
            } else {
                0.0
            };
            Ok((rep, fd))
        })
        .collect::<Result<_>>()?;
    let mut worst = std::collections::BTreeMap::new();
    let mut rows = Vec::with_capacity(starts.len());
    let mut violations = 0;
    let mut max_fd: f64 = 0.0;
    for ((rep, fd), &(y0, v0)) in per.iter().zip(starts) {
        violations += rep.violations.len();
        max_fd = max_fd.max(*fd);
        let mut row = SweepRow { y0, v0, worst: [f64::NEG_INFINITY; 7] };
        for &(b, x) in &rep.worst {
            let w = worst.entry(b).or_insert(f64::NEG_INFINITY);
            *w = f64::max(*w, x);
            let k = ALL_BOUNDS.iter().position(|&c| c == b).expect("known bound");
            row.worst[k] = x;
        }
        rows.push(row);
    }
    Ok(SweepReport {
        starts: starts.len(),
        t_end,
        epsilon: p.epsilon,
        violations,
        worst: worst.into_iter().collect(),
        max_fd_error: max_fd,
        rows,
    })
}

/// Largest `ε` on the ladder whose sweep has no violations, scanning upward
/// from the smallest value and stopping at the first failure.
pub fn largest_clean_epsilon(
    p: CharParams,
    ladder: &[f64],
    starts: &[(f64, f64)],
    t_end: f64,
    tol: Tolerance,
    bound_tol: f64,
) -> Result<Option<f64>> {
    let mut sorted = ladder.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut best = None;
    for eps in sorted {
        let rep = prop44_sweep(CharParams { epsilon: eps, ..p }, starts, t_end, tol, bound_tol, 0)?;
        if rep.violations > 0 {
            break;
        }
        best = Some(eps);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_fields::{derived_constants, init_value, ModelInputs, ParamMode};
    use approx::assert_relative_eq;

    fn cp(epsilon: f64, l: f64) -> CharParams {
        CharParams {
            epsilon,
            alpha: 0.5,
            gamma: 1.2,
            l,
            d: 4,
        }
    }

    fn params() -> Params {
        derived_constants(
            ModelInputs {
                epsilon: 0.01,
                alpha: 0.5,
                gamma: 1.2,
                b: 4.0,
                m: 10,
                a: 1.0,
                m1: 16.0,
                m2: 4.0,
            },
            ParamMode::Theorem,
        )
        .unwrap()
    }

    #[test]
    fn cutoff_shape() {
        assert_eq!(xi(0.3), 0.0);
        assert_eq!(xi(0.5), 0.0);
        assert_eq!(xi(1.0), 1.0);
        assert_eq!(xi(7.0), 1.0);
        assert_relative_eq!(xi(0.75), 0.5);
        let h = 1e-6;
        assert_relative_eq!(xi_prime(0.8), (xi(0.8 + h) - xi(0.8 - h)) / (2.0 * h), max_relative = 1e-8);
    }

    #[test]
    fn zero_drift_is_exact() {
        let (y0, v0, eps) = (-0.4, 2.0, 0.05);
        let path = integrate_char(y0, v0, 0.5, cp(eps, 0.0), Tolerance::default()).unwrap();
        let c = v0.powf(0.5);
        for n in 0..path.len() {
            assert_eq!(path.v[n], v0);
            assert_eq!(path.dvv[n], 1.0);
            let expected = (path.times[n] / eps).exp() * (y0 - c);
            assert_relative_eq!(path.y[n] - c, expected, max_relative = 1e-12);
        }
        assert!(check_prop44(&path, 1e-9).violations.is_empty());
    }

    #[test]
    fn small_volumes_do_not_move() {
        let path = integrate_char(0.1, 0.4, 1.0, cp(0.01, 1.0), Tolerance::default()).unwrap();
        assert!(path.v.iter().all(|&v| v == 0.4));
    }

    #[test]
    fn volume_stays_above_nine_tenths() {
        let path = integrate_char(0.0, 2.0, 1.0, cp(0.01, 1.0), Tolerance::default()).unwrap();
        assert!(*path.v.last().unwrap() >= 0.9 * 2.0);
        assert!(path.v.windows(2).all(|w| w[1] <= w[0]));
        let rep = check_prop44(&path, 1e-6);
        assert!(rep.violations.is_empty(), "{:?}", rep.violations.first());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for &(y0, v0) in &[(0.0, 2.0), (-1.0, 5.0), (0.5, 9.0)] {
            let err = variational_fd_error(y0, v0, 1.0, cp(0.01, 1.0), Tolerance { rtol: 1e-12, atol: 1e-14 }, 1e-4 * v0).unwrap();
            assert!(err < 1e-4, "({y0}, {v0}): {err}");
        }
    }

    #[test]
    fn halving_tolerance_moves_endpoint_little() {
        let (y0, v0) = (0.2, 3.0);
        let tol = Tolerance { rtol: 1e-8, atol: 1e-10 };
        let a = integrate_char(y0, v0, 1.0, cp(0.01, 1.0), tol).unwrap();
        let b = integrate_char(y0, v0, 1.0, cp(0.01, 1.0), Tolerance { rtol: 0.5e-8, atol: 0.5e-10 }).unwrap();
        let dv = (a.v.last().unwrap() - b.v.last().unwrap()).abs();
        let du = (a.u_scaled.last().unwrap() - b.u_scaled.last().unwrap()).abs();
        assert!(dv < 10.0 * tol.rtol * v0 && du < 10.0 * tol.rtol * 2.0);
    }

    #[test]
    fn supersolution_starts_at_initial_envelope() {
        let p = params();
        for &(y, v) in &[(0.0, 2.0), (-1.0, 4.0)] {
            assert_relative_eq!(supersolution_g(y, v, 0.0, &p, 1.0).unwrap(), init_value(y, v, &p), max_relative = 1e-12);
        }
    }

    #[test]
    fn supersolution_decreases_in_volume() {
        let p = params();
        let (y, t) = (-0.5, 0.05);
        for v in [1.5, 3.0, 6.0] {
            let h = 1e-4 * v;
            let dg = supersolution_g(y, v + h, t, &p, 1.0).unwrap() - supersolution_g(y, v - h, t, &p, 1.0).unwrap();
            assert!(dg <= 0.0);
        }
    }

    #[test]
    fn far_envelope_matches_direct_formula() {
        let p = params();
        let (y, v, t) = (-0.3, 2.0, 0.02);
        let e = (t / p.epsilon).exp();
        let direct = p.a * e * p.psi(e * (y - p.curve(v))) / (1.0 + v.powf(p.b));
        assert_relative_eq!(far_envelope(y, v, t, &p), direct, max_relative = 1e-12);
    }

    #[test]
    fn small_sweep_is_clean() {
        let starts = random_starts(64, 1.0, 10.0, 5.0, 0.5, 11);
        let rep = prop44_sweep(cp(0.01, 1.0), &starts, 1.0, Tolerance::default(), 1e-6, 8).unwrap();
        assert_eq!(rep.violations, 0, "{:?}", rep.worst);
        assert!(rep.max_fd_error < 1e-4);
    }
}
