//! Picard iteration on the mild formulation
//!
//! ```text
//! H_{n+1}(t) = S(t)H_in · D[H_n](0,t)
//!            + ∫_0^t D[H_n](s,t) S(t−s)[Q(H_{n+1}(s), H_n(s))] ds
//! ```
//!
//! where `Q` is the asymmetric gain, `D[H](s,t)` the exponential of minus the
//! loss rate `a[H]` integrated along the backward characteristic, and `S` the
//! transport semigroup. Iterates live on a fixed time grid; the Duhamel
//! integral is marched forward so the implicit `H_{n+1}` under it is already
//! known at earlier times (left endpoint per interval). Inside each interval
//! the `s`-integral is taken with the midpoint rule in `σ = e^{−(t−s)/ε}`.

use rayon::prelude::*;
use serde::Serialize;

use crate::coagulation::CoagOperator;
use crate::grid_fields::{init_value, Field2D, Grid2D, Params};
use crate::kernels::{truncate, KernelSpec};
use crate::{Error, Result};
use std::sync::Arc;

/// `a[H](y, v) = ∫ K(v, w) H(y, w) dw`, with `H` interpolated linearly in `y`.
pub fn rate_a(field: &Field2D, y: f64, v: f64, kernel: &KernelSpec) -> f64 {
    let g = &field.grid;
    (0..g.nv())
        .map(|k| g.wv[k] * kernel.eval_unchecked(v, g.v[k]) * field.interp_y(y, k))
        .sum()
}

/// `D[H](s,t)(y,v) = exp(−∫_s^t a[H](e^{(t−τ)/ε}(y−v^α)+v^α, v) dτ)` for a
/// field frozen in time.
pub fn damping_d(field: &Field2D, y: f64, v: f64, s: f64, t: f64, kernel: &KernelSpec, params: &Params) -> Result<f64> {
    if !(0.0 <= s && s <= t) {
        return Err(Error::domain(format!("damping needs 0 <= s <= t, got s = {s}, t = {t}")));
    }
    if s == t {
        return Ok(1.0);
    }
    let c = params.curve(v);
    let eps = params.epsilon;
    let integrand = |tau: f64| rate_a(field, c + ((t - tau) / eps).exp() * (y - c), v, kernel);
    let out = quadrature::integrate(integrand, s, t, 1e-12);
    Ok((-out.integral).exp())
}

/// Time grid, interval subdivision and kernel for the iteration.
#[derive(Debug, Clone)]
pub struct PicardProblem {
    pub params: Params,
    pub grid: Arc<Grid2D>,
    pub kernel: KernelSpec,
    pub times: Vec<f64>,
    /// Midpoint nodes per time interval in the `σ` variable.
    pub substeps: usize,
}

impl PicardProblem {
    /// Uniform time grid on `[0, horizon]`; the kernel is truncated at `v_max`.
    pub fn new(params: Params, grid: Arc<Grid2D>, kernel: &KernelSpec, horizon: f64, intervals: usize, substeps: usize) -> Result<Self> {
        if !(horizon > 0.0) || intervals == 0 || substeps == 0 {
            return Err(Error::domain("need horizon > 0 and at least one interval and substep"));
        }
        let kernel = truncate(kernel, grid.v_max())?;
        let times = (0..=intervals).map(|k| horizon * k as f64 / intervals as f64).collect();
        Ok(PicardProblem {
            params,
            grid,
            kernel,
            times,
            substeps,
        })
    }

    /// `S(t) H_in` for the saturating initial profile, evaluated without interpolation.
    pub fn free_term(&self, t: f64) -> Field2D {
        let g = &self.grid;
        let p = &self.params;
        let e = (t / p.epsilon).exp();
        let mut f = Field2D::zeros(g.clone(), t);
        for (i, &y) in g.y.iter().enumerate() {
            for (j, &v) in g.v.iter().enumerate() {
                let c = p.curve(v);
                f.values[g.idx(i, j)] = e * init_value(c + e * (y - c), v, p);
            }
        }
        f
    }

    /// The zeroth iterate `H_0(t) = S(t) H_in`.
    pub fn zeroth_iterate(&self) -> Vec<Field2D> {
        self.times.iter().map(|&t| self.free_term(t)).collect()
    }
}

/// Loss-rate snapshots with linear interpolation in time and `y`.
struct RateHistory<'a> {
    times: &'a [f64],
    a: Vec<Vec<f64>>,
    grid: &'a Grid2D,
}

impl RateHistory<'_> {
    fn at(&self, y: f64, j: usize, tau: f64) -> f64 {
        let Some((i, th)) = self.grid.locate_y(y) else {
            return 0.0;
        };
        let n = self.times.len();
        let l = self.times.partition_point(|&t| t <= tau).clamp(1, n - 1) - 1;
        let w = ((tau - self.times[l]) / (self.times[l + 1] - self.times[l])).clamp(0.0, 1.0);
        let g = self.grid;
        let row = |a: &[f64]| (1.0 - th) * a[g.idx(i, j)] + th * a[g.idx(i + 1, j)];
        (1.0 - w) * row(&self.a[l]) + w * row(&self.a[l + 1])
    }
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.len() < 2 || times.windows(2).any(|w| !(w[1] > w[0])) || times[0] != 0.0 {
        return Err(Error::domain("time grid must start at 0 and be strictly increasing"));
    }
    Ok(())
}

/// One Picard map `H_n ↦ H_{n+1}` over the whole time grid.
pub fn picard_step(prev: &[Field2D], problem: &PicardProblem) -> Result<Vec<Field2D>> {
    let times = &problem.times;
    check_times(times)?;
    if prev.len() != times.len() {
        return Err(Error::domain("previous iterate must be given at every grid time"));
    }
    let g = problem.grid.clone();
    let p = &problem.params;
    let eps = p.epsilon;
    let (ny, nv) = (g.ny(), g.nv());
    let op = CoagOperator::new(&g, &problem.kernel);
    let rates = RateHistory {
        times,
        a: prev.iter().map(|h| op.rate_a(h)).collect(),
        grid: &g,
    };
    let curves: Vec<f64> = g.v.iter().map(|&v| p.curve(v)).collect();
    let nsub = problem.substeps;

    let mut next: Vec<Field2D> = Vec::with_capacity(times.len());
    let mut gains: Vec<Field2D> = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let free = problem.free_term(t);
        let mut out = Field2D::zeros(g.clone(), t);
        out.values.par_chunks_mut(nv).enumerate().for_each(|(i, row)| {
            let y = g.y[i];
            for j in 0..nv {
                let c = curves[j];
                let char_at = |sigma: f64| c + (y - c) / sigma;
                let tau_at = |sigma: f64| t + eps * sigma.ln();
                // Cumulative ∫_τ^t a dτ', built backwards from τ = t.
                let mut cum = 0.0;
                let mut sigma_hi = 1.0;
                let mut a_hi = rates.at(y, j, t);
                let mut duhamel = 0.0;
                for l in (0..k).rev() {
                    let sigma_lo = (-(t - times[l]) / eps).exp();
                    let h = (sigma_hi - sigma_lo) / nsub as f64;
                    let gain = &gains[l];
                    for q in (0..nsub).rev() {
                        let s_top = sigma_lo + (q + 1) as f64 * h;
                        let s_mid = s_top - 0.5 * h;
                        let s_bot = s_top - h;
                        let a_mid = rates.at(char_at(s_mid), j, tau_at(s_mid));
                        let a_bot = rates.at(char_at(s_bot), j, tau_at(s_bot));
                        let cum_mid = cum + 0.5 * (a_hi + a_mid) * eps * (s_top / s_mid).ln();
                        cum = cum_mid + 0.5 * (a_mid + a_bot) * eps * (s_mid / s_bot).ln();
                        a_hi = a_bot;
                        let src = gain.interp_y(char_at(s_mid), j);
                        if src > 0.0 {
                            duhamel += eps * h / (s_mid * s_mid) * (-cum_mid).exp() * src;
                        }
                    }
                    sigma_hi = sigma_lo;
                }
                row[j] = free.values[g.idx(i, j)] * (-cum).exp() + duhamel;
            }
        });
        let rates_k = op.apply(&out, &prev[k])?;
        gains.push(Field2D {
            grid: g.clone(),
            values: rates_k.gain,
            t,
        });
        next.push(out);
    }
    debug_assert_eq!(next.len(), times.len());
    debug_assert!(next.iter().all(|f| f.values.len() == ny * nv));
    Ok(next)
}

fn sup_residual(a: &[Field2D], b: &[Field2D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.sup_diff(y)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PicardStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct PicardState {
    pub times: Vec<f64>,
    /// `iterates[n][k]` is `H_n(t_k)`.
    pub iterates: Vec<Vec<Field2D>>,
    /// `residuals[n] = sup |H_{n+1} − H_n|` over all nodes and times.
    pub residuals: Vec<f64>,
    pub status: PicardStatus,
}

impl PicardState {
    pub fn last(&self) -> &[Field2D] {
        self.iterates.last().expect("at least the zeroth iterate")
    }

    /// Successive residual ratios `R_{n+1} / R_n`.
    pub fn ratios(&self) -> Vec<f64> {
        self.residuals.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// Iterates until the sup residual drops below `tol` or `max_iter` maps were applied.
pub fn picard_solve(problem: &PicardProblem, tol: f64, max_iter: usize) -> Result<PicardState> {
    check_times(&problem.times)?;
    let mut state = PicardState {
        times: problem.times.clone(),
        iterates: vec![problem.zeroth_iterate()],
        residuals: Vec::new(),
        status: PicardStatus::MaxIterations,
    };
    for n in 0..max_iter {
        let next = picard_step(state.last(), problem)?;
        let r = sup_residual(&next, state.last());
        log::debug!("picard iteration {}: residual {r:e}", n + 1);
        state.residuals.push(r);
        state.iterates.push(next);
        if r < tol {
            state.status = PicardStatus::Converged;
            break;
        }
    }
    Ok(state)
}

/// `sup |Φ[H] − H|` for a candidate solution: the mild equation residual.
pub fn mild_residual(solution: &[Field2D], problem: &PicardProblem) -> Result<f64> {
    let image = picard_step(solution, problem)?;
    Ok(sup_residual(&image, solution))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_fields::{derived_constants, init_field, moment_k, ModelInputs, ParamMode};
    use approx::assert_relative_eq;

    fn params() -> Params {
        derived_constants(
            ModelInputs {
                epsilon: 0.1,
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

    fn grid() -> Arc<Grid2D> {
        Arc::new(Grid2D::new(-4.0, 4.0, 33, 2f64.powi(-3), 4, 25).unwrap())
    }

    #[test]
    fn rate_a_matches_moments_for_sum_kernel() {
        let p = params();
        let f = init_field(grid(), &p);
        let gamma = 1.2;
        for &(y, v) in &[(0.3, 0.5), (1.0, 1.0), (-2.0, 3.0)] {
            let m0 = moment_k(&f, 0.0, y).unwrap();
            let mg = moment_k(&f, gamma, y).unwrap();
            assert_relative_eq!(rate_a(&f, y, v, &KernelSpec::sum(gamma)), v.powf(gamma) * m0 + mg, max_relative = 1e-12);
        }
        let zero = Field2D::zeros(grid(), 0.0);
        assert_eq!(rate_a(&zero, 0.0, 1.0, &KernelSpec::sum(gamma)), 0.0);
    }

    #[test]
    fn damping_basic_properties() {
        let p = params();
        let f = init_field(grid(), &p);
        let k = KernelSpec::sum(1.2);
        let (y, v, t) = (0.8, 1.5, 0.2);
        assert_eq!(damping_d(&f, y, v, t, t, &k, &p).unwrap(), 1.0);
        let zero = Field2D::zeros(grid(), 0.0);
        assert_eq!(damping_d(&zero, y, v, 0.0, t, &k, &p).unwrap(), 1.0);
        let ds: Vec<f64> = [0.0, 0.05, 0.1, 0.15].iter().map(|&s| damping_d(&f, y, v, s, t, &k, &p).unwrap()).collect();
        assert!(ds.windows(2).all(|w| w[0] < w[1] && w[1] <= 1.0 && w[0] > 0.0));
        assert!(damping_d(&f, y, v, 0.3, t, &k, &p).is_err());
    }

    #[test]
    fn damping_is_multiplicative_along_a_characteristic() {
        let p = params();
        let f = init_field(grid(), &p);
        let k = KernelSpec::sum(1.2);
        let (y, v, s, u, t) = (0.9, 1.2, 0.0, 0.07, 0.2);
        // The point at time u on the characteristic through (y, t).
        let c = p.curve(v);
        let yu = c + ((t - u) / p.epsilon).exp() * (y - c);
        let whole = damping_d(&f, y, v, s, t, &k, &p).unwrap();
        let split = damping_d(&f, yu, v, s, u, &k, &p).unwrap() * damping_d(&f, y, v, u, t, &k, &p).unwrap();
        assert_relative_eq!(whole, split, max_relative = 1e-6);
    }

    #[test]
    fn zero_kernel_reproduces_free_transport() {
        let p = params();
        let prob = PicardProblem::new(p, grid(), &KernelSpec::sum(1.2).scaled(0.0), 0.1, 4, 2).unwrap();
        let h0 = prob.zeroth_iterate();
        let h1 = picard_step(&h0, &prob).unwrap();
        for (a, b) in h1.iter().zip(&h0) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn bad_time_grid_is_rejected() {
        let p = params();
        let mut prob = PicardProblem::new(p, grid(), &KernelSpec::sum(1.2), 0.1, 4, 2).unwrap();
        prob.times[2] = prob.times[1];
        assert!(picard_step(&prob.zeroth_iterate(), &prob).is_err());
    }

    #[test]
    fn iterates_are_nonnegative_and_contract() {
        let p = params();
        let prob = PicardProblem::new(p, grid(), &KernelSpec::sum(1.2), 0.05, 5, 3).unwrap();
        let st = picard_solve(&prob, 0.0, 6).unwrap();
        assert_eq!(st.status, PicardStatus::MaxIterations);
        assert!(st.iterates.iter().flatten().all(|f| f.values.iter().all(|h| *h >= 0.0)));
        assert!(st.ratios().iter().all(|r| *r < 0.6), "{:?}", st.residuals);
        let huge = picard_solve(&prob, f64::INFINITY, 10).unwrap();
        assert_eq!(huge.residuals.len(), 1);
        assert_eq!(huge.status, PicardStatus::Converged);
    }

    #[test]
    fn converged_solution_satisfies_the_mild_equation() {
        let p = params();
        let prob = PicardProblem::new(p, grid(), &KernelSpec::sum(1.2), 0.05, 5, 3).unwrap();
        let tol = 1e-10;
        let st = picard_solve(&prob, tol, 40).unwrap();
        assert_eq!(st.status, PicardStatus::Converged);
        assert!(mild_residual(st.last(), &prob).unwrap() < 10.0 * tol);
    }
}
