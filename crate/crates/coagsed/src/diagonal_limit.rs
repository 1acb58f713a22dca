//! Limiting diagonal-kernel equation
//!
//! ```text
//! ∂_t G(v) = (2/α) [ ¼ (v/2)^{γ+1−α} G(v/2)² − v^{γ+1−α} G(v)² ]
//! ```
//!
//! on the geometric grid `v_min 2^{j/q}`, where `v/2` is the node `j − q`.
//! Mass is measured with weights `v_j ln 2^{1/q}`, the exact quadrature of
//! `∫ f dv = ∫ f v d(ln v)` for a grid uniform in `ln v`.

use log::warn;
use serde::Serialize;

use crate::grid_fields::{geometric_nodes, Field2D};
use crate::{Error, Result};

/// Treatment of the top `q` nodes, whose double is off the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Closure {
    /// No loss at those nodes: the discrete mass identity holds exactly.
    Closed,
    /// Full loss there; the mass leaving the grid is returned as outflux.
    Open,
}

#[derive(Debug, Clone, Serialize)]
pub struct Profile1D {
    pub v: Vec<f64>,
    pub q: usize,
    pub values: Vec<f64>,
    pub t: f64,
}

impl Profile1D {
    pub fn zeros(v_min: f64, q: usize, nv: usize) -> Self {
        Profile1D {
            v: geometric_nodes(v_min, q, nv),
            q,
            values: vec![0.0; nv],
            t: 0.0,
        }
    }

    /// Builds a profile on arbitrary nodes, checking that `v_j / 2 = v_{j−q}` exactly.
    pub fn from_nodes(v: Vec<f64>, q: usize, values: Vec<f64>, t: f64) -> Result<Self> {
        if v.len() != values.len() {
            return Err(Error::domain("node and value counts differ"));
        }
        if q == 0 {
            return Err(Error::domain("halving index q must be positive"));
        }
        for j in q..v.len() {
            if v[j] * 0.5 != v[j - q] {
                return Err(Error::domain(format!(
                    "grid lacks halving closure: v[{j}]/2 = {} but v[{}] = {}",
                    v[j] * 0.5,
                    j - q,
                    v[j - q]
                )));
            }
        }
        if values.iter().any(|&g| !(g >= 0.0)) {
            return Err(Error::domain("profile values must be nonnegative"));
        }
        Ok(Profile1D { v, q, values, t })
    }

    pub fn from_fn(v_min: f64, q: usize, nv: usize, mut f: impl FnMut(f64) -> f64) -> Self {
        let mut p = Profile1D::zeros(v_min, q, nv);
        p.values = p.v.iter().map(|&v| f(v)).collect::<Vec<f64>>();
        p
    }

    /// `v_j / 2`-matched initial data: `G0(v) = ∫ H0(y, v) dy`.
    pub fn from_marginal(field: &Field2D) -> Self {
        let g = &field.grid;
        Profile1D {
            v: g.v.clone(),
            q: g.q,
            values: field.y_marginal(),
            t: field.t,
        }
    }

    pub fn nv(&self) -> usize {
        self.v.len()
    }

    pub fn log_step(&self) -> f64 {
        std::f64::consts::LN_2 / self.q as f64
    }

    /// `∫ v^k G dv`.
    pub fn moment(&self, k: f64) -> f64 {
        let h = self.log_step();
        self.v
            .iter()
            .zip(&self.values)
            .map(|(&v, &g)| v.powf(k + 1.0) * h * g)
            .sum()
    }

    pub fn mass(&self) -> f64 {
        self.moment(1.0)
    }

    pub fn number(&self) -> f64 {
        self.moment(0.0)
    }

    /// Volume below which half of the mass sits, interpolated in `ln v`.
    pub fn mass_median(&self) -> Result<f64> {
        let h = self.log_step();
        let parts: Vec<f64> = self.v.iter().zip(&self.values).map(|(&v, &g)| v * v * h * g).collect();
        let total: f64 = parts.iter().sum();
        if !(total > 0.0) {
            return Err(Error::UndefinedFraction);
        }
        let mut acc = 0.0;
        for (j, &p) in parts.iter().enumerate() {
            if acc + p >= 0.5 * total {
                let frac = if p > 0.0 { (0.5 * total - acc) / p } else { 0.0 };
                // Node j carries the log-cell [ln v_j − h/2, ln v_j + h/2].
                return Ok((self.v[j].ln() + (frac - 0.5) * h).exp());
            }
            acc += p;
        }
        Ok(*self.v.last().unwrap())
    }
}

/// Rates of the diagonal equation, and the mass flux leaving the top of the grid.
pub fn diagonal_rhs_with_outflux(g: &Profile1D, alpha: f64, gamma: f64, closure: Closure) -> (Vec<f64>, f64) {
    let n = g.nv();
    let p = gamma + 1.0 - alpha;
    let c = 2.0 / alpha;
    let loss: Vec<f64> = (0..n).map(|j| c * g.v[j].powf(p) * g.values[j] * g.values[j]).collect();
    let mut rate = vec![0.0; n];
    let mut outflux = 0.0;
    let h = g.log_step();
    for j in 0..n {
        if j + g.q < n {
            rate[j] -= loss[j];
            rate[j + g.q] += 0.25 * loss[j];
        } else if closure == Closure::Open {
            rate[j] -= loss[j];
            outflux += g.v[j] * g.v[j] * h * loss[j];
        }
    }
    (rate, outflux)
}

/// Closed-grid rates of the diagonal equation.
pub fn diagonal_rhs(g: &Profile1D, alpha: f64, gamma: f64) -> Result<Vec<f64>> {
    Profile1D::from_nodes(g.v.clone(), g.q, g.values.clone(), g.t)?;
    Ok(diagonal_rhs_with_outflux(g, alpha, gamma, Closure::Closed).0)
}

/// `∫ v · rate dv` relative to `∫ v · |rate| dv`.
pub fn mass_flux_defect(g: &Profile1D, rate: &[f64]) -> f64 {
    let h = g.log_step();
    let (mut s, mut a) = (0.0, 0.0);
    for (&v, &r) in g.v.iter().zip(rate) {
        s += v * v * h * r;
        a += v * v * h * r.abs();
    }
    if a == 0.0 {
        0.0
    } else {
        s.abs() / a
    }
}

/// Largest stable `dt·λ` for the classical fourth-order scheme on `G' = −λG`
/// is about 2.78; this keeps a margin.
pub const RK4_BOUND: f64 = 2.5;

#[derive(Debug, Clone, Serialize)]
pub struct DiagonalTrajectory {
    pub profiles: Vec<Profile1D>,
    pub mass: Vec<f64>,
    /// Cumulative mass removed by the positivity clamp (negative parts added back count negative).
    pub clamp_mass: f64,
    pub outflux: f64,
    pub steps: usize,
}

impl DiagonalTrajectory {
    pub fn final_profile(&self) -> &Profile1D {
        self.profiles.last().expect("trajectory holds the initial profile")
    }

    /// `|M1(T) + outflux − M1(0)| / M1(0)`.
    pub fn mass_drift(&self) -> f64 {
        let m0 = self.mass[0];
        (self.mass.last().unwrap() + self.outflux - m0).abs() / m0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DiagonalOptions {
    pub alpha: f64,
    pub gamma: f64,
    pub horizon: f64,
    pub dt: f64,
    pub snapshot_every: usize,
    pub closure: Closure,
    /// Negative overshoot tolerated per step, relative to `max G`.
    pub clamp_budget: f64,
}

impl DiagonalOptions {
    pub fn new(alpha: f64, gamma: f64, horizon: f64, dt: f64) -> Self {
        DiagonalOptions {
            alpha,
            gamma,
            horizon,
            dt,
            snapshot_every: 1,
            closure: Closure::Closed,
            clamp_budget: 1e-10,
        }
    }
}

fn axpy(base: &[f64], k: &[f64], a: f64) -> Vec<f64> {
    base.iter().zip(k).map(|(&b, &x)| b + a * x).collect()
}

/// Classical RK4 with a positivity clamp. Snapshots are taken every
/// `snapshot_every` steps and at the horizon.
pub fn evolve_diagonal(g0: &Profile1D, opts: DiagonalOptions) -> Result<DiagonalTrajectory> {
    let DiagonalOptions { alpha, gamma, horizon, dt, snapshot_every, closure, clamp_budget } = opts;
    Profile1D::from_nodes(g0.v.clone(), g0.q, g0.values.clone(), g0.t)?;
    if !(dt > 0.0 && horizon >= 0.0) {
        return Err(Error::domain("need dt > 0 and horizon >= 0"));
    }
    if gamma - alpha >= 1.0 {
        warn!("gamma - alpha = {} is outside the existence regime (< 1)", gamma - alpha);
    }
    let p = gamma + 1.0 - alpha;
    let mut g = g0.clone();
    let t0 = g0.t;
    let mut traj = DiagonalTrajectory {
        profiles: vec![g.clone()],
        mass: vec![g.mass()],
        clamp_mass: 0.0,
        outflux: 0.0,
        steps: 0,
    };
    let h = g.log_step();
    let rates = |vals: &[f64], base: &Profile1D| {
        let prof = Profile1D { values: vals.to_vec(), ..base.clone() };
        diagonal_rhs_with_outflux(&prof, alpha, gamma, closure)
    };
    let mut elapsed = 0.0;
    while elapsed < horizon {
        let remaining = horizon - elapsed;
        let step = if remaining <= dt * (1.0 + 1e-9) { remaining } else { dt };
        let lambda = g
            .v
            .iter()
            .zip(&g.values)
            .map(|(&v, &x)| 2.0 / alpha * v.powf(p) * 2.0 * x)
            .fold(0.0, f64::max);
        if step * lambda > RK4_BOUND {
            return Err(Error::Stability { dt: step, required: RK4_BOUND / lambda, bound: RK4_BOUND });
        }
        let (k1, o1) = rates(&g.values, &g);
        let y2 = axpy(&g.values, &k1, 0.5 * step);
        let (k2, o2) = rates(&y2, &g);
        let y3 = axpy(&g.values, &k2, 0.5 * step);
        let (k3, o3) = rates(&y3, &g);
        let y4 = axpy(&g.values, &k3, step);
        let (k4, o4) = rates(&y4, &g);
        let gmax = g.values.iter().cloned().fold(0.0, f64::max);
        let mut next = Vec::with_capacity(g.nv());
        for j in 0..g.nv() {
            let x = g.values[j] + step / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            if x < 0.0 {
                if -x > clamp_budget * gmax {
                    let required = step * 0.5;
                    return Err(Error::Stability { dt: step, required, bound: RK4_BOUND });
                }
                traj.clamp_mass += g.v[j] * g.v[j] * h * x;
                next.push(0.0);
            } else {
                next.push(x);
            }
        }
        traj.outflux += step / 6.0 * (o1 + 2.0 * o2 + 2.0 * o3 + o4);
        g.values = next;
        elapsed = if step == remaining { horizon } else { elapsed + step };
        g.t = t0 + elapsed;
        traj.steps += 1;
        traj.mass.push(g.mass());
        let at_end = elapsed == horizon;
        if at_end || (snapshot_every > 0 && traj.steps % snapshot_every == 0) {
            traj.profiles.push(g.clone());
        }
    }
    if traj.profiles.last().map(|p| p.t) != Some(g.t) {
        traj.profiles.push(g);
    }
    Ok(traj)
}

/// Log-log slope of the mass-median volume over `[t_lo, t_hi]` by least squares
/// on the stored profiles.
pub fn median_growth_slope(traj: &DiagonalTrajectory, t_lo: f64, t_hi: f64) -> Result<f64> {
    let pts: Vec<(f64, f64)> = traj
        .profiles
        .iter()
        .filter(|p| p.t >= t_lo && p.t <= t_hi && p.t > 0.0)
        .map(|p| Ok((p.t.ln(), p.mass_median()?.ln())))
        .collect::<Result<_>>()?;
    if pts.len() < 2 {
        return Err(Error::domain("need at least two profiles in the fit window"));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Self-similar exponent `β = 1/(1 − (γ − α))`.
pub fn beta(alpha: f64, gamma: f64) -> f64 {
    1.0 / (1.0 - (gamma - alpha))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MarginalError {
    pub t: f64,
    pub l1: f64,
}

/// `L¹(v dv)` distance between the `y`-marginal of each 2D snapshot and the 1D
/// profile at the same time. Every requested time must be present in both.
pub fn marginal_compare(snapshots: &[Field2D], profiles: &[Profile1D], times: &[f64]) -> Result<Vec<MarginalError>> {
    let find_tol = |t: f64| 1e-9 * t.abs().max(1.0);
    times
        .iter()
        .map(|&t| {
            let f = snapshots
                .iter()
                .find(|f| (f.t - t).abs() <= find_tol(t))
                .ok_or_else(|| Error::domain(format!("no 2D snapshot at t = {t}")))?;
            let p = profiles
                .iter()
                .find(|p| (p.t - t).abs() <= find_tol(t))
                .ok_or_else(|| Error::domain(format!("no 1D profile at t = {t}")))?;
            let g = &f.grid;
            if g.v.len() != p.v.len() || g.v.iter().zip(&p.v).any(|(a, b)| a != b) {
                return Err(Error::GridMismatch("2D and 1D volume grids differ".into()));
            }
            let m = f.y_marginal();
            let l1 = (0..g.nv()).map(|j| g.wv[j] * g.v[j] * (m[j] - p.values[j]).abs()).sum();
            Ok(MarginalError { t, l1 })
        })
        .collect()
}
