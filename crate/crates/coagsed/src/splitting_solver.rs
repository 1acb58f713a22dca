//! Operator splitting: exact transport composed with a coagulation substep.
//!
//! The density of each `v` column is carried by parcels. Parcels born at the
//! same instant own the cells of the `y` nodes and are then contracted together
//! towards the curve `y = v^α`, so a column is a list of generations, each an
//! affinely shrunk copy of the `y` cells with its own birth time. Transport of
//! a parcel is therefore exact. The field seen by the coagulation operator
//! spreads each parcel uniformly over its transported cell and averages the
//! nodal hat functions against it; the loss rate is gathered back with the
//! same weights, so number and volume bookkeeping is exact.
//!
//! The coagulation substep is Heun's method (two Euler stages averaged).
//! Newborn parcels are created on the nodes.

use rayon::prelude::*;
use serde::Serialize;

use crate::coagulation::CoagOperator;
use crate::grid_fields::{Field2D, Grid2D, Params};
use crate::kernels::KernelSpec;
use crate::{Error, Result};
use std::sync::Arc;

/// Largest admissible `dt · max a` in the coagulation substep.
pub const STABILITY_BOUND: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    /// Half transport, coagulation, half transport.
    Strang,
    /// Full transport, then coagulation.
    Lie,
}

#[derive(Debug, Clone)]
struct Generation {
    birth: f64,
    /// Parcel numbers (`∫H dy` carried), column-major: `n[j * ny + i]`.
    n: Vec<f64>,
}

/// `∫_{-∞}^u max(0, 1 − |x|) dx`.
fn hat_primitive(u: f64) -> f64 {
    if u <= -1.0 {
        0.0
    } else if u <= 0.0 {
        0.5 * (u + 1.0) * (u + 1.0)
    } else if u < 1.0 {
        1.0 - 0.5 * (1.0 - u) * (1.0 - u)
    } else {
        1.0
    }
}

/// Averages of the nodal hat functions over `[lo, hi]` (clipped to the grid).
/// The weights sum to one; a degenerate interval falls back to linear
/// interpolation at its midpoint.
fn overlap_weights(g: &Grid2D, lo: f64, hi: f64, mut f: impl FnMut(usize, f64)) {
    let (lo, hi) = (lo.max(g.y_min()), hi.min(g.y_max()));
    let dy = g.dy();
    if !(hi - lo > 1e-12 * dy) {
        if let Some((l, th)) = g.locate_y(0.5 * (lo + hi)) {
            f(l, 1.0 - th);
            if th > 0.0 {
                f(l + 1, th);
            }
        }
        return;
    }
    let (ulo, uhi) = ((lo - g.y_min()) / dy, (hi - g.y_min()) / dy);
    let first = (ulo.floor() as usize).min(g.ny() - 1);
    let last = (uhi.ceil() as usize).min(g.ny() - 1);
    let scale = dy / (hi - lo);
    for l in first..=last {
        let w = scale * (hat_primitive(uhi - l as f64) - hat_primitive(ulo - l as f64));
        if w != 0.0 {
            f(l, w);
        }
    }
}

/// Parcel representation of a density on a fixed grid.
#[derive(Debug, Clone)]
pub struct ParcelState {
    grid: Arc<Grid2D>,
    curves: Vec<f64>,
    epsilon: f64,
    t: f64,
    generations: Vec<Generation>,
}

impl ParcelState {
    pub fn from_field(field: &Field2D, params: &Params) -> Self {
        let g = field.grid.clone();
        let (ny, nv) = (g.ny(), g.nv());
        let mut n = vec![0.0; ny * nv];
        for i in 0..ny {
            for j in 0..nv {
                n[j * ny + i] = field.at(i, j) * g.wy[i];
            }
        }
        ParcelState {
            curves: g.v.iter().map(|&v| params.curve(v)).collect(),
            grid: g,
            epsilon: params.epsilon,
            t: field.t,
            generations: vec![Generation { birth: field.t, n }],
        }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn generation_count(&self) -> usize {
        self.generations.len()
    }

    fn contraction(&self, birth: f64) -> f64 {
        (-(self.t - birth) / self.epsilon).exp()
    }

    /// `Σ v_j ω_j ∫H dy`, exact for the parcel representation.
    pub fn mass(&self) -> f64 {
        let g = &self.grid;
        let ny = g.ny();
        (0..g.nv())
            .map(|j| {
                let col: f64 = self
                    .generations
                    .iter()
                    .map(|gen| gen.n[j * ny..(j + 1) * ny].iter().sum::<f64>())
                    .sum();
                g.v[j] * g.wv[j] * col
            })
            .sum()
    }

    /// Transported cell of parcel `i` in column `j`.
    fn cell(&self, i: usize, j: usize, k: f64) -> (f64, f64) {
        let g = &self.grid;
        let ny = g.ny();
        let lo = if i > 0 { 0.5 * (g.y[i - 1] + g.y[i]) } else { g.y[0] };
        let hi = if i + 1 < ny { 0.5 * (g.y[i] + g.y[i + 1]) } else { g.y[ny - 1] };
        let c = self.curves[j];
        (c + (lo - c) * k, c + (hi - c) * k)
    }

    /// Deposit, column-major, as `∫H dy` per node.
    fn deposit_columns(&self) -> Vec<f64> {
        let g = &self.grid;
        let ny = g.ny();
        let ks: Vec<f64> = self.generations.iter().map(|gen| self.contraction(gen.birth)).collect();
        let mut out = vec![0.0; ny * g.nv()];
        out.par_chunks_mut(ny).enumerate().for_each(|(j, dep)| {
            for (gen, &k) in self.generations.iter().zip(&ks) {
                for (i, &n) in gen.n[j * ny..(j + 1) * ny].iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let (lo, hi) = self.cell(i, j, k);
                    overlap_weights(g, lo, hi, |l, w| dep[l] += n * w);
                }
            }
        });
        out
    }

    pub fn to_field(&self) -> Field2D {
        let g = &self.grid;
        let (ny, nv) = (g.ny(), g.nv());
        let dep = self.deposit_columns();
        let mut f = Field2D::zeros(g.clone(), self.t);
        for i in 0..ny {
            for j in 0..nv {
                f.values[g.idx(i, j)] = dep[j * ny + i] / g.wy[i];
            }
        }
        f
    }

    /// Advances the transport clock; parcels that have left the `y` range are
    /// removed and their volume returned.
    pub fn transport(&mut self, s: f64) -> f64 {
        self.t += s;
        let g = self.grid.clone();
        let ny = g.ny();
        let ks: Vec<f64> = self.generations.iter().map(|gen| self.contraction(gen.birth)).collect();
        let mut lost = 0.0;
        for (gen, &k) in self.generations.iter_mut().zip(&ks) {
            for j in 0..g.nv() {
                let c = self.curves[j];
                for i in 0..ny {
                    let n = &mut gen.n[j * ny + i];
                    if *n != 0.0 && g.locate_y(c + (g.y[i] - c) * k).is_none() {
                        lost += g.v[j] * g.wv[j] * *n;
                        *n = 0.0;
                    }
                }
            }
        }
        self.generations.retain(|gen| gen.n.iter().any(|&n| n != 0.0));
        lost
    }

    /// Per-parcel survival factors `1 − dt a(y_p)` for every generation.
    fn survival(&self, a: &[f64], dt: f64) -> Vec<Vec<f64>> {
        let g = &self.grid;
        let (ny, nv) = (g.ny(), g.nv());
        self.generations
            .par_iter()
            .map(|gen| {
                let k = self.contraction(gen.birth);
                let mut s = vec![1.0; ny * nv];
                for j in 0..nv {
                    for i in 0..ny {
                        if gen.n[j * ny + i] == 0.0 {
                            continue;
                        }
                        let (lo, hi) = self.cell(i, j, k);
                        let mut ap = 0.0;
                        overlap_weights(g, lo, hi, |l, w| ap += w * a[g.idx(l, j)]);
                        s[j * ny + i] = 1.0 - dt * ap;
                    }
                }
                s
            })
            .collect()
    }
}

struct StageRates {
    a: Vec<f64>,
    /// Newborn numbers per node over the stage, column-major.
    born: Vec<f64>,
    /// Volume leaving through `v_max` over the stage.
    overflow: f64,
}

fn stage_rates(state: &ParcelState, op: &CoagOperator, dt: f64) -> Result<StageRates> {
    let h = state.to_field();
    let g = &state.grid;
    let (ny, nv) = (g.ny(), g.nv());
    let a = op.rate_a(&h);
    let a_max = a.iter().cloned().fold(0.0, f64::max);
    if dt * a_max > STABILITY_BOUND {
        return Err(Error::Stability {
            dt,
            required: STABILITY_BOUND / a_max,
            bound: STABILITY_BOUND,
        });
    }
    let rates = op.apply(&h, &h)?;
    let mut born = vec![0.0; ny * nv];
    for i in 0..ny {
        for j in 0..nv {
            born[j * ny + i] = dt * rates.gain[g.idx(i, j)] * g.wy[i];
        }
    }
    let overflow = dt * rates.overflow.iter().zip(&g.wy).map(|(o, w)| o * w).sum::<f64>();
    Ok(StageRates { a, born, overflow })
}

/// Heun substep of the coagulation operator at the current time. Returns the
/// volume lost through `v_max`.
fn coagulation_substep(state: &mut ParcelState, op: &CoagOperator, dt: f64) -> Result<f64> {
    let r0 = stage_rates(state, op, dt)?;
    let s0 = state.survival(&r0.a, dt);

    let mut stage1 = state.clone();
    for (gen, s) in stage1.generations.iter_mut().zip(&s0) {
        gen.n.iter_mut().zip(s).for_each(|(n, f)| *n *= f);
    }
    stage1.generations.push(Generation {
        birth: state.t,
        n: r0.born.clone(),
    });
    let r1 = stage_rates(&stage1, op, dt)?;
    let s1 = stage1.survival(&r1.a, dt);

    let old = state.generations.len();
    for ((gen, f0), f1) in state.generations.iter_mut().zip(&s0).zip(&s1[..old]) {
        for ((n, a), b) in gen.n.iter_mut().zip(f0).zip(f1) {
            *n = 0.5 * (*n + *n * a * b);
        }
    }
    let newborn: Vec<f64> = r0
        .born
        .iter()
        .zip(&s1[old])
        .zip(&r1.born)
        .map(|((b0, f1), b1)| 0.5 * (b0 * f1 + b1))
        .collect();
    if newborn.iter().any(|&n| n != 0.0) {
        state.generations.push(Generation {
            birth: state.t,
            n: newborn,
        });
    }
    Ok(0.5 * (r0.overflow + r1.overflow))
}

/// Time integrator bound to one grid, kernel and parameter set.
pub struct SplittingSolver {
    op: CoagOperator,
    pub scheme: Scheme,
}

impl SplittingSolver {
    pub fn new(grid: &Grid2D, kernel: &KernelSpec, scheme: Scheme) -> Self {
        SplittingSolver {
            op: CoagOperator::new(grid, kernel),
            scheme,
        }
    }

    /// One split step. Returns the volume that left the grid during the step.
    pub fn advance(&self, state: &mut ParcelState, dt: f64) -> Result<f64> {
        let mut lost = 0.0;
        match self.scheme {
            Scheme::Strang => {
                let mut trial = state.clone();
                lost += trial.transport(0.5 * dt);
                lost += coagulation_substep(&mut trial, &self.op, dt)?;
                lost += trial.transport(0.5 * dt);
                *state = trial;
            }
            Scheme::Lie => {
                let mut trial = state.clone();
                lost += trial.transport(dt);
                lost += coagulation_substep(&mut trial, &self.op, dt)?;
                *state = trial;
            }
        }
        Ok(lost)
    }
}

/// One Strang step starting from a grid field.
pub fn step(field: &Field2D, dt: f64, kernel: &KernelSpec, params: &Params) -> Result<Field2D> {
    let solver = SplittingSolver::new(&field.grid, kernel, Scheme::Strang);
    let mut state = ParcelState::from_field(field, params);
    solver.advance(&mut state, dt)?;
    Ok(state.to_field())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MassRecord {
    pub t: f64,
    pub mass: f64,
    pub boundary_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<Field2D>,
    pub mass_series: Vec<MassRecord>,
    pub steps: usize,
}

impl Trajectory {
    pub fn initial_mass(&self) -> f64 {
        self.mass_series[0].mass
    }

    /// `|mass + boundary loss − mass(0)| / mass(0)` at the final time.
    pub fn mass_drift(&self) -> f64 {
        let last = self.mass_series.last().expect("nonempty series");
        let m0 = self.initial_mass();
        (last.mass + last.boundary_loss - m0).abs() / m0
    }

    pub fn final_field(&self) -> &Field2D {
        self.snapshots.last().expect("nonempty trajectory")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub horizon: f64,
    pub dt: f64,
    /// Snapshot every this many steps; the final state is always stored.
    pub snapshot_every: usize,
    pub scheme: Scheme,
}

/// Integrates from `initial` to `initial.t + horizon`. The last step is
/// shortened to land on the horizon.
pub fn run_from(initial: &Field2D, kernel: &KernelSpec, params: &Params, opts: RunOptions) -> Result<Trajectory> {
    if !(opts.horizon >= 0.0) || !(opts.dt > 0.0) {
        return Err(Error::domain("need horizon >= 0 and dt > 0"));
    }
    let solver = SplittingSolver::new(&initial.grid, kernel, opts.scheme);
    let mut state = ParcelState::from_field(initial, params);
    let t_end = initial.t + opts.horizon;
    let steps = if opts.horizon == 0.0 {
        0
    } else {
        (opts.horizon / opts.dt - 1e-9).ceil().max(1.0) as usize
    };
    let every = opts.snapshot_every.max(1);
    let mut loss = 0.0;
    let mut traj = Trajectory {
        snapshots: vec![state.to_field()],
        mass_series: vec![MassRecord {
            t: state.t,
            mass: state.mass(),
            boundary_loss: 0.0,
        }],
        steps,
    };
    for k in 1..=steps {
        let dt = if k == steps { t_end - state.t } else { opts.dt };
        loss += solver.advance(&mut state, dt)?;
        traj.mass_series.push(MassRecord {
            t: state.t,
            mass: state.mass(),
            boundary_loss: loss,
        });
        if k % every == 0 || k == steps {
            traj.snapshots.push(state.to_field());
        }
        log::debug!("step {k}/{steps}: t = {:.6}, generations = {}", state.t, state.generation_count());
    }
    Ok(traj)
}

/// Runs from the saturating initial profile on `grid`.
pub fn run(
    params: &Params,
    grid: Arc<Grid2D>,
    kernel: &KernelSpec,
    horizon: f64,
    dt: f64,
    snapshot_every: usize,
) -> Result<Trajectory> {
    let h0 = crate::grid_fields::init_field(grid, params);
    run_from(
        &h0,
        kernel,
        params,
        RunOptions {
            horizon,
            dt,
            snapshot_every,
            scheme: Scheme::Strang,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coagulation::apply_symmetric;
    use crate::grid_fields::{derived_constants, init_field, total_mass, ModelInputs, ParamMode};
    use approx::assert_relative_eq;

    fn params() -> Params {
        derived_constants(
            ModelInputs {
                epsilon: 0.05,
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
        Arc::new(Grid2D::new(-6.0, 6.0, 49, 2f64.powi(-4), 4, 33).unwrap())
    }

    #[test]
    fn parcels_round_trip_the_field() {
        let p = params();
        let f = init_field(grid(), &p);
        let s = ParcelState::from_field(&f, &p);
        let d = s.to_field();
        // At birth each interior parcel covers its own cell: weights 1/8, 3/4, 1/8.
        let g = &f.grid;
        for i in 2..g.ny() - 2 {
            for j in 0..g.nv() {
                let expected = 0.125 * f.at(i - 1, j) + 0.75 * f.at(i, j) + 0.125 * f.at(i + 1, j);
                assert_relative_eq!(d.at(i, j), expected, max_relative = 1e-13, epsilon = 1e-300);
            }
        }
        assert_relative_eq!(s.mass(), total_mass(&f), max_relative = 1e-14);
        assert_relative_eq!(total_mass(&d), total_mass(&f), max_relative = 1e-13);
    }

    #[test]
    fn zero_horizon_gives_single_snapshot() {
        let p = params();
        let traj = run(&p, grid(), &KernelSpec::sum(1.2), 0.0, 0.01, 1).unwrap();
        assert_eq!(traj.snapshots.len(), 1);
        assert_eq!(traj.mass_series.len(), 1);
    }

    #[test]
    fn zero_kernel_is_pure_transport() {
        let p = params();
        let f = init_field(grid(), &p);
        let k = KernelSpec::sum(1.2).scaled(0.0);
        let one = step(&f, 0.02, &k, &p).unwrap();
        let solver = SplittingSolver::new(&f.grid, &k, Scheme::Strang);
        let mut s = ParcelState::from_field(&f, &p);
        solver.advance(&mut s, 0.01).unwrap();
        solver.advance(&mut s, 0.01).unwrap();
        assert!(s.to_field().sup_diff(&one) < 1e-12);
        assert_eq!(s.generation_count(), 1);
    }

    #[test]
    fn mass_balance_is_exact() {
        let p = params();
        let traj = run(&p, grid(), &KernelSpec::sum(1.2), 0.1, 0.005, 5).unwrap();
        assert!(traj.mass_drift() < 1e-13, "drift {}", traj.mass_drift());
        let losses: Vec<f64> = traj.mass_series.iter().map(|r| r.boundary_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] >= w[0]));
        assert!(traj.snapshots.iter().all(|s| s.values.iter().all(|h| *h >= 0.0)));
        assert_eq!(traj.snapshots.len(), 5);
    }

    #[test]
    fn stability_refusal_names_required_dt() {
        let p = params();
        let f = init_field(grid(), &p);
        match step(&f, 10.0, &KernelSpec::sum(1.2), &p) {
            Err(Error::Stability { dt, required, .. }) => assert!(required < dt),
            other => panic!("expected refusal, got {other:?}"),
        }
    }

    #[test]
    fn small_step_is_consistent_with_the_equation() {
        // Relative to the deposited initial field, the difference quotient approaches
        // (H + (y − v^α)∂_yH)/ε + gain − loss as dt and Δy shrink.
        let mut p = params();
        p.epsilon = 0.5;
        let g = Arc::new(Grid2D::new(-1.0, 3.0, 4001, 1.0, 4, 17).unwrap());
        let f = init_field(g.clone(), &p);
        let k = KernelSpec::sum(1.2);
        let rates = apply_symmetric(&f, &k);
        let (i, j) = (2200, 0);
        let z = g.y[i] - p.curve(g.v[j]);
        let m = p.m as i32;
        let dpsi = -(m as f64) * z.powi(m - 1) / (1.0 + z.powi(m)).powi(2);
        let dh = p.a / (1.0 + g.v[j].powf(p.b)) * dpsi;
        let expected =
            (f.at(i, j) + z * dh) / p.epsilon + rates.gain[g.idx(i, j)] - rates.loss[g.idx(i, j)];
        let h = step(&f, 1e-4, &k, &p).unwrap();
        let h0 = ParcelState::from_field(&f, &p).to_field();
        let err = ((h.at(i, j) - h0.at(i, j)) / 1e-4 - expected).abs();
        assert!(err < 0.01 * expected.abs().max(f.at(i, j) / p.epsilon), "{err} vs {expected}");
    }

    #[test]
    fn lie_and_strang_agree_to_first_order() {
        let p = params();
        let f = init_field(grid(), &p);
        let k = KernelSpec::sum(1.2);
        let diff = |dt: f64| {
            let o = |scheme| {
                run_from(&f, &k, &p, RunOptions { horizon: 0.04, dt, snapshot_every: 100, scheme })
                    .unwrap()
                    .final_field()
                    .clone()
            };
            o(Scheme::Strang).sup_diff(&o(Scheme::Lie))
        };
        let (d1, d2) = (diff(0.008), diff(0.004));
        assert!(d2 < 0.75 * d1, "{d1} {d2}");
    }
}
