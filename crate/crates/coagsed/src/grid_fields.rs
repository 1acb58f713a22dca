//! Phase-space grid, the density field and the model constants.
//!
//! The `y` axis is uniform. The `v` axis is geometric, `v_j = v_min 2^{j/q}`,
//! so that `v_j / 2 = v_{j−q}` holds exactly. Quadrature is trapezoidal on
//! both axes.

use std::sync::Arc;

use log::warn;
use serde::Serialize;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ParamMode {
    /// Enforce the decay hypotheses of the existence theorem.
    Theorem,
    /// Accept any `b, m > 2`, warning when the hypotheses fail.
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Params {
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub b: f64,
    pub m: u32,
    pub a: f64,
    pub m1: f64,
    pub m2: f64,
    /// Drift amplitude of the characteristic system.
    pub l: f64,
    pub c0: f64,
    pub dbar: i64,
    pub bbar: f64,
    pub d: u32,
    pub mode: ParamMode,
}

/// Inputs of [`derived_constants`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelInputs {
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub b: f64,
    pub m: u32,
    pub a: f64,
    pub m1: f64,
    pub m2: f64,
}

pub fn dbar(alpha: f64, gamma: f64) -> Result<i64> {
    if gamma >= 1.0 + alpha {
        return Err(Error::domain(format!(
            "gamma must be below 1 + alpha (gamma = {gamma}, alpha = {alpha})"
        )));
    }
    Ok(2 * (0.5 * (alpha / (alpha + 1.0 - gamma) - 1.0)).ceil() as i64)
}

pub fn bbar(alpha: f64, gamma: f64) -> Result<f64> {
    Ok(alpha * dbar(alpha, gamma)? as f64 + 2.0)
}

/// Even exponent `d` of the characteristic drift, from `floor((b−2)/α)`.
pub fn drift_exponent(b: f64, alpha: f64) -> u32 {
    let f = ((b - 2.0) / alpha).floor().max(0.0) as u32;
    if f % 2 == 1 {
        f - 1
    } else {
        f
    }
}

pub fn c0(m1: f64, a: f64, m: u32) -> f64 {
    (m1 * a).powf(1.0 / (m as f64 - 1.0))
}

/// `L = C_γ K0 K1 K2 A³` with `C_γ = 1 + 2^{−γ}`.
pub fn drift_amplitude(gamma: f64, k0: f64, k1: f64, k2: f64, a: f64) -> f64 {
    (1.0 + 2f64.powf(-gamma)) * k0 * k1 * k2 * a.powi(3)
}

pub fn derived_constants(inputs: ModelInputs, mode: ParamMode) -> Result<Params> {
    let ModelInputs {
        epsilon,
        alpha,
        gamma,
        b,
        m,
        a,
        m1,
        m2,
    } = inputs;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::domain(format!("epsilon must lie in (0,1), got {epsilon}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if !(gamma > 1.0) {
        return Err(Error::domain(format!("gamma must exceed 1, got {gamma}")));
    }
    if a < 1.0 {
        return Err(Error::domain(format!(
            "amplitude A = {a} < 1 is not supported; only the A >= 1 envelope is implemented"
        )));
    }
    if !(m1 > 0.0 && m2 > 0.0) {
        return Err(Error::domain("envelope constants M1, M2 must be positive"));
    }
    let dbar = dbar(alpha, gamma)?;
    let bbar = alpha * dbar as f64 + 2.0;
    let b_min = bbar.max(2.0 * gamma + 1.0);
    let m_min = (2.0 * (gamma + 1.0) / alpha).max(b / alpha + 1.0);
    let hypotheses = b >= b_min && m as f64 > m_min;
    match mode {
        ParamMode::Theorem if !hypotheses => {
            return Err(Error::domain(format!(
                "decay hypotheses fail: need b >= {b_min} and m > {m_min}, got b = {b}, m = {m}"
            )));
        }
        ParamMode::Relaxed => {
            if !(b > 2.0 && m > 2) {
                return Err(Error::domain(format!("need b > 2 and m > 2, got b = {b}, m = {m}")));
            }
            if !hypotheses {
                warn!("relaxed parameters: b = {b} (theorem needs >= {b_min}), m = {m} (theorem needs > {m_min})");
            }
        }
        _ => {}
    }
    Ok(Params {
        epsilon,
        alpha,
        gamma,
        b,
        m,
        a,
        m1,
        m2,
        l: 1.0,
        c0: c0(m1, a, m),
        dbar,
        bbar,
        d: drift_exponent(b, alpha),
        mode,
    })
}

impl Params {
    pub fn with_drift(mut self, l: f64) -> Self {
        self.l = l;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Recompute `C0` after changing `M1`.
    pub fn with_m1(mut self, m1: f64) -> Self {
        self.m1 = m1;
        self.c0 = c0(m1, self.a, self.m);
        self
    }

    pub fn with_m2(mut self, m2: f64) -> Self {
        self.m2 = m2;
        self
    }

    /// `ψ(z) = 1 / (1 + |z|^m)`.
    #[inline]
    pub fn psi(&self, z: f64) -> f64 {
        let p = z.abs().powi(self.m as i32);
        if p.is_finite() {
            1.0 / (1.0 + p)
        } else {
            0.0
        }
    }

    /// The curve `y = v^α` that transport contracts onto.
    #[inline]
    pub fn curve(&self, v: f64) -> f64 {
        v.powf(self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub q: usize,
    pub wy: Vec<f64>,
    pub wv: Vec<f64>,
}

fn trapezoid_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| {
            let left = if i > 0 { x[i] - x[i - 1] } else { 0.0 };
            let right = if i + 1 < n { x[i + 1] - x[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Geometric nodes `v_min 2^{j/q}`, built so that halving is exact in floating point.
pub fn geometric_nodes(v_min: f64, q: usize, nv: usize) -> Vec<f64> {
    let frac: Vec<f64> = (0..q).map(|r| 2f64.powf(r as f64 / q as f64)).collect();
    (0..nv)
        .map(|j| v_min * frac[j % q] * 2f64.powi((j / q) as i32))
        .collect()
}

impl Grid2D {
    pub fn new(y_min: f64, y_max: f64, ny: usize, v_min: f64, q: usize, nv: usize) -> Result<Self> {
        if !(ny >= 2 && y_max > y_min) {
            return Err(Error::domain("y-grid needs at least two nodes and y_max > y_min"));
        }
        if !(v_min > 0.0 && q >= 1 && nv >= 1) {
            return Err(Error::domain("v-grid needs v_min > 0, q >= 1, nv >= 1"));
        }
        let dy = (y_max - y_min) / (ny - 1) as f64;
        let y: Vec<f64> = (0..ny)
            .map(|i| if i + 1 == ny { y_max } else { y_min + i as f64 * dy })
            .collect();
        let v = geometric_nodes(v_min, q, nv);
        Ok(Grid2D {
            wy: trapezoid_weights(&y),
            wv: trapezoid_weights(&v),
            y,
            v,
            q,
        })
    }

    /// Box `y ∈ [−2 v_max^α, 2 v_max^α]` over the geometric `v` axis.
    pub fn default_box(alpha: f64, ny: usize, v_min: f64, q: usize, nv: usize) -> Result<Self> {
        let v_max = *geometric_nodes(v_min, q, nv).last().expect("nv >= 1");
        let h = 2.0 * v_max.powf(alpha);
        Grid2D::new(-h, h, ny, v_min, q, nv)
    }

    pub fn ny(&self) -> usize {
        self.y.len()
    }

    pub fn nv(&self) -> usize {
        self.v.len()
    }

    pub fn dy(&self) -> f64 {
        (self.y_max() - self.y[0]) / (self.y.len() - 1) as f64
    }

    pub fn y_min(&self) -> f64 {
        self.y[0]
    }

    pub fn y_max(&self) -> f64 {
        *self.y.last().unwrap()
    }

    pub fn v_max(&self) -> f64 {
        *self.v.last().unwrap()
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.v.len() + j
    }

    /// Index of `v_j / 2`, if it lies on the grid.
    pub fn half_index(&self, j: usize) -> Option<usize> {
        j.checked_sub(self.q)
    }

    /// Bracketing cell `(i, θ)` with `y = (1−θ) y_i + θ y_{i+1}`; `None` outside the grid.
    #[inline]
    pub fn locate_y(&self, y: f64) -> Option<(usize, f64)> {
        let ny = self.y.len();
        let top = (ny - 1) as f64;
        let s = (y - self.y[0]) / (self.y_max() - self.y[0]) * top;
        // Absorb the rounding of node coordinates at the two ends.
        let slack = 4.0 * f64::EPSILON * top;
        if !(s >= -slack && s <= top + slack) {
            return None;
        }
        let s = s.clamp(0.0, top);
        let i = (s.floor() as usize).min(ny - 2);
        Some((i, s - i as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    pub grid: Arc<Grid2D>,
    /// Row-major in `y`: `values[i * nv + j] = H(y_i, v_j)`.
    pub values: Vec<f64>,
    pub t: f64,
}

impl Field2D {
    pub fn zeros(grid: Arc<Grid2D>, t: f64) -> Self {
        let n = grid.ny() * grid.nv();
        Field2D {
            grid,
            values: vec![0.0; n],
            t,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    /// Linear interpolation in `y` at fixed column `j`, zero outside the grid.
    #[inline]
    pub fn interp_y(&self, y: f64, j: usize) -> f64 {
        match self.grid.locate_y(y) {
            Some((i, th)) => (1.0 - th) * self.at(i, j) + th * self.at(i + 1, j),
            None => 0.0,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Field2D {
            grid: self.grid.clone(),
            values: self.values.iter().map(|h| c * h).collect(),
            t: self.t,
        }
    }

    pub fn same_grid(&self, other: &Field2D) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub fn sup_diff(&self, other: &Field2D) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `∫ H(y, v) dy` per column.
    pub fn y_marginal(&self) -> Vec<f64> {
        let g = &self.grid;
        (0..g.nv())
            .map(|j| (0..g.ny()).map(|i| g.wy[i] * self.at(i, j)).sum())
            .collect()
    }
}

/// Saturating profile `A / ((1 + v^b)(1 + |y − v^α|^m))`.
pub fn init_value(y: f64, v: f64, p: &Params) -> f64 {
    p.a / (1.0 + v.powf(p.b)) * p.psi(y - p.curve(v))
}

pub fn init_field(grid: Arc<Grid2D>, params: &Params) -> Field2D {
    let mut f = Field2D::zeros(grid.clone(), 0.0);
    for (i, &y) in grid.y.iter().enumerate() {
        for (j, &v) in grid.v.iter().enumerate() {
            f.values[grid.idx(i, j)] = init_value(y, v, params);
        }
    }
    f
}

/// `∫∫ v H dv dy` by the trapezoid rule on both axes.
pub fn total_mass(field: &Field2D) -> f64 {
    let g = &field.grid;
    let mut total = 0.0;
    for i in 0..g.ny() {
        let mut row = 0.0;
        for j in 0..g.nv() {
            row += g.wv[j] * g.v[j] * field.at(i, j);
        }
        total += g.wy[i] * row;
    }
    total
}

/// `∫ w^k H(y, w) dw` with linear interpolation between rows.
pub fn moment_k(field: &Field2D, k: f64, y: f64) -> Result<f64> {
    let g = &field.grid;
    let (i, th) = g
        .locate_y(y)
        .ok_or_else(|| Error::domain(format!("y = {y} outside [{}, {}]", g.y_min(), g.y_max())))?;
    Ok((0..g.nv())
        .map(|j| {
            let h = (1.0 - th) * field.at(i, j) + th * field.at(i + 1, j);
            g.wv[j] * g.v[j].powf(k) * h
        })
        .sum())
}
