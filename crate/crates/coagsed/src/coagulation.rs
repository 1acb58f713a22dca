//! Discrete coagulation operator on the geometric volume grid.
//!
//! Densities are turned into node numbers `N_j = H_j ω_j` with the trapezoid
//! weights `ω_j`. A collision of nodes `j` and `k` produces volume
//! `v_j + v_k`, which is split between the two bracketing nodes so that both
//! number and volume are conserved. Products beyond `v_max` leave the grid and
//! are reported as an overflow mass rate.
//!
//! The gain term runs over pairs `k ≤ j` (the smaller partner `w = v_k`), with
//! half weight on `k = j`; for `a = b` this reproduces the symmetric operator
//! exactly.

use rayon::prelude::*;

use crate::grid_fields::{Field2D, Grid2D};
use crate::kernels::KernelSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Bin {
    lo: usize,
    w_lo: f64,
    w_hi: f64,
}

const OVERFLOW: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct CoagOperator {
    nv: usize,
    v: Vec<f64>,
    wv: Vec<f64>,
    kern: Vec<f64>,
    bins: Vec<Bin>,
}

#[derive(Debug, Clone)]
pub struct CoagRate {
    /// Gain density, same layout as [`Field2D::values`].
    pub gain: Vec<f64>,
    /// Loss density.
    pub loss: Vec<f64>,
    /// Volume leaving through `v_max` per unit time, per `y` row (already
    /// integrated over `v`, not over `y`).
    pub overflow: Vec<f64>,
}

fn bin_for(v: &[f64], u: f64) -> Bin {
    let n = v.len();
    if n < 2 || u > v[n - 1] {
        return Bin {
            lo: OVERFLOW,
            w_lo: 0.0,
            w_hi: 0.0,
        };
    }
    let p = v.partition_point(|&x| x <= u).clamp(1, n - 1) - 1;
    let w_hi = (u - v[p]) / (v[p + 1] - v[p]);
    Bin {
        lo: p,
        w_lo: 1.0 - w_hi,
        w_hi,
    }
}

impl CoagOperator {
    pub fn new(grid: &Grid2D, kernel: &KernelSpec) -> Self {
        let nv = grid.nv();
        let v = grid.v.clone();
        let mut kern = vec![0.0; nv * nv];
        let mut bins = Vec::with_capacity(nv * nv);
        for j in 0..nv {
            for k in 0..nv {
                kern[j * nv + k] = kernel.eval_unchecked(v[j], v[k]);
                bins.push(bin_for(&v, v[j] + v[k]));
            }
        }
        CoagOperator {
            nv,
            wv: grid.wv.clone(),
            v,
            kern,
            bins,
        }
    }

    #[inline]
    pub fn kernel(&self, j: usize, k: usize) -> f64 {
        self.kern[j * self.nv + k]
    }

    /// `a_j = Σ_k K(v_j, v_k) b_k ω_k` for one row.
    pub fn rate_a_row(&self, b: &[f64], out: &mut [f64]) {
        let nv = self.nv;
        let bn: Vec<f64> = (0..nv).map(|k| b[k] * self.wv[k]).collect();
        for j in 0..nv {
            let kr = &self.kern[j * nv..(j + 1) * nv];
            out[j] = kr.iter().zip(&bn).map(|(k, n)| k * n).sum();
        }
    }

    /// Gain and loss densities for one row; returns the overflow volume rate.
    pub fn row_rates(&self, a: &[f64], b: &[f64], gain: &mut [f64], loss: &mut [f64]) -> f64 {
        let nv = self.nv;
        let an: Vec<f64> = (0..nv).map(|j| a[j] * self.wv[j]).collect();
        let bn: Vec<f64> = (0..nv).map(|k| b[k] * self.wv[k]).collect();
        gain.iter_mut().for_each(|g| *g = 0.0);
        let mut overflow = 0.0;
        for j in 0..nv {
            let kr = &self.kern[j * nv..(j + 1) * nv];
            loss[j] = a[j] * kr.iter().zip(&bn).map(|(k, n)| k * n).sum::<f64>();
            if an[j] == 0.0 {
                continue;
            }
            for k in 0..=j {
                if bn[k] == 0.0 {
                    continue;
                }
                let mut r = kr[k] * an[j] * bn[k];
                if k == j {
                    r *= 0.5;
                }
                let bin = self.bins[j * nv + k];
                if bin.lo == OVERFLOW {
                    overflow += r * (self.v[j] + self.v[k]);
                } else {
                    gain[bin.lo] += r * bin.w_lo;
                    if bin.w_hi != 0.0 {
                        gain[bin.lo + 1] += r * bin.w_hi;
                    }
                }
            }
        }
        for (g, w) in gain.iter_mut().zip(&self.wv) {
            *g /= w;
        }
        overflow
    }

    pub fn apply(&self, a: &Field2D, b: &Field2D) -> Result<CoagRate> {
        if !a.same_grid(b) {
            return Err(Error::GridMismatch("bilinear coagulation operands".into()));
        }
        if a.grid.nv() != self.nv {
            return Err(Error::GridMismatch("operator built for a different v-grid".into()));
        }
        let nv = self.nv;
        let n = a.values.len();
        let mut gain = vec![0.0; n];
        let mut loss = vec![0.0; n];
        let overflow: Vec<f64> = gain
            .par_chunks_mut(nv)
            .zip(loss.par_chunks_mut(nv))
            .enumerate()
            .map(|(i, (g, l))| {
                let r = i * nv..(i + 1) * nv;
                self.row_rates(&a.values[r.clone()], &b.values[r], g, l)
            })
            .collect();
        Ok(CoagRate { gain, loss, overflow })
    }

    /// `a[H](y_i, v_j)` at every node.
    pub fn rate_a(&self, field: &Field2D) -> Vec<f64> {
        let nv = self.nv;
        let mut out = vec![0.0; field.values.len()];
        out.par_chunks_mut(nv)
            .zip(field.values.par_chunks(nv))
            .for_each(|(o, b)| self.rate_a_row(b, o));
        out
    }
}

/// Symmetric Smoluchowski operator `½∫₀^v K H H − H ∫ K H`, pointwise in `y`.
pub fn apply_symmetric(field: &Field2D, kernel: &KernelSpec) -> CoagRate {
    CoagOperator::new(&field.grid, kernel)
        .apply(field, field)
        .expect("a field always matches its own grid")
}

/// Asymmetric form: gain `∫₀^{v/2} K(v−w,w) a(v−w) b(w) dw`, loss `a(v) ∫ K(v,w) b(w) dw`.
pub fn apply_bilinear(a: &Field2D, b: &Field2D, kernel: &KernelSpec) -> Result<CoagRate> {
    CoagOperator::new(&a.grid, kernel).apply(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_fields::{derived_constants, init_field, ModelInputs, ParamMode};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn grid() -> Arc<Grid2D> {
        Arc::new(Grid2D::new(-4.0, 4.0, 17, 2f64.powi(-4), 4, 33).unwrap())
    }

    fn initial() -> Field2D {
        let p = derived_constants(
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
        .unwrap();
        init_field(grid(), &p)
    }

    fn row_mass_rate(f: &Field2D, r: &CoagRate, i: usize) -> (f64, f64) {
        let g = &f.grid;
        let mut net = 0.0;
        let mut scale = 0.0;
        for j in 0..g.nv() {
            let k = g.idx(i, j);
            net += g.v[j] * g.wv[j] * (r.gain[k] - r.loss[k]);
            scale += g.v[j] * g.wv[j] * r.loss[k];
        }
        (net + r.overflow[i], scale)
    }

    #[test]
    fn zero_field_gives_zero_rates() {
        let f = Field2D::zeros(grid(), 0.0);
        let r = apply_symmetric(&f, &KernelSpec::sum(1.2));
        assert!(r.gain.iter().chain(&r.loss).chain(&r.overflow).all(|x| *x == 0.0));
    }

    #[test]
    fn symmetric_rates_conserve_mass_per_row() {
        let f = initial();
        let r = apply_symmetric(&f, &KernelSpec::sum(1.2));
        for i in 0..f.grid.ny() {
            let (net, scale) = row_mass_rate(&f, &r, i);
            assert!(net.abs() <= 1e-12 * scale, "row {i}: {net} vs {scale}");
        }
    }

    #[test]
    fn constant_kernel_number_decay() {
        // dN/dt = −½ K N² for a constant kernel when no product leaves the grid.
        let g = grid();
        let mut f = Field2D::zeros(g.clone(), 0.0);
        for i in 0..g.ny() {
            for j in 0..12 {
                f.values[g.idx(i, j)] = 1.0 + 0.1 * (i + j) as f64;
            }
        }
        let k = KernelSpec::sum(0.0).scaled(0.5);
        let r = apply_symmetric(&f, &k);
        for i in 0..g.ny() {
            let n: f64 = (0..g.nv()).map(|j| g.wv[j] * f.at(i, j)).sum();
            let dn: f64 = (0..g.nv()).map(|j| g.wv[j] * (r.gain[g.idx(i, j)] - r.loss[g.idx(i, j)])).sum();
            assert_relative_eq!(dn, -0.5 * n * n, max_relative = 1e-12);
            let (net, _) = row_mass_rate(&f, &r, i);
            assert!(net.abs() < 1e-12 * n * n);
            assert_eq!(r.overflow[i], 0.0);
        }
    }

    #[test]
    fn two_point_gain_lands_on_double_volume() {
        let g = grid();
        let kernel = KernelSpec::sum(1.2);
        let j0 = 6;
        let mut f = Field2D::zeros(g.clone(), 0.0);
        f.values[g.idx(3, j0)] = 2.0;
        let r = apply_symmetric(&f, &kernel);
        let n0 = 2.0 * g.wv[j0];
        let k00 = kernel.eval(g.v[j0], g.v[j0]).unwrap();
        for j in 0..g.nv() {
            let expected = if j == j0 + g.q { 0.5 * k00 * n0 * n0 / g.wv[j] } else { 0.0 };
            assert_relative_eq!(r.gain[g.idx(3, j)], expected, max_relative = 1e-14);
        }
        assert_relative_eq!(r.loss[g.idx(3, j0)], 2.0 * k00 * n0, max_relative = 1e-14);
    }

    #[test]
    fn bilinear_reduces_to_symmetric_and_vanishes_for_zero_partner() {
        let f = initial();
        let kernel = KernelSpec::sum(1.2);
        let sym = apply_symmetric(&f, &kernel);
        let bil = apply_bilinear(&f, &f, &kernel).unwrap();
        assert_eq!(sym.gain, bil.gain);
        assert_eq!(sym.loss, bil.loss);
        let zero = Field2D::zeros(f.grid.clone(), 0.0);
        let r = apply_bilinear(&f, &zero, &kernel).unwrap();
        assert!(r.gain.iter().chain(&r.loss).all(|x| *x == 0.0));
    }

    #[test]
    fn bilinear_columns_combine_at_sum_of_volumes() {
        let g = grid();
        let kernel = KernelSpec::sum(1.2);
        let (j_big, j_small) = (12, 5);
        let mut a = Field2D::zeros(g.clone(), 0.0);
        let mut b = Field2D::zeros(g.clone(), 0.0);
        a.values[g.idx(8, j_big)] = 1.0;
        b.values[g.idx(8, j_small)] = 1.0;
        let r = apply_bilinear(&a, &b, &kernel).unwrap();
        let u = g.v[j_big] + g.v[j_small];
        let support: Vec<usize> = (0..g.nv()).filter(|&j| r.gain[g.idx(8, j)] > 0.0).collect();
        assert_eq!(support.len(), 2);
        assert!(g.v[support[0]] <= u && u <= g.v[support[1]]);
        let num: f64 = support.iter().map(|&j| g.wv[j] * r.gain[g.idx(8, j)]).sum();
        let vol: f64 = support.iter().map(|&j| g.v[j] * g.wv[j] * r.gain[g.idx(8, j)]).sum();
        assert_relative_eq!(vol, u * num, max_relative = 1e-13);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let a = initial();
        let other = Arc::new(Grid2D::new(-4.0, 4.0, 17, 2f64.powi(-4), 4, 32).unwrap());
        let b = Field2D::zeros(other, 0.0);
        assert!(apply_bilinear(&a, &b, &KernelSpec::sum(1.2)).is_err());
    }

    #[test]
    fn rate_a_is_moment_combination_for_sum_kernel() {
        let f = initial();
        let g = &f.grid;
        let gamma = 1.2;
        let a = CoagOperator::new(g, &KernelSpec::sum(gamma)).rate_a(&f);
        for i in [0, 8, 16] {
            let m0: f64 = (0..g.nv()).map(|k| g.wv[k] * f.at(i, k)).sum();
            let mg: f64 = (0..g.nv()).map(|k| g.wv[k] * g.v[k].powf(gamma) * f.at(i, k)).sum();
            for j in 0..g.nv() {
                assert_relative_eq!(a[g.idx(i, j)], g.v[j].powf(gamma) * m0 + mg, max_relative = 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn positivity_mass_balance_and_row_locality(
            vals in proptest::collection::vec(0.0f64..3.0, 3 * 33),
            gamma in 1.0f64..1.5,
        ) {
            let g = Arc::new(Grid2D::new(-1.0, 1.0, 3, 2f64.powi(-4), 4, 33).unwrap());
            let f = Field2D { grid: g.clone(), values: vals.clone(), t: 0.0 };
            let kernel = KernelSpec::sum(gamma);
            let r = apply_symmetric(&f, &kernel);
            prop_assert!(r.gain.iter().chain(&r.loss).all(|x| *x >= 0.0));
            for i in 0..3 {
                let (net, scale) = row_mass_rate(&f, &r, i);
                prop_assert!(net.abs() <= 1e-12 * scale.max(1e-300));
            }
            let mut swapped = vals.clone();
            for j in 0..33 {
                swapped.swap(j, 2 * 33 + j);
            }
            let rs = apply_symmetric(&Field2D { grid: g.clone(), values: swapped, t: 0.0 }, &kernel);
            for j in 0..33 {
                prop_assert_eq!(rs.gain[j], r.gain[2 * 33 + j]);
                prop_assert_eq!(rs.loss[2 * 33 + j], r.loss[j]);
            }
        }
    }
}
